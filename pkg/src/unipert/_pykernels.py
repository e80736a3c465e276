"""Pure-numpy versions of the conv/pool kernels (fallback for ``_ckernels``)."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, k, stride):
    B, C, H, W = x.shape
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    OH, OW = win.shape[2], win.shape[3]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        B * OH * OW, C * k * k
    )


def col2im(cols, B, C, H, W, k, stride):
    OH = (H - k) // stride + 1
    OW = (W - k) // stride + 1
    dc = cols.reshape(B, OH, OW, C, k, k).transpose(0, 3, 4, 5, 1, 2)
    dx = np.zeros((B, C, H, W), dtype=cols.dtype)
    # accumulate kernel offsets in row-major (ki, kj) order, same as the C loop
    for ki in range(k):
        for kj in range(k):
            dx[:, :, ki : ki + stride * OH : stride, kj : kj + stride * OW : stride] += dc[
                :, :, ki, kj
            ]
    return dx


def maxpool2x2_forward(x):
    B, C, H, W = x.shape
    blocks = (
        x.reshape(B, C, H // 2, 2, W // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(B, C, H // 2, W // 2, 4)
    )
    idx = blocks.argmax(axis=-1).astype(np.int8)
    out = np.take_along_axis(blocks, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool2x2_backward(dout, idx):
    B, C, H2, W2 = dout.shape
    blocks = np.zeros((B, C, H2, W2, 4), dtype=dout.dtype)
    np.put_along_axis(blocks, idx[..., None].astype(np.intp), dout[..., None], axis=-1)
    return np.ascontiguousarray(
        blocks.reshape(B, C, H2, W2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, 2 * H2, 2 * W2)
    )
