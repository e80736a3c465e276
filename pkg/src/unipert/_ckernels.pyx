# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled conv/pool kernels.

Loop orders are chosen so that every accumulation happens in the same order as
the numpy fallback in ``_pykernels``; both backends give bit-identical results.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] x, int k, int stride):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t OH = (H - k) // stride + 1
    cdef Py_ssize_t OW = (W - k) // stride + 1
    cdef Py_ssize_t b, c, oh, ow, ki, kj, row, col
    dtype = np.float32 if real is float else np.float64
    out = np.empty((B * OH * OW, C * k * k), dtype=dtype)
    cdef real[:, ::1] o = out
    with nogil:
        for b in range(B):
            for oh in range(OH):
                for ow in range(OW):
                    row = (b * OH + oh) * OW + ow
                    col = 0
                    for c in range(C):
                        for ki in range(k):
                            for kj in range(k):
                                o[row, col] = x[b, c, oh * stride + ki, ow * stride + kj]
                                col = col + 1
    return out


def col2im(real[:, ::1] cols, Py_ssize_t B, Py_ssize_t C, Py_ssize_t H,
           Py_ssize_t W, int k, int stride):
    cdef Py_ssize_t OH = (H - k) // stride + 1
    cdef Py_ssize_t OW = (W - k) // stride + 1
    cdef Py_ssize_t b, c, oh, ow, ki, kj, col
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((B, C, H, W), dtype=dtype)
    cdef real[:, :, :, ::1] dx = out
    with nogil:
        for b in range(B):
            for c in range(C):
                for ki in range(k):
                    for kj in range(k):
                        col = (c * k + ki) * k + kj
                        for oh in range(OH):
                            for ow in range(OW):
                                dx[b, c, oh * stride + ki, ow * stride + kj] += \
                                    cols[(b * OH + oh) * OW + ow, col]
    return out


def maxpool2x2_forward(real[:, :, :, ::1] x):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t H2 = x.shape[2] // 2, W2 = x.shape[3] // 2
    cdef Py_ssize_t b, c, i, j
    cdef real best, v
    cdef cnp.int8_t arg
    dtype = np.float32 if real is float else np.float64
    out = np.empty((B, C, H2, W2), dtype=dtype)
    idx = np.empty((B, C, H2, W2), dtype=np.int8)
    cdef real[:, :, :, ::1] o = out
    cdef cnp.int8_t[:, :, :, ::1] a = idx
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(H2):
                    for j in range(W2):
                        best = x[b, c, 2 * i, 2 * j]
                        arg = 0
                        v = x[b, c, 2 * i, 2 * j + 1]
                        if v > best:
                            best = v
                            arg = 1
                        v = x[b, c, 2 * i + 1, 2 * j]
                        if v > best:
                            best = v
                            arg = 2
                        v = x[b, c, 2 * i + 1, 2 * j + 1]
                        if v > best:
                            best = v
                            arg = 3
                        o[b, c, i, j] = best
                        a[b, c, i, j] = arg
    return out, idx


def maxpool2x2_backward(real[:, :, :, ::1] dout, cnp.int8_t[:, :, :, ::1] idx):
    cdef Py_ssize_t B = dout.shape[0], C = dout.shape[1]
    cdef Py_ssize_t H2 = dout.shape[2], W2 = dout.shape[3]
    cdef Py_ssize_t b, c, i, j
    cdef int a
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((B, C, 2 * H2, 2 * W2), dtype=dtype)
    cdef real[:, :, :, ::1] dx = out
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(H2):
                    for j in range(W2):
                        a = idx[b, c, i, j]
                        dx[b, c, 2 * i + (a >> 1), 2 * j + (a & 1)] = dout[b, c, i, j]
    return out
