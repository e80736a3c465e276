"""Backend selection for the hot conv/pool kernels.

The compiled extension ``_ckernels`` is used when it was built and imports
cleanly; otherwise the numpy implementations in ``_pykernels`` are used.
Setting ``UNIPERT_PURE_PYTHON=1`` forces the fallback.
"""

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if not os.environ.get("UNIPERT_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels


def _contig(a):
    return a if a.flags.c_contiguous else a.copy(order="C")


def im2col(x, k, stride):
    """(B, C, H, W) padded input -> (B*OH*OW, C*k*k) patch matrix."""
    return _impl.im2col(_contig(x), k, stride)


def col2im(cols, shape, k, stride):
    """Adjoint of :func:`im2col`; ``shape`` is the padded input shape."""
    B, C, H, W = shape
    return _impl.col2im(_contig(cols), B, C, H, W, k, stride)


def maxpool2x2_forward(x):
    return _impl.maxpool2x2_forward(_contig(x))


def maxpool2x2_backward(dout, idx):
    return _impl.maxpool2x2_backward(_contig(dout), _contig(idx))


def backends():
    """Mapping of available backend name -> kernel module."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels

        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
