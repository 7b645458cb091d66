"""Backend selection for the hot loops.

The compiled extension is preferred; set ``BACKVIS_PURE=1`` to force the
numpy fallback. Callers always go through the functions below, which
normalize dtypes and contiguity before dispatching.
"""
import os

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels

if os.environ.get("BACKVIS_PURE", "") == "1" or _ckernels is None:
    BACKEND = "python"
else:
    BACKEND = "cython"

_impl = _BACKENDS[BACKEND]


def available_backends():
    return sorted(_BACKENDS)


def get_backend(name):
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(f"unknown backend {name!r}; available: {available_backends()}") from None


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _idx(a):
    return np.ascontiguousarray(a, dtype=np.intp)


def gather_patches(x, index, backend=None):
    """Rows of ``x`` ([B, d]) selected by ``index`` ([J, p]); -1 entries give 0."""
    impl = _impl if backend is None else get_backend(backend)
    return impl.gather_patches(_f64(x), _idx(index))


def scatter_patches(rows, index, d, backend=None):
    """Adjoint of :func:`gather_patches`: accumulate [B, J, p] rows into [B, d]."""
    impl = _impl if backend is None else get_backend(backend)
    return impl.scatter_patches(_f64(rows), _idx(index), int(d))


def maxpool_forward(x, window, stride, backend=None):
    """Max over each window of a [B, H, W, C] tensor.

    Returns the pooled tensor and, per window, the flat index (within one
    image) of the selected element. Ties go to the lowest flat index.
    """
    impl = _impl if backend is None else get_backend(backend)
    return impl.maxpool_forward(_f64(x), int(window[0]), int(window[1]),
                                int(stride[0]), int(stride[1]))


def maxpool_backward(grad, arg, in_shape, backend=None):
    impl = _impl if backend is None else get_backend(backend)
    H, W, C = in_shape
    return impl.maxpool_backward(_f64(grad), _idx(arg), int(H), int(W), int(C))
