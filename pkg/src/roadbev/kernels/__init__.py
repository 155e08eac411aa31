"""Convolution kernels: compiled extension core with a numpy fallback.

The backend is selected once at import time. By default the compiled core is
used when it has been built, otherwise the numpy implementation. Set
ROADBEV_KERNELS=numpy or ROADBEV_KERNELS=ext to force a backend; forcing `ext`
raises if the extension is missing. `benchmarks/bench_kernels.py` compares the
two on training-sized shapes.
"""

import os

import numpy as np

from . import _numpy

_choice = os.environ.get("ROADBEV_KERNELS", "auto").lower()
if _choice not in ("auto", "ext", "numpy"):
    raise ValueError(f"ROADBEV_KERNELS must be auto, ext or numpy, got {_choice!r}")

_ext = None
if _choice in ("auto", "ext"):
    try:
        from . import _core as _ext
    except ImportError:
        if _choice == "ext":
            raise ImportError(
                "ROADBEV_KERNELS=ext but roadbev.kernels._core is not built; "
                "run `python setup.py build_ext --inplace`") from None
        _ext = None

BACKEND = "ext" if _ext is not None else "numpy"


def _common(x, w):
    dt = np.result_type(x.dtype, w.dtype)
    return np.ascontiguousarray(x, dtype=dt), np.ascontiguousarray(w, dtype=dt)


def _is_pointwise(w, stride, padding):
    # 1x1 stride-1 convolutions are plain matrix products; BLAS wins those
    # regardless of backend
    return w.shape[-1] == 1 and w.shape[-2] == 1 and stride == 1 and padding == 0


def conv2d_fwd(x, w, stride=1, padding=0):
    x, w = _common(x, w)
    if _ext is not None and not _is_pointwise(w, stride, padding):
        return _ext.conv2d_fwd(x, w, stride, padding)
    return _numpy.conv2d_fwd(x, w, stride, padding)


def conv2d_bwd(x, w, gy, stride=1, padding=0):
    x, w = _common(x, w)
    gy = np.ascontiguousarray(gy, dtype=x.dtype)
    if _ext is not None and not _is_pointwise(w, stride, padding):
        return _ext.conv2d_bwd(x, w, gy, stride, padding)
    return _numpy.conv2d_bwd(x, w, gy, stride, padding)


def conv3d_fwd(x, w, stride=1, padding=0):
    x, w = _common(x, w)
    if _ext is not None:
        return _ext.conv3d_fwd(x, w, stride, padding)
    return _numpy.conv3d_fwd(x, w, stride, padding)


def conv3d_bwd(x, w, gy, stride=1, padding=0):
    x, w = _common(x, w)
    gy = np.ascontiguousarray(gy, dtype=x.dtype)
    if _ext is not None:
        return _ext.conv3d_bwd(x, w, gy, stride, padding)
    return _numpy.conv3d_bwd(x, w, gy, stride, padding)
