"""Convolution kernel backends.

A compiled Cython core is used when its extension module is importable, with
a pure numpy fallback otherwise. The choice can be forced through the
SOUPKIT_KERNELS environment variable ("auto", "numpy", or "cython"); forcing
"cython" on a build without the extension raises at import time.

All entry points accept float32 or float64 arrays and return arrays of the
same dtype. The two backends agree to within floating point summation order.
"""

import os

import numpy as np

from . import numpy_backend

_SUPPORTED = (np.dtype(np.float32), np.dtype(np.float64))

_choice = os.environ.get("SOUPKIT_KERNELS", "auto").strip().lower()
_compiled = None
if _choice in ("auto", "cython"):
    try:
        from . import _convcore as _compiled
    except ImportError:
        if _choice == "cython":
            raise ImportError(
                "SOUPKIT_KERNELS=cython but the compiled extension is not built; "
                "reinstall the package with a C compiler available"
            )
        _compiled = None
elif _choice != "numpy":
    raise ValueError(
        "unrecognized SOUPKIT_KERNELS value %r (expected auto, numpy, or cython)"
        % _choice
    )

BACKEND = "numpy" if _compiled is None else "cython"


def backend_name():
    """Name of the active backend, either "cython" or "numpy"."""
    return BACKEND


def _as_pair(x, w):
    if x.dtype not in _SUPPORTED:
        raise TypeError("conv kernels support float32/float64, got %s" % x.dtype)
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w, dtype=x.dtype)
    return x, w


def conv2d_forward(x, w, stride=1, pad=0):
    x, w = _as_pair(x, w)
    if _compiled is not None:
        return _compiled.conv2d_forward(x, w, stride, pad)
    return numpy_backend.conv2d_forward(x, w, stride, pad)


def conv2d_backward_input(gout, w, stride, pad, h, wd):
    gout, w = _as_pair(gout, w)
    if _compiled is not None:
        return _compiled.conv2d_backward_input(gout, w, stride, pad, h, wd)
    return numpy_backend.conv2d_backward_input(gout, w, stride, pad, h, wd)


def conv2d_backward_weight(gout, x, stride, pad, kh, kw):
    gout, x = _as_pair(gout, x)
    if _compiled is not None:
        return _compiled.conv2d_backward_weight(gout, x, stride, pad, kh, kw)
    return numpy_backend.conv2d_backward_weight(gout, x, stride, pad, kh, kw)
