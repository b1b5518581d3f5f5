"""Select the compiled kernels when available, else the numpy fallback.

Set ``OAFKIT_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("OAFKIT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"


def lstm_forward(xproj, wh, reverse=False):
    return _impl.lstm_forward(np.ascontiguousarray(xproj), np.ascontiguousarray(wh), bool(reverse))


def lstm_backward(dh, h, c, gates, wh, reverse=False):
    return _impl.lstm_backward(
        np.ascontiguousarray(dh, dtype=h.dtype),
        np.ascontiguousarray(h),
        np.ascontiguousarray(c),
        np.ascontiguousarray(gates),
        np.ascontiguousarray(wh),
        bool(reverse),
    )


def levenshtein(a, b):
    """Edit distance between two integer-coded sequences."""
    return int(_impl.levenshtein(np.ascontiguousarray(a, dtype=np.int64), np.ascontiguousarray(b, dtype=np.int64)))


def im2col(xp, kh, kw, sh, sw, dh, dw, ho, wo):
    return _impl.im2col(np.ascontiguousarray(xp), kh, kw, sh, sw, dh, dw, ho, wo)


def col2im(cols, n, c, hp, wp, kh, kw, sh, sw, dh, dw, ho, wo):
    return _impl.col2im(np.ascontiguousarray(cols), n, c, hp, wp, kh, kw, sh, sw, dh, dw, ho, wo)
