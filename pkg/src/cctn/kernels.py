"""Kernel backend selection.

The compiled Cython module is used when it is importable; otherwise the
numpy twin in ``_kernels_py`` is used.  Set ``CCTN_PURE_PYTHON=1`` to force
the fallback.  Both backends return bit-identical results.
"""
import os

from cctn import _kernels_py

try:
    from cctn import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

BACKENDS = {"python": _kernels_py}
if _compiled is not None:
    BACKENDS["cython"] = _compiled

if _compiled is not None and os.environ.get("CCTN_PURE_PYTHON", "") in ("", "0"):
    BACKEND = "cython"
else:
    BACKEND = "python"

_impl = BACKENDS[BACKEND]


def get_backend(name=None):
    """Return the kernel module for ``name`` (default: the active one)."""
    if name is None:
        return _impl
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} is not available; have {sorted(BACKENDS)}") from None


def set_backend(name):
    """Switch the process-wide backend; returns the previous name."""
    global _impl, BACKEND
    prev = BACKEND
    _impl = get_backend(name)
    BACKEND = name
    return prev


def im2col(xp, kh, kw, stride):
    return _impl.im2col(xp, kh, kw, stride)


def col2im(cols, c, h, w, kh, kw, stride):
    return _impl.col2im(cols, c, h, w, kh, kw, stride)


def maxpool2_forward(x):
    return _impl.maxpool2_forward(x)


def maxpool2_backward(grad, argmax, h, w):
    return _impl.maxpool2_backward(grad, argmax, h, w)


def label8(mask):
    return _impl.label8(mask)
