"""Hot-kernel dispatch.

The compiled extension ``ssdpose._kernels`` is used when it was built;
otherwise (or when ``SSDPOSE_PURE_PYTHON=1``) the NumPy versions in
``ssdpose._fallback`` are used. Both expose the same functions.
"""

import os

from . import _fallback

if os.environ.get("SSDPOSE_PURE_PYTHON", "") not in ("", "0"):
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback
        BACKEND = "python"

_NAMES = ("im2col", "col2im", "maxpool2_forward", "maxpool2_backward", "nms", "polygon_coverage")


def _bind(impl):
    g = globals()
    for name in _NAMES:
        g[name] = getattr(impl, name)


def set_backend(name: str) -> str:
    """Switch to ``"cython"`` or ``"python"`` at runtime; returns the previous
    backend. Used by the benchmark and the equivalence tests."""
    global BACKEND
    if name == "cython":
        from . import _kernels as impl  # ImportError if the extension was not built
    elif name == "python":
        impl = _fallback
    else:
        raise ValueError(f"unknown backend {name!r}")
    prev, BACKEND = BACKEND, name
    _bind(impl)
    return prev


_bind(_impl)

__all__ = [
    "BACKEND",
    "set_backend",
    "im2col",
    "col2im",
    "maxpool2_forward",
    "maxpool2_backward",
    "nms",
    "polygon_coverage",
]
