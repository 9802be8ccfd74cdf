"""Single-shot object detection with discrete pose (azimuth-bin) estimation."""

from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
