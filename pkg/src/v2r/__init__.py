"""Serving kernel for video-to-retail pipelines."""

from .errors import V2RError

__version__ = "0.1.0"
__all__ = ["V2RError", "__version__"]
