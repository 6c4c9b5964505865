"""Sparse 3D convolutional networks via feature-centric voting."""

from ._backend import available_backends, get_backend, set_backend

__all__ = ["available_backends", "get_backend", "set_backend"]
__version__ = "0.1.0"
