"""Pick the voting kernel implementation at import time.

The compiled extension is preferred. Set ``SPARSEVOTE_BACKEND=numpy`` to force
the pure numpy kernels, or call :func:`set_backend` at runtime.
"""

import logging
import os

from . import _vote_py

logger = logging.getLogger(__name__)

try:
    from . import _vote_cy
except ImportError:  # extension not built
    _vote_cy = None

_KERNELS = {"numpy": _vote_py}
if _vote_cy is not None:
    _KERNELS["cython"] = _vote_cy

_active = None


def available_backends():
    return sorted(_KERNELS)


def set_backend(name):
    """Select ``"cython"`` or ``"numpy"`` kernels for all later calls."""
    global _active
    if name not in _KERNELS:
        raise ValueError(f"backend {name!r} unavailable; have {available_backends()}")
    _active = name


def get_backend():
    return _active


def kernels():
    return _KERNELS[_active]


_requested = os.environ.get("SPARSEVOTE_BACKEND", "").strip().lower()
if _requested:
    set_backend(_requested)
else:
    set_backend("cython" if "cython" in _KERNELS else "numpy")
    if _active == "numpy":
        logger.info("compiled voting kernels not built; using numpy fallback")
