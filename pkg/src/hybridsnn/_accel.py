"""Optional numba acceleration.

Set ``HYBRIDSNN_DISABLE_NUMBA=1`` to force the pure-numpy code paths, or run
without numba installed. Kernels that have both paths are selected once at
import time through :data:`USE_NUMBA`.
"""
import os
import warnings

_DISABLED = os.environ.get("HYBRIDSNN_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")

try:
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kw):
        if len(args) == 1 and callable(args[0]) and not kw:
            return args[0]
        return lambda f: f

    if not _DISABLED:
        warnings.warn("numba is not installed - falling back to numpy kernels")

USE_NUMBA = HAVE_NUMBA and not _DISABLED

__all__ = ["njit", "HAVE_NUMBA", "USE_NUMBA"]
