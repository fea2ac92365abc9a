"""Numba switch.

Set ``MPRSENS_DISABLE_NUMBA=1`` to force the pure-numpy kernels.  The flag is
read once, at import time.
"""
import os

_FLAG = os.environ.get("MPRSENS_DISABLE_NUMBA", "").strip().lower()
DISABLED_BY_ENV = _FLAG not in ("", "0", "false", "no")

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not DISABLED_BY_ENV


def njit(func):
    """``numba.njit(cache=True)`` when numba is importable, else identity."""
    if not HAVE_NUMBA:
        return func
    return numba.njit(cache=True)(func)

