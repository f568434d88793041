"""Numba switch.

Hot loops are written twice: an ``@njit`` kernel and a plain numpy twin.
Set ``LRC_DISABLE_NUMBA=1`` to force the numpy path (also used automatically
when numba is not importable).
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

_FLAG = os.environ.get("LRC_DISABLE_NUMBA", "").strip().lower()
USE_NUMBA = numba is not None and _FLAG not in ("1", "true", "yes", "on")


def njit(func):
    """Compile ``func`` with numba when available, otherwise return it as is."""
    if numba is None:  # pragma: no cover
        return func
    return numba.njit(cache=True, nogil=True)(func)
