"""Numba switch.

Hot kernels are written twice: an ``@njit`` loop version and a vectorised
numpy version.  ``HFLAB_DISABLE_NUMBA=1`` (or numba being absent) selects the
numpy path at import time; ``use_numba()`` lets tests and the benchmark flip
the choice at runtime.
"""

import os

try:
    import numba

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    NUMBA_AVAILABLE = False

_enabled = NUMBA_AVAILABLE and os.environ.get("HFLAB_DISABLE_NUMBA", "0") not in ("1", "true", "yes")


def njit(fn):
    """Compile ``fn`` in nopython mode with on-disk caching, or return it untouched."""
    if not NUMBA_AVAILABLE:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


def numba_enabled() -> bool:
    return _enabled


def use_numba(flag: bool) -> bool:
    """Enable/disable the numba path; returns the previous setting."""
    global _enabled
    prev = _enabled
    _enabled = bool(flag) and NUMBA_AVAILABLE
    return prev
