"""Numba switch for the hot kernels.

Set ``SFCORR_NUMBA=0`` to force the pure-numpy paths (useful for debugging
and for the kernel benchmark). Numba is also skipped when it cannot be
imported.
"""

import os

try:
    import numba as nb
except ImportError:  # pragma: no cover - numba is a declared dependency
    nb = None

NUMBA_AVAILABLE = nb is not None
NUMBA_ENABLED = NUMBA_AVAILABLE and os.environ.get("SFCORR_NUMBA", "1").lower() not in ("0", "false", "no")


def njit(fn):
    if nb is None:
        return fn
    return nb.njit(cache=True, nogil=True)(fn)


def dispatch(nb_impl, np_impl):
    """Pick the numba implementation when enabled, else the numpy one."""
    return nb_impl if NUMBA_ENABLED else np_impl
