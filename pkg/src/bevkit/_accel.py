"""Numba switch.

Set ``BEVKIT_NO_NUMBA=1`` to run every kernel on its pure-numpy path. Kernels
that have no separate vectorized variant fall back to the plain Python
function, which is slow but gives the same result.
"""

import os

_DISABLED = os.environ.get("BEVKIT_NO_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = numba is not None and not _DISABLED


def njit(*args, **kwargs):
    """``numba.njit`` with caching and nogil on by default; identity when disabled."""
    kwargs.setdefault("cache", True)
    kwargs.setdefault("nogil", True)

    if not USE_NUMBA:
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda fn: fn

    if len(args) == 1 and callable(args[0]):
        return numba.njit(**kwargs)(args[0])
    return numba.njit(*args, **kwargs)


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
