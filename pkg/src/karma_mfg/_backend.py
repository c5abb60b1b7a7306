"""Kernel backend selection.

Hot loops are written twice: a numba ``@njit`` version and a vectorized numpy
version.  ``KARMA_MFG_BACKEND=numpy`` forces the numpy path; the default is
numba whenever it imports.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

BACKEND = os.environ.get("KARMA_MFG_BACKEND", "numba").strip().lower()
if BACKEND not in ("numba", "numpy"):
    raise ValueError(f"KARMA_MFG_BACKEND must be 'numba' or 'numpy', got {BACKEND!r}")

HAVE_NUMBA = numba is not None
USE_NUMBA = BACKEND == "numba" and HAVE_NUMBA


def njit(*args, **kwargs):
    """``numba.njit(cache=True)`` or identity when numba is missing."""
    kwargs.setdefault("cache", True)
    if not HAVE_NUMBA:
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
    return numba.njit(*args, **kwargs)


def pick(numba_impl, numpy_impl):
    return numba_impl if USE_NUMBA else numpy_impl
