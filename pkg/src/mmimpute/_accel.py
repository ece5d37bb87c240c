"""Optional numba acceleration.

Set ``MMIMPUTE_PURE_NUMPY=1`` to force the pure-numpy kernels even when numba
is importable. Both paths are always importable from :mod:`mmimpute.kernels`
so they can be compared directly.
"""
import os

_DISABLED = os.environ.get("MMIMPUTE_PURE_NUMPY", "").strip().lower() in ("1", "true", "yes", "on")

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

HAVE_NUMBA = _numba is not None
USE_NUMBA = HAVE_NUMBA and not _DISABLED


def njit(*args, **kwargs):
    """``numba.njit`` with ``cache=True``; identity decorator without numba."""
    kwargs.setdefault("cache", True)
    if not HAVE_NUMBA:
        if args and callable(args[0]):
            return args[0]
        return lambda fn: fn
    return _numba.njit(*args, **kwargs)
