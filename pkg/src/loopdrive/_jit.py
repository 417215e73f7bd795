"""Numba shim.

Kernels are decorated with :func:`njit` from this module. Set
``LOOPDRIVE_DISABLE_NUMBA=1`` to run the pure-numpy fallbacks instead; the
flag is read once at import.
"""

from __future__ import annotations

import os

_flag = os.environ.get("LOOPDRIVE_DISABLE_NUMBA", "").strip().lower()
NUMBA_REQUESTED = _flag not in ("1", "true", "yes", "on")

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a hard dep, but stay importable
    _numba = None

USE_NUMBA = NUMBA_REQUESTED and _numba is not None
BACKEND = "numba" if USE_NUMBA else "numpy"


def njit(*args, **kwargs):
    """``numba.njit`` when numba is available, otherwise a no-op decorator."""
    if _numba is None:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def wrapper(f):
            return f

        return wrapper
    return _numba.njit(*args, **kwargs)
