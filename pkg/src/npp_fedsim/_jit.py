"""Backend switch for the numeric kernels.

Set ``NPP_FEDSIM_PURE_NUMPY=1`` to force the vectorized numpy path even when
numba is importable. The flag is read once, at import time.
"""

import os

_FLAG = os.environ.get("NPP_FEDSIM_PURE_NUMPY", "").strip().lower()
FORCE_NUMPY = _FLAG in ("1", "true", "yes", "on")

try:
    from numba import njit as _numba_njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba_njit = None
    NUMBA_AVAILABLE = False

USE_NUMBA = NUMBA_AVAILABLE and not FORCE_NUMPY


def njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, otherwise an identity decorator.

    Compilation is requested regardless of ``FORCE_NUMPY`` so the benchmark and
    the cross-backend tests can always reach the compiled variant.
    """
    if _numba_njit is not None:
        return _numba_njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]):
        return args[0]
    return lambda func: func


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
