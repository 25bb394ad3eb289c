"""Backend selection for the block-sparse kernels.

numba is used when importable unless ``NABLA_NO_JIT=1`` is set, in which case
the vectorised numpy kernels run instead. ``NABLA_THREADS`` caps numba's
worker pool.
"""

import os

from . import _numpy

_TRUTHY = {"1", "true", "yes", "on"}

try:
    if os.environ.get("NABLA_NO_JIT", "").strip().lower() in _TRUTHY:
        raise ImportError("JIT disabled by NABLA_NO_JIT")
    import numba

    if "NUMBA_THREADING_LAYER_PRIORITY" not in os.environ:
        # skip the outdated system TBB probe when OpenMP is available
        numba.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]
    from . import _numba
except ImportError:
    numba = None
    _numba = None

BACKENDS = {"numpy": _numpy}
if _numba is not None:
    BACKENDS["numba"] = _numba

DEFAULT_BACKEND = "numba" if _numba is not None else "numpy"


def get_backend(name=None):
    name = name or DEFAULT_BACKEND
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"backend {name!r} unavailable; have {sorted(BACKENDS)}") from None


def set_threads(n=None):
    """Apply ``n`` (or ``NABLA_THREADS``) to numba's thread pool; returns the count used."""
    if numba is None:
        return 1
    if n is None:
        env = os.environ.get("NABLA_THREADS")
        if not env:
            return numba.get_num_threads()
        n = int(env)
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n
