"""Thin wrapper around numba so every kernel is compiled the same way."""

import os

from numba import config, njit, prange  # noqa: F401

# the bundled TBB is too old for numba and only produces a warning; prefer OpenMP
if "NUMBA_THREADING_LAYER" not in os.environ:
    config.THREADING_LAYER = "omp"


def jit(fn=None, **kwargs):
    """``njit`` with on-disk caching; fastmath stays off so results are reproducible."""
    opts = {"cache": True, "nogil": True}
    opts.update(kwargs)
    if fn is None:
        return lambda f: njit(**opts)(f)
    return njit(**opts)(fn)
