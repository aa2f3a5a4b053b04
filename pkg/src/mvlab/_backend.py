"""Selects the compiled kernels when available, numpy twins otherwise."""

import os

import numpy as np

from . import _fallback

_force_python = os.environ.get("MVLAB_PURE_PYTHON", "").strip() not in ("", "0")

try:
    if _force_python:
        raise ImportError("pure-Python backend requested")
    from . import _core
except ImportError:
    _core = None

BACKEND = "compiled" if _core is not None else "python"


def philox_raw(k0, k1, c0, c1, c2, c3):
    """Philox4x64-10 blocks for broadcast key/counter arrays -> (..., 4) uint64."""
    arrs = np.broadcast_arrays(*(np.asarray(v, dtype=np.uint64) for v in (k0, k1, c0, c1, c2, c3)))
    shape = arrs[0].shape
    if _core is None:
        return _fallback.philox_raw(*arrs)
    flat = [np.ascontiguousarray(a.reshape(-1)) for a in arrs]
    return _core.philox_raw(*flat).reshape(shape + (4,))


def normals_grid(seeds, streams, step, domain, n):
    seeds = np.ascontiguousarray(np.atleast_1d(seeds), dtype=np.uint64)
    streams = np.ascontiguousarray(np.atleast_1d(streams), dtype=np.uint64)
    if _core is None:
        return _fallback.normals_grid(seeds, streams, step, domain, n)
    return _core.normals_grid(seeds, streams, int(step), int(domain), int(n))


def ordered_mean(a):
    """Mean over axis 1 of a (B, N, P) array, summed in index order."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    if _core is None:
        return _fallback.ordered_mean(a)
    return _core.ordered_mean(a)


def pairwise_average(spec, t, x, y):
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if _core is None or spec.model_code is None:
        return _fallback.pairwise_average(spec, t, x, y)
    params = np.ascontiguousarray(spec.kernel_params, dtype=np.float64)
    return _core.pairwise_average(spec.model_code, params, spec.d, spec.n, x, y)
