"""Pure numpy versions of the kernels in ``_core.pyx``.

Same inputs, same accumulation order, same output layout.  Used when the
extension is not built or when ``MVLAB_PURE_PYTHON=1``.
"""

import numpy as np
from scipy.special import ndtri

_M0 = np.uint64(0xD2E7470EE14C6C93)
_M1 = np.uint64(0xCA5A826395121157)
_W0 = np.uint64(0x9E3779B97F4A7C15)
_W1 = np.uint64(0xBB67AE8584CAA73B)
_LO32 = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)


def _mulhilo(a, b):
    """64x64 -> 128 bit product of uint64 arrays, returned as (hi, lo)."""
    a_lo, a_hi = a & _LO32, a >> _S32
    b_lo, b_hi = b & _LO32, b >> _S32
    ll = a_lo * b_lo
    lh = a_lo * b_hi
    hl = a_hi * b_lo
    hh = a_hi * b_hi
    mid = (ll >> _S32) + (lh & _LO32) + (hl & _LO32)
    hi = hh + (lh >> _S32) + (hl >> _S32) + (mid >> _S32)
    lo = a * b
    return hi, lo


def _philox(k0, k1, c0, c1, c2, c3):
    k0 = np.array(k0, dtype=np.uint64)
    k1 = np.array(k1, dtype=np.uint64)
    c0, c1, c2, c3 = (np.array(c, dtype=np.uint64) for c in (c0, c1, c2, c3))
    with np.errstate(over="ignore"):
        for r in range(10):
            if r > 0:
                k0 = k0 + _W0
                k1 = k1 + _W1
            hi0, lo0 = _mulhilo(_M0, c0)
            hi1, lo1 = _mulhilo(_M1, c2)
            c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return c0, c1, c2, c3


def philox_raw(k0, k1, c0, c1, c2, c3):
    return np.stack(_philox(k0, k1, c0, c1, c2, c3), axis=-1)


def _to_normal(raw):
    u = ((raw >> np.uint64(12)).astype(np.float64) + 0.5) * 2.0**-52
    return ndtri(u)


def normals_grid(seeds, streams, step, domain, n):
    seeds = np.asarray(seeds, dtype=np.uint64)
    streams = np.asarray(streams, dtype=np.uint64)
    R, S = seeds.shape[0], streams.shape[0]
    k0 = np.broadcast_to(seeds[:, None], (R, S))
    k1 = np.broadcast_to(streams[None, :], (R, S))
    out = np.empty((R, S, n), dtype=np.float64)
    for b in range((n + 3) // 4):
        words = _philox(k0, k1, np.uint64(step), np.uint64(b), np.uint64(domain), np.uint64(0))
        for j in range(4):
            if 4 * b + j < n:
                out[:, :, 4 * b + j] = _to_normal(words[j])
    return out


def ordered_mean(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    acc = np.zeros((a.shape[0], a.shape[2]))
    for m in range(a.shape[1]):
        acc += a[:, m, :]
    return acc / a.shape[1]


def pairwise_average(spec, t, x, y):
    """Ordered O(N*M) kernel average using the model's vectorised callables."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    B, N, _ = x.shape
    M = y.shape[1]
    drift = np.zeros((B, N, spec.d))
    diff = np.zeros((B, N, spec.d, spec.n))
    for m in range(M):
        ym = y[:, m : m + 1, :]
        drift += spec.drift_kernel(t, x, ym)
        diff += spec.diffusion_kernel(t, x, ym)
    return drift / M, diff / M
