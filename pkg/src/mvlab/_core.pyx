# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels.

Three loops dominate a run: counter-based Gaussian generation, the ordered
particle-axis reductions that feed the mean-field coefficients, and the
O(N*M) pairwise kernel averages.  Each has a numpy twin in ``_fallback``
with the same accumulation order.
"""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint64_t
from libc.math cimport sin, tanh
from scipy.special.cython_special cimport ndtri

cnp.import_array()

cdef extern from *:
    """
    #include <stdint.h>
    static inline uint64_t mvlab_mulhilo(uint64_t a, uint64_t b, uint64_t *hi) {
        __uint128_t p = (__uint128_t)a * (__uint128_t)b;
        *hi = (uint64_t)(p >> 64);
        return (uint64_t)p;
    }
    """
    uint64_t mvlab_mulhilo(uint64_t a, uint64_t b, uint64_t *hi) nogil

cdef uint64_t M0 = 0xD2E7470EE14C6C93ULL
cdef uint64_t M1 = 0xCA5A826395121157ULL
cdef uint64_t W0 = 0x9E3779B97F4A7C15ULL
cdef uint64_t W1 = 0xBB67AE8584CAA73BULL
cdef double TWO_M52 = 2.220446049250313e-16

cdef enum:
    LINEAR_ATTRACTION = 1
    SMOOTH_BOUNDED = 2
    CONSTANT_OU = 3
    KINETIC_LINEAR = 4


cdef inline void philox4x64_10(uint64_t k0, uint64_t k1, uint64_t* c) noexcept nogil:
    cdef uint64_t hi0, hi1, lo0, lo1
    cdef int r
    for r in range(10):
        if r > 0:
            k0 += W0
            k1 += W1
        lo0 = mvlab_mulhilo(M0, c[0], &hi0)
        lo1 = mvlab_mulhilo(M1, c[2], &hi1)
        c[0] = hi1 ^ c[1] ^ k0
        c[1] = lo1
        c[2] = hi0 ^ c[3] ^ k1
        c[3] = lo0


def philox_raw(const uint64_t[::1] k0, const uint64_t[::1] k1,
               const uint64_t[::1] c0, const uint64_t[::1] c1,
               const uint64_t[::1] c2, const uint64_t[::1] c3):
    cdef Py_ssize_t L = k0.shape[0], i
    out = np.empty((L, 4), dtype=np.uint64)
    cdef uint64_t[:, ::1] o = out
    cdef uint64_t c[4]
    with nogil:
        for i in range(L):
            c[0] = c0[i]; c[1] = c1[i]; c[2] = c2[i]; c[3] = c3[i]
            philox4x64_10(k0[i], k1[i], c)
            o[i, 0] = c[0]; o[i, 1] = c[1]; o[i, 2] = c[2]; o[i, 3] = c[3]
    return out


def normals_grid(const uint64_t[::1] seeds, const uint64_t[::1] streams,
                 uint64_t step, uint64_t domain, int n):
    cdef Py_ssize_t R = seeds.shape[0], S = streams.shape[0]
    cdef Py_ssize_t r, s, j
    cdef int nblocks = (n + 3) // 4
    cdef int b
    out = np.empty((R, S, n), dtype=np.float64)
    cdef double[:, :, ::1] o = out
    cdef uint64_t c[4]
    with nogil:
        for r in range(R):
            for s in range(S):
                for b in range(nblocks):
                    c[0] = step; c[1] = <uint64_t>b; c[2] = domain; c[3] = 0
                    philox4x64_10(seeds[r], streams[s], c)
                    for j in range(4):
                        if 4 * b + j < n:
                            o[r, s, 4 * b + j] = ndtri(
                                (<double>(c[j] >> 12) + 0.5) * TWO_M52)
    return out


def ordered_mean(const double[:, :, ::1] a):
    """Mean over axis 1, accumulated strictly in index order."""
    cdef Py_ssize_t B = a.shape[0], N = a.shape[1], P = a.shape[2]
    cdef Py_ssize_t b, m, p
    out = np.zeros((B, P), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for b in range(B):
            for m in range(N):
                for p in range(P):
                    o[b, p] += a[b, m, p]
            for p in range(P):
                o[b, p] = o[b, p] / N
    return out


def pairwise_average(int model, const double[::1] params, int d, int n,
                     const double[:, :, ::1] x, const double[:, :, ::1] y):
    """Average b(x_i, y_m) and sigma(x_i, y_m) over m for a catalog model.

    ``x`` is (B, N, q); ``y`` is (B, M, q) or (1, M, q) shared by every batch row.
    Returns drift (B, N, d) and diffusion (B, N, d, n).
    """
    cdef Py_ssize_t B = x.shape[0], N = x.shape[1], q = x.shape[2]
    cdef Py_ssize_t M = y.shape[1]
    cdef Py_ssize_t b, i, m, k, yb
    cdef int shared = y.shape[0] == 1
    cdef int diag = d if d < n else n
    cdef double acc, scal, sx, xk
    drift = np.zeros((B, N, d), dtype=np.float64)
    diff = np.zeros((B, N, d, n), dtype=np.float64)
    cdef double[:, :, ::1] dr = drift
    cdef double[:, :, :, ::1] df = diff
    ycache_arr = np.empty((M, q), dtype=np.float64)
    cdef double[:, ::1] yc = ycache_arr
    cdef double a0 = params[0] if params.shape[0] > 0 else 0.0
    cdef double a1 = params[1] if params.shape[0] > 1 else 0.0
    cdef double a2 = params[2] if params.shape[0] > 2 else 0.0
    cdef double a3 = params[3] if params.shape[0] > 3 else 0.0
    cdef double a4 = params[4] if params.shape[0] > 4 else 0.0

    with nogil:
        for b in range(B):
            yb = 0 if shared else b
            # per-support transcendental values, reused across i
            for m in range(M):
                if model == LINEAR_ATTRACTION or model == KINETIC_LINEAR:
                    yc[m, 0] = sin(y[yb, m, 0])
                elif model == SMOOTH_BOUNDED:
                    for k in range(d):
                        yc[m, k] = tanh(y[yb, m, k])
            for i in range(N):
                if model == LINEAR_ATTRACTION:
                    # params: a, c, s, eps
                    for k in range(d):
                        xk = x[b, i, k]
                        acc = 0.0
                        for m in range(M):
                            acc += -a0 * xk + a1 * (y[yb, m, k] - xk)
                        dr[b, i, k] = acc / M
                    sx = sin(x[b, i, 0])
                    scal = 0.0
                    for m in range(M):
                        scal += a2 * (1.0 + a3 * sx * yc[m, 0])
                    scal = scal / M
                    for k in range(diag):
                        df[b, i, k, k] = scal
                elif model == SMOOTH_BOUNDED:
                    # params: A, B, s
                    for k in range(d):
                        xk = tanh(x[b, i, k])
                        acc = 0.0
                        for m in range(M):
                            acc += a0 * xk + a1 * yc[m, k]
                        dr[b, i, k] = acc / M
                    for k in range(diag):
                        df[b, i, k, k] = a2
                elif model == CONSTANT_OU:
                    # params: s
                    for k in range(d):
                        xk = x[b, i, k]
                        acc = 0.0
                        for m in range(M):
                            acc += -xk
                        dr[b, i, k] = acc / M
                    for k in range(diag):
                        df[b, i, k, k] = a0
                elif model == KINETIC_LINEAR:
                    # params: a, g, c, s, eps; state = (position[d], velocity[d])
                    for k in range(d):
                        xk = x[b, i, k]
                        acc = 0.0
                        for m in range(M):
                            acc += -a0 * xk - a1 * x[b, i, d + k] + a2 * (y[yb, m, k] - xk)
                        dr[b, i, k] = acc / M
                    sx = sin(x[b, i, 0])
                    scal = 0.0
                    for m in range(M):
                        scal += a3 * (1.0 + a4 * sx * yc[m, 0])
                    scal = scal / M
                    for k in range(diag):
                        df[b, i, k, k] = scal
    return drift, diff
