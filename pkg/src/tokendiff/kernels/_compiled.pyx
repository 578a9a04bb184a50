# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled versions of the sampling-chain kernels.

Same contracts as kernels._reference; see that module for the math.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

NAME = "compiled"


def marginal_rows(x0, abar, bbar, gbar, K):
    cdef const cnp.int64_t[::1] x0v = np.ascontiguousarray(x0, dtype=np.int64)
    cdef const double[::1] av = np.ascontiguousarray(abar, dtype=np.float64)
    cdef const double[::1] bv = np.ascontiguousarray(bbar, dtype=np.float64)
    cdef const double[::1] gv = np.ascontiguousarray(gbar, dtype=np.float64)
    cdef Py_ssize_t n = x0v.shape[0]
    cdef Py_ssize_t Kc = K
    out = np.empty((n, Kc + 1), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t r, k
    for r in range(n):
        for k in range(Kc):
            o[r, k] = bv[r]
        o[r, x0v[r]] += av[r]
        o[r, Kc] = gv[r]
    return out


def sample_categorical_rows(probs, u):
    cdef const double[:, ::1] p = np.ascontiguousarray(probs, dtype=np.float64)
    cdef const double[::1] uv = np.ascontiguousarray(u, dtype=np.float64)
    cdef Py_ssize_t n = p.shape[0]
    cdef Py_ssize_t M = p.shape[1]
    out = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] o = out
    cdef Py_ssize_t r, k
    cdef double total, target, acc
    for r in range(n):
        total = 0.0
        for k in range(M):
            total += p[r, k]
        target = uv[r] * total
        acc = 0.0
        o[r] = M - 1
        for k in range(M):
            acc += p[r, k]
            # first k with cdf strictly above target, matching the reference
            if acc > target:
                o[r] = k
                break
    return out


def posterior_mix_rows(xt, x0p, a_t, b_t, g_t, ab_t, bb_t, gb_t, ab_p, bb_p, gb_p):
    cdef const cnp.int64_t[::1] xtv = np.ascontiguousarray(xt, dtype=np.int64)
    cdef const double[:, ::1] xp = np.ascontiguousarray(x0p, dtype=np.float64)
    cdef const double[::1] at = np.ascontiguousarray(a_t, dtype=np.float64)
    cdef const double[::1] bt = np.ascontiguousarray(b_t, dtype=np.float64)
    cdef const double[::1] gt = np.ascontiguousarray(g_t, dtype=np.float64)
    cdef const double[::1] abt = np.ascontiguousarray(ab_t, dtype=np.float64)
    cdef const double[::1] bbt = np.ascontiguousarray(bb_t, dtype=np.float64)
    cdef const double[::1] gbt = np.ascontiguousarray(gb_t, dtype=np.float64)
    cdef const double[::1] abp = np.ascontiguousarray(ab_p, dtype=np.float64)
    cdef const double[::1] bbp = np.ascontiguousarray(bb_p, dtype=np.float64)
    cdef const double[::1] gbp = np.ascontiguousarray(gb_p, dtype=np.float64)
    cdef Py_ssize_t n = xp.shape[0]
    cdef Py_ssize_t K = xp.shape[1]
    out = np.zeros((n, K + 1), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t r, k
    cdef double ssum, inv, coef, S, denom, A
    for r in range(n):
        if xtv[r] == K:
            ssum = 0.0
            for k in range(K):
                ssum += xp[r, k]
            inv = 1.0 / gbt[r]
            coef = gt[r] * inv
            for k in range(K):
                o[r, k] = coef * (abp[r] * xp[r, k] + bbp[r] * ssum)
            o[r, K] = gbp[r] * ssum * inv
        else:
            S = 0.0
            for k in range(K):
                denom = bbt[r]
                if k == xtv[r]:
                    denom += abt[r]
                S += xp[r, k] / denom
            for k in range(K):
                denom = bbt[r]
                A = bt[r]
                if k == xtv[r]:
                    denom += abt[r]
                    A += at[r]
                o[r, k] = A * (abp[r] * xp[r, k] / denom + bbp[r] * S)
            o[r, K] = 0.0
    return out


def posterior_rows(xt, x0, K, a_t, b_t, g_t, ab_t, bb_t, gb_t, ab_p, bb_p, gb_p):
    cdef const cnp.int64_t[::1] xtv = np.ascontiguousarray(xt, dtype=np.int64)
    cdef const cnp.int64_t[::1] x0v = np.ascontiguousarray(x0, dtype=np.int64)
    cdef const double[::1] at = np.ascontiguousarray(a_t, dtype=np.float64)
    cdef const double[::1] bt = np.ascontiguousarray(b_t, dtype=np.float64)
    cdef const double[::1] gt = np.ascontiguousarray(g_t, dtype=np.float64)
    cdef const double[::1] abt = np.ascontiguousarray(ab_t, dtype=np.float64)
    cdef const double[::1] bbt = np.ascontiguousarray(bb_t, dtype=np.float64)
    cdef const double[::1] gbt = np.ascontiguousarray(gb_t, dtype=np.float64)
    cdef const double[::1] abp = np.ascontiguousarray(ab_p, dtype=np.float64)
    cdef const double[::1] bbp = np.ascontiguousarray(bb_p, dtype=np.float64)
    cdef const double[::1] gbp = np.ascontiguousarray(gb_p, dtype=np.float64)
    cdef Py_ssize_t n = xtv.shape[0]
    cdef Py_ssize_t Kc = K
    out = np.zeros((n, Kc + 1), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t r, k
    cdef double denom, lik, pri
    for r in range(n):
        if xtv[r] == Kc:
            denom = gbt[r]
            for k in range(Kc):
                pri = bbp[r]
                if k == x0v[r]:
                    pri += abp[r]
                o[r, k] = gt[r] * pri / denom
            o[r, Kc] = gbp[r] / denom
        else:
            denom = bbt[r]
            if xtv[r] == x0v[r]:
                denom += abt[r]
            for k in range(Kc):
                lik = bt[r]
                if k == xtv[r]:
                    lik += at[r]
                pri = bbp[r]
                if k == x0v[r]:
                    pri += abp[r]
                o[r, k] = lik * pri / denom
            o[r, Kc] = 0.0
    return out


def chain_likelihood(xt, seq_table, row_probs):
    cdef const cnp.int64_t[:, ::1] xtv = np.ascontiguousarray(xt, dtype=np.int64)
    cdef const cnp.int64_t[:, ::1] seq = np.ascontiguousarray(seq_table, dtype=np.int64)
    cdef const double[:, ::1] rp = np.ascontiguousarray(row_probs, dtype=np.float64)
    cdef Py_ssize_t n = xtv.shape[0]
    cdef Py_ssize_t D = xtv.shape[1]
    cdef Py_ssize_t S = seq.shape[0]
    out = np.empty((n, S), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t r, s, d
    cdef double acc
    for r in range(n):
        for s in range(S):
            acc = 1.0
            for d in range(D):
                acc *= rp[xtv[r, d], seq[s, d]]
            o[r, s] = acc
    return out
