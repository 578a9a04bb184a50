"""Pure-numpy reference implementations of the sampling-chain kernels.

These are the hot inner loops of forward corruption, reverse generation
and the enumeration oracle. The compiled backend in _compiled.pyx must
match these within floating-point associativity on the same inputs;
callers validate inputs (denominators, index ranges) before dispatching.

Coefficient arguments are per-row vectors so a batch may mix timesteps.
Naming: *_t are step-t values, *_p the step t-1 cumulative values
("previous").
"""

from __future__ import annotations

import numpy as np

NAME = "python"


def marginal_rows(x0, abar, bbar, gbar, K):
    """Rows of q(x_t | x_0): keep mass on x0, uniform leak, mask mass.

    x0: (n,) int64 real tokens; abar/bbar/gbar: (n,) cumulative
    coefficients at each row's t. Returns (n, K+1) float64.
    """
    n = x0.shape[0]
    out = np.empty((n, K + 1), dtype=np.float64)
    out[:, :K] = bbar[:, None]
    out[np.arange(n), x0] += abar
    out[:, K] = gbar
    return out


def sample_categorical_rows(probs, u):
    """Inverse-CDF sample one index per row of probs from uniforms u.

    Picks the first index whose cdf strictly exceeds u, so states with
    zero probability are never selected (even at u = 0).
    """
    cdf = np.cumsum(probs, axis=1)
    u_eff = u * cdf[:, -1]
    idx = (cdf <= u_eff[:, None]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1).astype(np.int64)


def posterior_mix_rows(xt, x0p, a_t, b_t, g_t, ab_t, bb_t, gb_t, ab_p, bb_p, gb_p):
    """Reverse-step distribution marginalized over a predicted x0.

    Per row: p(x_{t-1}=m) = sum_k q(x_{t-1}=m | x_t, x0=k) * x0p[k],
    evaluated in closed form (O(K) per row instead of a (K+1)xK matrix
    product). xt: (n,) observed tokens, x0p: (n, K) predicted real-token
    distribution. Returns (n, K+1).
    """
    n, K = x0p.shape
    out = np.zeros((n, K + 1), dtype=np.float64)
    is_mask = xt == K

    if is_mask.any():
        i = np.where(is_mask)[0]
        ssum = x0p[i].sum(axis=1)
        inv = 1.0 / gb_t[i]
        out[i, :K] = (g_t[i] * inv)[:, None] * (
            ab_p[i][:, None] * x0p[i] + (bb_p[i] * ssum)[:, None]
        )
        out[i, K] = gb_p[i] * ssum * inv

    if not is_mask.all():
        j = np.where(~is_mask)[0]
        xtr = xt[j]
        rows = np.arange(j.shape[0])
        denom = np.repeat(bb_t[j][:, None], K, axis=1)
        denom[rows, xtr] += ab_t[j]
        ratio = x0p[j] / denom
        S = ratio.sum(axis=1)
        A = np.repeat(b_t[j][:, None], K, axis=1)
        A[rows, xtr] += a_t[j]
        out[j, :K] = A * (ab_p[j][:, None] * ratio + (bb_p[j] * S)[:, None])
    return out


def posterior_rows(xt, x0, K, a_t, b_t, g_t, ab_t, bb_t, gb_t, ab_p, bb_p, gb_p):
    """Exact normalized q(x_{t-1} | x_t, x_0) rows for known real x0.

    xt, x0: (n,) tokens (x0 always real). Returns (n, K+1); each row is
    proportional to q(x_t | x_{t-1}) * q(x_{t-1} | x_0) and sums to 1.
    """
    n = xt.shape[0]
    out = np.zeros((n, K + 1), dtype=np.float64)
    is_mask = xt == K

    if is_mask.any():
        i = np.where(is_mask)[0]
        numer = np.repeat((g_t[i] * bb_p[i])[:, None], K + 1, axis=1)
        numer[np.arange(i.shape[0]), x0[i]] += g_t[i] * ab_p[i]
        numer[:, K] = gb_p[i]
        out[i] = numer / gb_t[i][:, None]

    if not is_mask.all():
        j = np.where(~is_mask)[0]
        nj = j.shape[0]
        jr = np.arange(nj)
        # q(x_t | x_{t-1}=m) for real m, times q(x_{t-1}=m | x0)
        lik = np.repeat(b_t[j][:, None], K, axis=1)
        lik[jr, xt[j]] += a_t[j]
        pri = np.repeat(bb_p[j][:, None], K, axis=1)
        pri[jr, x0[j]] += ab_p[j]
        numer = lik * pri
        denom = bb_t[j] + np.where(xt[j] == x0[j], ab_t[j], 0.0)
        out[j, :K] = numer / denom[:, None]
        out[j, K] = 0.0
    return out


def chain_likelihood(xt, seq_table, row_probs):
    """Per-sequence corruption likelihood: prod_d q(xt[:, d] | s[d]).

    xt: (n, D) observed tokens; seq_table: (S, D) candidate clean
    sequences; row_probs: (K+1, K) with row m giving q(x_t=m | x0=k) for
    each real k. Returns (n, S).
    """
    n, D = xt.shape
    S = seq_table.shape[0]
    out = np.ones((n, S), dtype=np.float64)
    for d in range(D):
        out *= row_probs[xt[:, d]][:, seq_table[:, d]]
    return out
