"""Variational-bound training objective with shuffled-negative contrast.

One uniformly sampled step per example gives an unbiased single-term
estimate of the bound: the t=1 term is the clean-token likelihood, the
t>1 terms are KLs between the analytic posterior and the model's
posterior mixture, and the parameter-free terminal KL is reported
separately. The contrastive objective subtracts the (lambda/N)-weighted
bounds of N position-shuffled copies of the clean sequence, each run
through the same step and the same corruption noise as the positive.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor
from .denoiser import Denoiser
from .diffusion import TokenSequence, posterior_mix_op, posterior_rows_batch
from .errors import UsageError
from .schedule import NoiseSchedule, prior

MAX_PERMUTATION_ATTEMPTS = 100


def kl_categorical(p: np.ndarray, q: np.ndarray) -> float:
    """Plain KL(p || q) with q clamped at 1e-12 and 0*log 0 := 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise UsageError(f"kl_categorical: shapes {p.shape} vs {q.shape}")
    if (p < 0).any() or (q < 0).any():
        raise UsageError("kl_categorical: negative entries")
    qc = np.maximum(q, 1e-12)
    pc = np.maximum(p, 1e-12)
    return float(np.where(p > 0, p * (np.log(pc) - np.log(qc)), 0.0).sum())


def terminal_kl(s: NoiseSchedule, tokens: np.ndarray) -> float:
    """Parameter-free L_T: sum_i KL(q(x_T | x0_i) || renormalized prior)."""
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    p_term = prior(s).probs
    total = 0.0
    coef_t = np.full(tokens.shape[0], s.T, dtype=np.int64)
    rows = kernels.marginal_rows(
        tokens, s.alpha_bar[coef_t], s.beta_bar[coef_t], s.gamma_bar[coef_t], s.K
    )
    for row in rows:
        total += kl_categorical(row, p_term)
    return total


@dataclass
class NegativeSet:
    """Position-shuffled copies of a clean sequence.

    The applied index permutations are recorded verbatim, which fully
    reproduces the set.
    """

    sequences: np.ndarray  # (N, D)
    permutations: np.ndarray  # (N, D)


def make_negatives(x0: np.ndarray, n_negatives: int, rng: np.random.Generator) -> NegativeSet:
    """Uniform position permutations of x0, resampling identity outcomes.

    After MAX_PERMUTATION_ATTEMPTS the identity is accepted with a
    warning (constant sequences admit nothing else). D = 1 sequences are
    degenerate: every "shuffle" equals x0.
    """
    x0 = np.asarray(x0, dtype=np.int64)
    D = x0.shape[0]
    if n_negatives < 1:
        raise UsageError("n_negatives must be >= 1")
    if D < 2:
        warnings.warn("D = 1 sequence: shuffled negatives all equal the positive")
        perms = np.zeros((n_negatives, 1), dtype=np.int64)
        return NegativeSet(sequences=np.tile(x0, (n_negatives, 1)), permutations=perms)
    if (x0 == x0[0]).all():
        # no non-identity shuffle exists; skip the rejection loop
        warnings.warn("constant sequence: shuffled negatives all equal the positive")
        perms = np.tile(np.arange(D, dtype=np.int64), (n_negatives, 1))
        return NegativeSet(sequences=np.tile(x0, (n_negatives, 1)), permutations=perms)

    perms = np.empty((n_negatives, D), dtype=np.int64)
    seqs = np.empty((n_negatives, D), dtype=np.int64)
    for j in range(n_negatives):
        for attempt in range(MAX_PERMUTATION_ATTEMPTS):
            perm = rng.permutation(D)
            cand = x0[perm]
            if not np.array_equal(cand, x0):
                break
        else:
            warnings.warn("no non-identity shuffle found (constant sequence); accepting identity")
        perms[j] = perm
        seqs[j] = cand
    return NegativeSet(sequences=seqs, permutations=perms)


def corrupt_with_uniforms(
    s: NoiseSchedule, tokens: np.ndarray, t, uniforms: np.ndarray
) -> np.ndarray:
    """Corrupt clean (B, D) tokens using caller-supplied uniform draws.

    Sharing one (D,) noise vector across a positive and its negatives
    isolates the sequence-identity contrast.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    B, D = tokens.shape
    t_arr = np.broadcast_to(np.asarray(t, dtype=np.int64), (B,))
    flat_t = np.repeat(t_arr, D)
    flat_x0 = tokens.reshape(-1)
    probs = kernels.marginal_rows(
        flat_x0, s.alpha_bar[flat_t], s.beta_bar[flat_t], s.gamma_bar[flat_t], s.K
    )
    u = np.broadcast_to(np.asarray(uniforms, dtype=np.float64), (B, D)).reshape(-1)
    return kernels.sample_categorical_rows(probs, u).reshape(B, D)


def bound_terms(
    model: Denoiser,
    s: NoiseSchedule,
    x0: np.ndarray,
    xt: np.ndarray,
    t,
    cond,
) -> Tensor:
    """Per-example single-step bound terms as a differentiable (B,) tensor.

    Each term is sum_i KL(q(x_{t-1} | x_t_i, x0_i) || model posterior_i);
    at t = 1 the analytic posterior is one-hot on x0, so the term reduces
    to the clean-token negative log-likelihood (the reconstruction term).
    """
    x0 = np.asarray(x0, dtype=np.int64)
    xt = np.asarray(xt, dtype=np.int64)
    B, D = x0.shape
    t_arr = np.broadcast_to(np.asarray(t, dtype=np.int64), (B,))
    probs = model.forward_probs(xt, t_arr, cond)
    mix = posterior_mix_op(s, xt, t_arr, probs)
    target = posterior_rows_batch(
        s, xt.reshape(-1), x0.reshape(-1), np.repeat(t_arr, D)
    ).reshape(B, D, s.K + 1)
    kl = ad.kl_div(Tensor(target), mix)  # (B, D)
    return ad.sum_axis(kl, 1)


@dataclass
class VbEstimate:
    """One stochastic bound term plus the analytic terminal KL.

    T * value is an unbiased estimate of the sum of per-step terms; add
    l_t for the full bound.
    """

    term: Tensor  # scalar
    value: float
    l_t: float
    t: int


def variational_bound(
    model: Denoiser,
    s: NoiseSchedule,
    x0: TokenSequence,
    cond: int,
    t: int,
    rng: np.random.Generator,
) -> VbEstimate:
    """Single-example stochastic bound term at a sampled step t."""
    s.check_step(t)
    x0.validate(s.K)
    u = rng.random(x0.D)
    xt = corrupt_with_uniforms(s, x0.tokens[None, :], t, u)
    terms = bound_terms(model, s, x0.tokens[None, :], xt, t, cond)
    term = ad.weighted_sum(terms, np.ones(1))
    return VbEstimate(
        term=term, value=term.item(), l_t=terminal_kl(s, x0.tokens), t=t
    )


@dataclass
class LossBreakdown:
    """Contrastive objective parts: total = positive - lambda * negative mean."""

    positive_vb: float
    negative_vb_mean: float
    total: float
    t: int
    l_t: float
    loss: Optional[Tensor] = None  # scalar tensor driving backward


def total_loss(
    model: Denoiser,
    s: NoiseSchedule,
    x0: np.ndarray,
    cond: int,
    lam: float,
    n_negatives: int,
    t: int,
    rng: np.random.Generator,
    clamp_negative_at: Optional[float] = None,
) -> LossBreakdown:
    """Contrastive objective for one example at one sampled step.

    The N negatives share the positive's step and corruption uniforms.
    clamp_negative_at (off by default) caps each negative term before
    weighting, guarding divergence when lambda is large.
    """
    if lam < 0:
        raise UsageError("contrastive weight lambda must be >= 0")
    x0 = np.asarray(x0, dtype=np.int64)
    negs = make_negatives(x0, n_negatives, rng)
    batch = np.concatenate([x0[None, :], negs.sequences], axis=0)
    u = rng.random(x0.shape[0])
    xt = corrupt_with_uniforms(s, batch, t, u)
    cond_arr = np.full(batch.shape[0], cond, dtype=np.int64)
    terms = bound_terms(model, s, batch, xt, t, cond_arr)

    w_pos = np.zeros(batch.shape[0])
    w_pos[0] = 1.0
    w_neg = np.full(batch.shape[0], -lam / n_negatives)
    w_neg[0] = 0.0
    if clamp_negative_at is None:
        loss = ad.weighted_sum(terms, w_pos + w_neg)
    else:
        loss = ad.add(
            ad.weighted_sum(terms, w_pos),
            ad.weighted_sum(ad.clamp_max(terms, clamp_negative_at), w_neg),
        )
    neg_vals = terms.data[1:]
    if clamp_negative_at is not None:
        neg_vals = np.minimum(neg_vals, clamp_negative_at)
    return LossBreakdown(
        positive_vb=float(terms.data[0]),
        negative_vb_mean=float(neg_vals.mean()),
        total=loss.item(),
        t=t,
        l_t=terminal_kl(s, x0),
        loss=loss,
    )


def exhaustive_bound(model: Denoiser, s: NoiseSchedule, x0: np.ndarray, cond: int) -> dict:
    """Test oracle: the exact bound by enumerating every (t, x_t).

    Sums E_{q(x_t | x0)}[term_t] over t = 1..T with the expectation taken
    exactly over all (K+1)^D corrupted states, plus the terminal KL.
    Exponential in D; use on desk-scale instances only.
    """
    x0 = np.asarray(x0, dtype=np.int64)
    D = x0.shape[0]
    n_states = s.K + 1
    if n_states**D > 100_000:
        raise UsageError("exhaustive bound enumeration too large")
    grids = np.meshgrid(*[np.arange(n_states, dtype=np.int64)] * D, indexing="ij")
    states = np.stack([g.reshape(-1) for g in grids], axis=1)  # (S, D)
    per_t = []
    total = 0.0
    for t in range(1, s.T + 1):
        t_flat = np.full(D, t, dtype=np.int64)
        rows = kernels.marginal_rows(
            x0, s.alpha_bar[t_flat], s.beta_bar[t_flat], s.gamma_bar[t_flat], s.K
        )  # (D, K+1)
        weights = np.ones(states.shape[0])
        for d in range(D):
            weights *= rows[d][states[:, d]]
        keep = weights > 0
        xt_states = states[keep]
        w = weights[keep]
        terms = bound_terms(
            model, s, np.tile(x0, (xt_states.shape[0], 1)), xt_states, t,
            np.full(xt_states.shape[0], cond, dtype=np.int64),
        )
        expected = float((terms.data * w).sum())
        per_t.append(expected)
        total += expected
    l_t = terminal_kl(s, x0)
    return {"per_t": per_t, "sum_terms": total, "l_t": l_t, "bound": total + l_t}
