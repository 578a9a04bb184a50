"""Forward corruption, reverse-step posteriors, and the generation chain.

Positions are corrupted independently through the schedule's marginals.
The reverse chain runs on the x0-parameterization: a model predicts the
clean-token distribution and the analytic posterior converts it into a
distribution over the previous step.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff, kernels
from .autodiff import Tensor
from .errors import DegeneratePairError, UsageError
from .schedule import NoiseSchedule, prior


@dataclass
class TokenSequence:
    """A length-D sequence of token indices tagged with its diffusion step.

    Clean data (t=0) contains only real tokens; the mask state K may
    appear only at t > 0.
    """

    tokens: np.ndarray
    t: int = 0

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 1:
            raise UsageError(f"TokenSequence expects a 1-D token array, got {self.tokens.shape}")

    def validate(self, K: int) -> None:
        if self.tokens.size and (self.tokens.min() < 0 or self.tokens.max() > K):
            raise UsageError(f"token outside [0, {K}]")
        if self.t == 0 and (self.tokens == K).any():
            raise UsageError("mask token present in a t=0 sequence")

    @property
    def D(self) -> int:
        return self.tokens.shape[0]


def _coef_rows(s: NoiseSchedule, t_rows: np.ndarray) -> tuple:
    """Per-row schedule coefficients (step t and cumulative t, t-1)."""
    tp = t_rows - 1
    return (
        s.alpha[t_rows], s.beta[t_rows], s.gamma[t_rows],
        s.alpha_bar[t_rows], s.beta_bar[t_rows], s.gamma_bar[t_rows],
        s.alpha_bar[tp], s.beta_bar[tp], s.gamma_bar[tp],
    )


def forward_sample_tokens(
    s: NoiseSchedule, tokens: np.ndarray, t, rng: np.random.Generator
) -> np.ndarray:
    """Corrupt a (B, D) batch of clean sequences to step t.

    t may be a scalar or a (B,) vector; each position is sampled
    independently from the closed-form marginal. Deterministic given the
    generator state.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    B, D = tokens.shape
    t_arr = np.broadcast_to(np.asarray(t, dtype=np.int64), (B,))
    if t_arr.size and (t_arr.min() < 0 or t_arr.max() > s.T):
        raise UsageError(f"step outside [0, {s.T}]")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= s.K):
        raise UsageError("forward corruption expects clean real tokens")

    out = tokens.copy()
    hot = t_arr > 0
    if not hot.any():
        return out
    idx = np.where(hot)[0]
    flat_x0 = tokens[idx].reshape(-1)
    flat_t = np.repeat(t_arr[idx], D)
    probs = kernels.marginal_rows(
        flat_x0, s.alpha_bar[flat_t], s.beta_bar[flat_t], s.gamma_bar[flat_t], s.K
    )
    u = rng.random(flat_x0.shape[0])
    out[idx] = kernels.sample_categorical_rows(probs, u).reshape(idx.shape[0], D)
    return out


def forward_sample(s: NoiseSchedule, seq0: TokenSequence, t: int, rng) -> TokenSequence:
    """Corrupt one clean sequence to step t (t=0 is a passthrough)."""
    if seq0.t != 0:
        raise UsageError("forward_sample starts from a t=0 sequence")
    seq0.validate(s.K)
    s.check_step(t, lo=0)
    corrupted = forward_sample_tokens(s, seq0.tokens[None, :], t, rng)[0]
    return TokenSequence(tokens=corrupted, t=t)


def posterior(s: NoiseSchedule, xt: int, x0: int, t: int) -> np.ndarray:
    """Exact reverse-step distribution q(x_{t-1} | x_t, x_0) over K+1 states."""
    s.check_step(t)
    if not (0 <= x0 < s.K):
        raise UsageError(f"x0={x0} must be a real token")
    if not (0 <= xt <= s.K):
        raise UsageError(f"xt={xt} outside [0, {s.K}]")
    denom = s.gamma_bar[t] if xt == s.K else s.beta_bar[t] + (s.alpha_bar[t] if xt == x0 else 0.0)
    if denom == 0.0:
        raise DegeneratePairError(f"q(x_t={xt} | x_0={x0}) = 0 at t={t}")
    xt_a = np.array([xt], dtype=np.int64)
    x0_a = np.array([x0], dtype=np.int64)
    t_a = np.array([t], dtype=np.int64)
    return kernels.posterior_rows(xt_a, x0_a, s.K, *_coef_rows(s, t_a))[0]


def posterior_rows_batch(
    s: NoiseSchedule, xt: np.ndarray, x0: np.ndarray, t_rows: np.ndarray
) -> np.ndarray:
    """Vectorized exact posterior rows for flat (n,) xt/x0/t arrays."""
    _check_not_degenerate(s, xt, x0, t_rows)
    return kernels.posterior_rows(xt, x0, s.K, *_coef_rows(s, t_rows))


def _check_not_degenerate(s, xt, x0, t_rows):
    denom = np.where(
        xt == s.K,
        s.gamma_bar[t_rows],
        s.beta_bar[t_rows] + np.where(xt == x0, s.alpha_bar[t_rows], 0.0),
    )
    if (denom == 0.0).any():
        raise DegeneratePairError("observed (x_t, x_0) pair has zero forward probability")


def _expand_t(t, xt: np.ndarray) -> np.ndarray:
    """Per-flat-row step indices for scalar, per-row, or per-sequence t."""
    t_arr = np.asarray(t, dtype=np.int64)
    n = xt.size
    if t_arr.ndim == 0:
        return np.full(n, int(t_arr), dtype=np.int64)
    if t_arr.shape == (n,):
        return t_arr
    if xt.ndim >= 2 and t_arr.shape == xt.shape[:-1]:
        return np.repeat(t_arr.reshape(-1), xt.shape[-1])
    raise UsageError(f"t of shape {t_arr.shape} does not match tokens of shape {xt.shape}")


def posterior_from_x0_prediction(
    s: NoiseSchedule, xt: np.ndarray, x0_dist: np.ndarray, t
) -> np.ndarray:
    """Reverse-step distribution marginalized over predicted clean tokens.

    xt: (..., D) or flat (n,) tokens; x0_dist: matching rows over the K
    real tokens. Plain numpy path (no gradients); see posterior_mix_op
    for the differentiable version.
    """
    xt = np.asarray(xt, dtype=np.int64)
    flat_xt = xt.reshape(-1)
    rows = np.asarray(x0_dist, dtype=np.float64).reshape(flat_xt.shape[0], -1)
    if rows.shape[1] != s.K:
        raise UsageError(f"x0 distribution must have {s.K} columns, got {rows.shape[1]}")
    t_rows = _expand_t(t, xt)
    _check_mix_feasible(s, flat_xt, t_rows)
    out = kernels.posterior_mix_rows(flat_xt, rows, *_coef_rows(s, t_rows))
    return out.reshape(xt.shape + (s.K + 1,))


def _check_mix_feasible(s, flat_xt, t_rows):
    if (t_rows < 1).any() or (t_rows > s.T).any():
        raise UsageError(f"step outside [1, {s.T}]")
    mask_rows = flat_xt == s.K
    if (s.gamma_bar[t_rows[mask_rows]] == 0.0).any():
        raise DegeneratePairError("mask observed although the schedule gives it zero mass")
    if (s.beta_bar[t_rows[~mask_rows]] == 0.0).any():
        # without a uniform leak the mixture would divide by zero for
        # predicted tokens other than x_t itself
        raise DegeneratePairError("schedule has no uniform leak at some requested step")


def posterior_mix_op(s: NoiseSchedule, xt: np.ndarray, t, x0_dist: Tensor) -> Tensor:
    """Differentiable posterior mixture: gradient flows into x0_dist.

    Forward matches posterior_from_x0_prediction; the backward pass uses
    the closed-form Jacobian of the mixture, so no (K+1)xK matrices are
    materialized.
    """
    xt = np.asarray(xt, dtype=np.int64)
    flat_xt = xt.reshape(-1)
    n = flat_xt.shape[0]
    K = s.K
    rows = x0_dist.data.reshape(n, K)
    t_rows = _expand_t(t, xt)
    _check_mix_feasible(s, flat_xt, t_rows)
    a_t, b_t, g_t, ab_t, bb_t, gb_t, ab_p, bb_p, gb_p = _coef_rows(s, t_rows)
    out_rows = kernels.posterior_mix_rows(
        flat_xt, rows, a_t, b_t, g_t, ab_t, bb_t, gb_t, ab_p, bb_p, gb_p
    )
    out = Tensor(out_rows.reshape(xt.shape + (K + 1,)))

    is_mask = flat_xt == K
    has_mask = bool(is_mask.any())
    has_real = not bool(is_mask.all())

    def bw(g):
        gr = g.reshape(n, K + 1)
        adj = np.zeros((n, K), dtype=np.float64)
        if has_mask:
            i = np.where(is_mask)[0]
            coef = g_t[i] / gb_t[i]
            greal = gr[i, :K]
            adj[i] = coef[:, None] * (
                ab_p[i][:, None] * greal + (bb_p[i] * greal.sum(axis=1))[:, None]
            )
            adj[i] += ((gb_p[i] / gb_t[i]) * gr[i, K])[:, None]
        if has_real:
            j = np.where(~is_mask)[0]
            jr = np.arange(j.shape[0])
            xtr = flat_xt[j]
            A = np.repeat(b_t[j][:, None], K, axis=1)
            A[jr, xtr] += a_t[j]
            denom = np.repeat(bb_t[j][:, None], K, axis=1)
            denom[jr, xtr] += ab_t[j]
            greal = gr[j, :K]
            gA = (greal * A).sum(axis=1)
            adj[j] = (ab_p[j][:, None] * A * greal + (bb_p[j] * gA)[:, None]) / denom
        return (adj.reshape(x0_dist.data.shape),)

    return autodiff.record(out, (x0_dist,), bw)


@dataclass
class GenerationStats:
    """Per-run reverse-chain diagnostics."""

    n_sequences: int = 0
    residual_mask_count: int = 0
    steps: list = field(default_factory=list)

    def add_step(self, t: int, mean_entropy: float, mask_fraction: float) -> None:
        self.steps.append(
            {"t": int(t), "mean_entropy": float(mean_entropy), "mask_fraction": float(mask_fraction)}
        )

    def jsonl(self) -> str:
        lines = [json.dumps(step, sort_keys=True) for step in self.steps]
        lines.append(
            json.dumps(
                {
                    "n_sequences": self.n_sequences,
                    "residual_mask_count": self.residual_mask_count,
                },
                sort_keys=True,
            )
        )
        return "\n".join(lines) + "\n"


def _row_entropy(rows: np.ndarray) -> float:
    p = np.maximum(rows, 1e-300)
    return float(-(rows * np.log(p)).sum(axis=-1).mean())


def generate(
    model_probs,
    s: NoiseSchedule,
    cond,
    D: int,
    rng: np.random.Generator,
    n: int = 1,
    chunk: int = 4096,
    collect_stats: bool = False,
) -> tuple[np.ndarray, GenerationStats]:
    """Run the reverse chain from the terminal prior down to clean tokens.

    model_probs(tokens (B, D), t, cond (B,)) must return (B, D, K) rows
    over real tokens. cond is a scalar or (n,) vector. Any residual mask
    at t=0 is replaced by the argmax of the final clean-token prediction
    and counted in the stats.
    """
    stats = GenerationStats(n_sequences=n)
    cond_arr = np.broadcast_to(np.asarray(cond, dtype=np.int64), (n,))
    p_terminal = prior(s).probs
    out = np.empty((n, D), dtype=np.int64)

    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        b = hi - lo
        probs0 = np.tile(p_terminal, (b * D, 1))
        xt = kernels.sample_categorical_rows(probs0, rng.random(b * D)).reshape(b, D)
        x0_rows = None
        for t in range(s.T, 0, -1):
            x0_rows = model_probs(xt, t, cond_arr[lo:hi])
            mix = posterior_from_x0_prediction(s, xt, x0_rows, t)
            flat = mix.reshape(b * D, s.K + 1)
            if collect_stats and lo == 0:
                stats.add_step(t, _row_entropy(flat), float((xt == s.K).mean()))
            xt = kernels.sample_categorical_rows(flat, rng.random(b * D)).reshape(b, D)
        residual = xt == s.K
        if residual.any():
            stats.residual_mask_count += int(residual.sum())
            repl = np.argmax(np.asarray(x0_rows), axis=-1)
            xt = np.where(residual, repl, xt)
        out[lo:hi] = xt
    return out, stats
