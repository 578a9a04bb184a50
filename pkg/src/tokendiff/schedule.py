"""Mask-and-replace corruption schedule over K real tokens plus one mask state.

At every step a token keeps its value with probability alpha_t, is
replaced uniformly among the K real tokens with total probability
K*beta_t, or falls into the absorbing mask state with probability
gamma_t. Cumulative trajectories are linear in t, which keeps the
per-step recovery closed-form and strictly valid.

Convention: real tokens occupy indices 0..K-1 and the mask state is
index K, everywhere in this package.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, UsageError

MAX_STEPS = 10_000


@dataclass(frozen=True)
class ScheduleConfig:
    """Codebook size, step count, and the two terminal corruption masses."""

    K: int
    T: int
    terminal_mask_mass: float = 0.9
    terminal_uniform_mass: float = 0.0999

    def validate(self) -> None:
        if self.K < 2:
            raise ConfigError(f"codebook size K must be >= 2, got {self.K}")
        if self.T < 1:
            raise ConfigError(f"step count T must be >= 1, got {self.T}")
        if self.T > MAX_STEPS:
            raise ConfigError(f"step count T={self.T} exceeds the {MAX_STEPS} guard")
        if not (0.0 < self.terminal_mask_mass < 1.0):
            raise ConfigError(f"terminal_mask_mass must be in (0,1), got {self.terminal_mask_mass}")
        if not (0.0 < self.terminal_uniform_mass < 1.0):
            raise ConfigError(
                f"terminal_uniform_mass must be in (0,1), got {self.terminal_uniform_mass}"
            )
        if self.terminal_mask_mass + self.terminal_uniform_mass >= 1.0:
            raise ConfigError(
                "terminal_mask_mass + terminal_uniform_mass must stay below 1 "
                f"(got {self.terminal_mask_mass + self.terminal_uniform_mass}); "
                "otherwise the terminal keep-probability would hit zero"
            )


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step and cumulative coefficients, indexable directly by t.

    All arrays have length T+1; index 0 holds the identity boundary
    (alpha=1, alpha_bar=1, gamma_bar=0, beta_bar=0) so that t can be used
    as a direct index for t = 0..T.
    """

    K: int
    T: int
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    alpha_bar: np.ndarray
    beta_bar: np.ndarray
    gamma_bar: np.ndarray

    @property
    def mask_token(self) -> int:
        return self.K

    @property
    def n_states(self) -> int:
        return self.K + 1

    def check_step(self, t: int, lo: int = 1) -> None:
        if not (lo <= t <= self.T):
            raise UsageError(f"step t={t} outside [{lo}, {self.T}]")


class Prior(NamedTuple):
    """Terminal distribution: renormalized vector plus the raw residual."""

    probs: np.ndarray
    residual: float


def build_schedule(cfg: ScheduleConfig) -> NoiseSchedule:
    """Construct the schedule with linear cumulative trajectories.

    With u = t/T: alpha_bar = 1 - u*(mask_mass + uniform_mass),
    gamma_bar = u*mask_mass, K*beta_bar = u*uniform_mass. Per-step values
    are recovered as ratios of consecutive cumulative values.
    """
    cfg.validate()
    K, T = cfg.K, cfg.T
    u = np.arange(T + 1, dtype=np.float64) / T
    alpha_bar = 1.0 - u * (cfg.terminal_mask_mass + cfg.terminal_uniform_mass)
    gamma_bar = u * cfg.terminal_mask_mass
    beta_bar = u * cfg.terminal_uniform_mass / K

    if alpha_bar[T] <= 0.0:
        raise ConfigError("schedule leaves no terminal keep-probability (alpha_bar_T <= 0)")

    alpha = np.ones(T + 1)
    gamma = np.zeros(T + 1)
    beta = np.zeros(T + 1)
    alpha[1:] = alpha_bar[1:] / alpha_bar[:-1]
    gamma[1:] = 1.0 - (1.0 - gamma_bar[1:]) / (1.0 - gamma_bar[:-1])
    beta[1:] = (1.0 - alpha[1:] - gamma[1:]) / K

    for name, arr in (("alpha", alpha[1:]), ("beta", beta[1:]), ("gamma", gamma[1:])):
        if (arr < -1e-15).any() or (arr > 1.0 + 1e-15).any():
            raise ConfigError(f"schedule coefficient {name} escapes [0,1]")
    np.clip(beta, 0.0, None, out=beta)

    sched = NoiseSchedule(
        K=K, T=T, alpha=alpha, beta=beta, gamma=gamma,
        alpha_bar=alpha_bar, beta_bar=beta_bar, gamma_bar=gamma_bar,
    )
    _check_invariants(sched)
    return sched


def _check_invariants(s: NoiseSchedule) -> None:
    t = np.arange(1, s.T + 1)
    total = s.alpha[t] + s.K * s.beta[t] + s.gamma[t]
    if np.abs(total - 1.0).max() > 1e-12:
        raise ConfigError("per-step masses do not sum to 1")
    if not (np.diff(s.alpha_bar) < 0).all():
        raise ConfigError("alpha_bar is not strictly decreasing")
    if (np.diff(s.gamma_bar) < -1e-15).any():
        raise ConfigError("gamma_bar is not non-decreasing")


def transition_matrix(s: NoiseSchedule, t: int) -> np.ndarray:
    """Single-step column-stochastic matrix: entry (m, n) = q(x_t=m | x_{t-1}=n).

    Real-token columns put alpha+beta on the diagonal, beta on other real
    tokens, and gamma on the mask row; the mask column is the unit vector
    on the mask state (the mask never transitions out).
    """
    s.check_step(t)
    K = s.K
    Q = np.full((K + 1, K + 1), s.beta[t])
    np.fill_diagonal(Q, s.alpha[t] + s.beta[t])
    Q[K, :] = s.gamma[t]
    Q[:, K] = 0.0
    Q[K, K] = 1.0
    return Q


def marginal_distribution(s: NoiseSchedule, x0: int, t: int) -> np.ndarray:
    """Closed-form q(x_t | x_0) over K+1 states for a real token x0."""
    if not (0 <= x0 < s.K):
        raise UsageError(f"x0={x0} is not a real token in [0, {s.K})")
    s.check_step(t, lo=0)
    out = np.full(s.K + 1, s.beta_bar[t])
    out[x0] += s.alpha_bar[t]
    out[s.K] = s.gamma_bar[t]
    return out


def prior(s: NoiseSchedule) -> Prior:
    """Terminal distribution [beta_bar_T, ..., beta_bar_T, gamma_bar_T].

    The raw vector sums to 1 - alpha_bar_T; it is returned renormalized,
    with the residual alpha_bar_T reported alongside.
    """
    raw = np.full(s.K + 1, s.beta_bar[s.T])
    raw[s.K] = s.gamma_bar[s.T]
    return Prior(probs=raw / raw.sum(), residual=float(s.alpha_bar[s.T]))


def schedule_csv(s: NoiseSchedule) -> str:
    """All six coefficient arrays as CSV for audit, one row per step t=0..T."""
    buf = io.StringIO()
    buf.write("t,alpha,beta,gamma,alpha_bar,beta_bar,gamma_bar\n")
    for t in range(s.T + 1):
        row = (s.alpha[t], s.beta[t], s.gamma[t], s.alpha_bar[t], s.beta_bar[t], s.gamma_bar[t])
        buf.write(f"{t}," + ",".join(repr(float(x)) for x in row) + "\n")
    return buf.getvalue()
