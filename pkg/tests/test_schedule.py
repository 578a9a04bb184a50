"""Schedule tests: closed forms against brute-force matrix products."""

import numpy as np
import pytest

from tokendiff.errors import ConfigError, UsageError
from tokendiff.schedule import (
    NoiseSchedule,
    Prior,
    ScheduleConfig,
    marginal_distribution,
    prior,
    schedule_csv,
    transition_matrix,
)

from conftest import make_sched


def cumulative_product(s, t):
    """Oracle: explicit Q_t ... Q_1 product."""
    Q = np.eye(s.K + 1)
    for i in range(1, t + 1):
        Q = transition_matrix(s, i) @ Q
    return Q


def test_linear_terminal_values():
    s = make_sched(K=4, T=10)
    assert abs(s.alpha_bar[10] - 0.0001) < 1e-15
    assert abs(s.gamma_bar[10] - 0.9) < 1e-15
    assert abs(4 * s.beta_bar[10] - 0.0999) < 1e-15


def test_boundary_identity():
    s = make_sched()
    assert s.alpha_bar[0] == 1.0
    assert s.gamma_bar[0] == 0.0
    assert s.beta_bar[0] == 0.0


def test_single_step_chain():
    s = make_sched(K=3, T=1)
    assert abs(s.alpha_bar[1] - s.alpha[1]) < 1e-15
    Q = transition_matrix(s, 1)
    np.testing.assert_allclose(cumulative_product(s, 1), Q, atol=0)


def test_config_validation():
    with pytest.raises(ConfigError):
        ScheduleConfig(K=1, T=5).validate()
    with pytest.raises(ConfigError):
        ScheduleConfig(K=4, T=0).validate()
    with pytest.raises(ConfigError):
        ScheduleConfig(K=4, T=5, terminal_mask_mass=0.9, terminal_uniform_mass=0.2).validate()
    with pytest.raises(ConfigError):
        ScheduleConfig(K=4, T=20000).validate()


def test_columns_stochastic_and_mask_absorbing():
    rng = np.random.default_rng(5)
    for _ in range(5):
        K = int(rng.integers(2, 9))
        T = int(rng.integers(1, 11))
        mm = float(rng.uniform(0.3, 0.9))
        um = float(rng.uniform(0.01, 0.99 - mm))
        s = make_sched(K=K, T=T, mask_mass=mm, uniform_mass=um)
        for t in range(1, T + 1):
            Q = transition_matrix(s, t)
            assert (Q >= 0).all()
            np.testing.assert_allclose(Q.sum(axis=0), 1.0, atol=1e-12, rtol=0)
            e_mask = np.zeros(K + 1)
            e_mask[K] = 1.0
            np.testing.assert_array_equal(Q @ e_mask, e_mask)


def test_hand_built_transition_matrix():
    s = NoiseSchedule(
        K=2, T=1,
        alpha=np.array([1.0, 0.8]), beta=np.array([0.0, 0.05]), gamma=np.array([0.0, 0.1]),
        alpha_bar=np.array([1.0, 0.8]), beta_bar=np.array([0.0, 0.05]),
        gamma_bar=np.array([0.0, 0.1]),
    )
    expected = np.array([[0.85, 0.05, 0.0], [0.05, 0.85, 0.0], [0.1, 0.1, 1.0]])
    np.testing.assert_allclose(transition_matrix(s, 1), expected, atol=1e-15)


def test_marginal_matches_matrix_product_grid():
    for K in (2, 4, 8):
        for T in (1, 4, 10):
            s = make_sched(K=K, T=T)
            for t in range(0, T + 1):
                Qbar = cumulative_product(s, t)
                for x0 in range(K):
                    v = np.zeros(K + 1)
                    v[x0] = 1.0
                    closed = marginal_distribution(s, x0, t)
                    np.testing.assert_allclose(closed, Qbar @ v, atol=1e-10, rtol=0)


def test_marginal_t0_one_hot_and_terminal_mass():
    s = make_sched(K=4, T=10)
    m0 = marginal_distribution(s, 2, 0)
    np.testing.assert_array_equal(m0, np.eye(5)[2])
    mT = marginal_distribution(s, 2, 10)
    assert abs(mT[4] - 0.9) < 1e-12
    np.testing.assert_allclose(mT[[0, 1, 3]], s.beta_bar[10], atol=1e-15)


def test_marginal_rejects_mask_x0():
    s = make_sched()
    with pytest.raises(UsageError):
        marginal_distribution(s, s.K, 3)


def test_monotone_corruption():
    s = make_sched(K=5, T=10)
    keep = [marginal_distribution(s, 1, t)[1] for t in range(0, s.T + 1)]
    assert all(a >= b - 1e-15 for a, b in zip(keep, keep[1:]))


def test_prior_residual_and_renormalization():
    s = make_sched(K=4, T=10)
    p = prior(s)
    assert isinstance(p, Prior)
    assert abs(p.residual - 0.0001) < 1e-15
    raw_sum = 4 * s.beta_bar[10] + s.gamma_bar[10]
    assert abs(raw_sum - (1.0 - p.residual)) < 1e-15
    assert abs(p.probs.sum() - 1.0) < 1e-12
    # all real-token entries equal by symmetry
    assert np.ptp(p.probs[:4]) == 0.0


def test_transition_step_range():
    s = make_sched(T=3)
    with pytest.raises(UsageError):
        transition_matrix(s, 0)
    with pytest.raises(UsageError):
        transition_matrix(s, 4)


def test_schedule_csv_roundtrip():
    s = make_sched(K=3, T=4)
    text = schedule_csv(s)
    lines = text.strip().split("\n")
    assert lines[0] == "t,alpha,beta,gamma,alpha_bar,beta_bar,gamma_bar"
    assert len(lines) == 6
    row2 = [float(x) for x in lines[2].split(",")]
    assert row2[0] == 1.0
    assert abs(row2[4] - s.alpha_bar[1]) == 0.0
