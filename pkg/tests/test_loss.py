"""Objective tests: KL oracle, negatives, contrast algebra, unbiasedness."""

import numpy as np
import pytest

from tokendiff.autodiff import Tape, Tensor
from tokendiff.denoiser import Denoiser, DenoiserConfig, LoraConfig, attach_lora
from tokendiff.diffusion import TokenSequence, posterior_rows_batch
from tokendiff.errors import UsageError
from tokendiff.loss import (
    bound_terms,
    corrupt_with_uniforms,
    exhaustive_bound,
    kl_categorical,
    make_negatives,
    terminal_kl,
    total_loss,
    variational_bound,
)
from tokendiff.schedule import marginal_distribution, prior

from conftest import make_sched


def small_model(K=4, T=4, D=2, C=2, seed=0):
    cfg = DenoiserConfig(
        K=K, T=T, D=D, n_conditions=C, d_model=16, n_layers=1, n_heads=2, d_cond=8
    )
    return Denoiser(cfg, np.random.default_rng(seed))


def naive_kl(p, q):
    total = 0.0
    for pi, qi in zip(p, q):
        if pi > 0:
            total += pi * (np.log(pi) - np.log(max(qi, 1e-12)))
    return total


def test_kl_categorical_values():
    assert kl_categorical([0.3, 0.7], [0.3, 0.7]) == 0.0
    assert abs(kl_categorical([1.0, 0.0], [0.5, 0.5]) - np.log(2)) < 1e-12
    rng = np.random.default_rng(2)
    for _ in range(20):
        p = rng.dirichlet(np.ones(6))
        q = rng.dirichlet(np.ones(6))
        assert abs(kl_categorical(p, q) - naive_kl(p, q)) < 1e-12
        assert kl_categorical(p, q) >= 0.0
    with pytest.raises(UsageError):
        kl_categorical([-0.1, 1.1], [0.5, 0.5])


def test_terminal_kl_is_model_free_constant():
    s = make_sched(K=4, T=10)
    tokens = np.array([0, 3, 1])
    expected = sum(
        naive_kl(marginal_distribution(s, int(x), s.T), prior(s).probs) for x in tokens
    )
    got = terminal_kl(s, tokens)
    assert abs(got - expected) < 1e-10
    assert got > 0.0


class CheatingOracle:
    """Returns one-hot rows on the true clean tokens (teacher posterior)."""

    def __init__(self, x0_batch, K):
        self.x0 = np.asarray(x0_batch)
        self.K = K

    def forward_probs(self, xt, t, cond):
        B, D = np.asarray(xt).shape
        rows = np.zeros((B, D, self.K))
        for b in range(B):
            for d in range(D):
                rows[b, d, self.x0[b, d]] = 1.0
        return Tensor(rows)


def test_bound_term_zero_for_teacher_posterior():
    s = make_sched(K=4, T=8)
    rng = np.random.default_rng(3)
    x0 = rng.integers(0, 4, size=(5, 3))
    for t in range(1, 9):
        xt = corrupt_with_uniforms(s, x0, t, rng.random(3))
        model = CheatingOracle(x0, 4)
        terms = bound_terms(model, s, x0, xt, t, np.zeros(5, dtype=np.int64))
        np.testing.assert_allclose(terms.data, 0.0, atol=1e-9)


def test_bound_term_t1_is_reconstruction_nll():
    s = make_sched(K=4, T=6)
    model = small_model(K=4, T=6, D=2)
    x0 = np.array([[1, 3]])
    xt = corrupt_with_uniforms(s, x0, 1, np.random.default_rng(0).random(2))
    terms = bound_terms(model, s, x0, xt, 1, np.array([0]))
    probs = model(xt, 1, np.array([0]))
    expected = -np.log(probs[0, 0, 1]) - np.log(probs[0, 1, 3])
    assert abs(terms.data[0] - expected) < 1e-9


def test_make_negatives_properties():
    rng = np.random.default_rng(4)
    x0 = np.array([1, 2, 3])
    negs = make_negatives(x0, 2, rng)
    assert negs.sequences.shape == (2, 3)
    for row in negs.sequences:
        assert not np.array_equal(row, x0)
        assert sorted(row) == [1, 2, 3]


def test_make_negatives_uniform_over_non_identity():
    rng = np.random.default_rng(5)
    x0 = np.array([1, 2, 3])
    counts = {}
    n = 10_000
    for _ in range(n):
        seq = tuple(make_negatives(x0, 1, rng).sequences[0])
        counts[seq] = counts.get(seq, 0) + 1
    assert len(counts) == 5  # 3! - 1 non-identity permutations
    expected = n / 5
    chi2 = sum((c - expected) ** 2 / expected for c in counts.values())
    assert chi2 < 18.47  # chi-square_4 at 0.999


def test_make_negatives_degenerate_cases():
    rng = np.random.default_rng(6)
    with pytest.warns(UserWarning):
        negs = make_negatives(np.array([7]), 3, rng)
    np.testing.assert_array_equal(negs.sequences, np.full((3, 1), 7))
    with pytest.warns(UserWarning):
        negs = make_negatives(np.array([2, 2, 2]), 1, rng)
    np.testing.assert_array_equal(negs.sequences[0], [2, 2, 2])


def test_shared_corruption_uniforms():
    s = make_sched(K=4, T=8)
    tokens = np.tile(np.array([[0, 1, 2, 3]]), (3, 1))
    u = np.random.default_rng(7).random(4)
    xt = corrupt_with_uniforms(s, tokens, 5, u)
    # identical rows + identical uniforms => identical corruption
    assert (xt == xt[0]).all()


def test_total_loss_lambda_zero_equals_plain_bound():
    s = make_sched(K=4, T=6)
    model = small_model(K=4, T=6, D=3)
    x0 = np.array([0, 2, 1])
    br = total_loss(model, s, x0, cond=0, lam=0.0, n_negatives=4, t=3,
                    rng=np.random.default_rng(8))
    assert br.total == br.positive_vb


def test_total_loss_affine_in_lambda():
    s = make_sched(K=4, T=6)
    model = small_model(K=4, T=6, D=3)
    x0 = np.array([3, 0, 2])

    def run(lam):
        return total_loss(model, s, x0, cond=1, lam=lam, n_negatives=5, t=4,
                          rng=np.random.default_rng(9))

    b0, b1 = run(0.0), run(1.0)
    slope = b1.total - b0.total
    assert abs(slope + b1.negative_vb_mean) < 1e-12
    for lam in (5e-5, 0.3, 0.77):
        b = run(lam)
        assert abs(b.total - (b0.total + lam * slope)) < 1e-12


def test_total_loss_operating_point_hand_combined():
    s = make_sched(K=4, T=6)
    model = small_model(K=4, T=6, D=4)
    x0 = np.array([0, 1, 2, 3])
    lam, N = 5e-5, 10
    br = total_loss(model, s, x0, cond=0, lam=lam, n_negatives=N, t=2,
                    rng=np.random.default_rng(10))
    assert abs(br.total - (br.positive_vb - lam * br.negative_vb_mean)) < 1e-12


def test_total_loss_degenerate_d1():
    s = make_sched(K=4, T=6)
    cfg = DenoiserConfig(K=4, T=6, D=1, n_conditions=2, d_model=16, n_layers=1, n_heads=2)
    model = Denoiser(cfg, np.random.default_rng(0))
    lam = 0.25
    with pytest.warns(UserWarning):
        br = total_loss(model, s, np.array([2]), cond=0, lam=lam, n_negatives=1, t=3,
                        rng=np.random.default_rng(11))
    assert abs(br.total - (1 - lam) * br.positive_vb) < 1e-12


def test_total_loss_gradients_confined_to_adapters():
    s = make_sched(K=4, T=4)
    model = small_model(K=4, T=4, D=3)
    attach_lora(model, LoraConfig(r=2), np.random.default_rng(12))
    rng = np.random.default_rng(13)
    for name in sorted(model._adapter_names):
        model._params[name].data = rng.normal(0, 0.05, model._params[name].data.shape)
    model.zero_grads()
    with Tape() as tape:
        br = total_loss(model, s, np.array([1, 0, 3]), cond=0, lam=5e-5, n_negatives=3,
                        t=2, rng=np.random.default_rng(14))
        tape.backward(br.loss)
    for name, tensor in model.parameters().items():
        if name in model._adapter_names:
            assert tensor.grad is not None
        else:
            assert tensor.grad is None, name


def test_total_loss_negative_clamp():
    s = make_sched(K=4, T=6)
    model = small_model(K=4, T=6, D=3)
    x0 = np.array([1, 2, 0])
    lam = 0.5
    raw = total_loss(model, s, x0, cond=0, lam=lam, n_negatives=2, t=3,
                     rng=np.random.default_rng(15))
    tiny = 1e-3
    clamped = total_loss(model, s, x0, cond=0, lam=lam, n_negatives=2, t=3,
                         rng=np.random.default_rng(15), clamp_negative_at=tiny)
    assert clamped.negative_vb_mean <= tiny + 1e-15
    assert abs(clamped.total - (clamped.positive_vb - lam * clamped.negative_vb_mean)) < 1e-12
    assert raw.total <= clamped.total + 1e-12


def test_variational_bound_single_example():
    s = make_sched(K=4, T=5)
    model = small_model(K=4, T=5, D=2)
    est = variational_bound(model, s, TokenSequence(np.array([0, 3])), cond=1, t=2,
                            rng=np.random.default_rng(16))
    assert est.t == 2
    assert est.value >= 0.0
    assert est.l_t > 0.0
    assert abs(est.term.item() - est.value) < 1e-15


def test_estimator_unbiasedness_smoke():
    """20k-draw version of the acceptance unbiasedness criterion."""
    s = make_sched(K=4, T=4)
    model = small_model(K=4, T=4, D=2, seed=21)
    x0 = np.array([1, 2])
    cond = 0
    exact = exhaustive_bound(model, s, x0, cond)

    rng = np.random.default_rng(17)
    n = 20_000
    ts = rng.integers(1, 5, size=n)
    total = 0.0
    for t in range(1, 5):
        m = int((ts == t).sum())
        if m == 0:
            continue
        x0_rep = np.tile(x0, (m, 1))
        u = rng.random((m, 2))
        xt = corrupt_with_uniforms(s, x0_rep, t, u)
        terms = bound_terms(model, s, x0_rep, xt, t, np.zeros(m, dtype=np.int64))
        total += float(terms.data.sum())
    mc_estimate = 4.0 * total / n
    rel = abs(mc_estimate - exact["sum_terms"]) / exact["sum_terms"]
    assert rel < 0.03, (mc_estimate, exact["sum_terms"])


def test_posterior_target_t1_is_one_hot():
    s = make_sched(K=4, T=5)
    rows = posterior_rows_batch(
        s, np.array([2, 4]), np.array([1, 3]), np.array([1, 1])
    )
    np.testing.assert_allclose(rows[0], np.eye(5)[1], atol=1e-12)
    np.testing.assert_allclose(rows[1], np.eye(5)[3], atol=1e-12)
