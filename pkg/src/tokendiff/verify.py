"""Operator-facing oracle battery behind the `verify` subcommand.

Each suite re-derives expected values from an independent route (brute
force, enumeration, finite differences, Monte Carlo) and checks the
production path against it at a pinned tolerance. Sizes are desk scale
so the whole battery stays interactive; the pytest acceptance suite runs
the criterion-level sizes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .datagen import (
    OracleDenoiser,
    empirical_table,
    enumerate_sequences,
    make_task,
    oracle_full_table,
    sample_dataset,
    shift_task,
    tv_distance,
)
from .denoiser import Denoiser, DenoiserConfig, LoraConfig, attach_lora, lora_param_count, merge_lora
from .diffusion import (
    forward_sample_tokens,
    generate,
    posterior,
    posterior_from_x0_prediction,
    posterior_mix_op,
)
from .loss import (
    bound_terms,
    corrupt_with_uniforms,
    exhaustive_bound,
    kl_categorical,
    make_negatives,
    total_loss,
)
from .metrics import fid, inception_score, kid, kl_metric
from .rngtools import derive_rng
from .schedule import ScheduleConfig, build_schedule, marginal_distribution, transition_matrix
from .trainer import TrainConfig, Trainer, adamw_single_update


@dataclass
class SuiteResult:
    name: str
    passes: int = 0
    failures: list = field(default_factory=list)

    def check(self, label: str, ok: bool, detail: str = "") -> None:
        if ok:
            self.passes += 1
        else:
            self.failures.append(f"{label}: {detail}" if detail else label)

    @property
    def ok(self) -> bool:
        return not self.failures


def _sched(K=4, T=8):
    return build_schedule(ScheduleConfig(K=K, T=T))


def schedule_suite(seed: int) -> SuiteResult:
    res = SuiteResult("schedule")
    for K in (2, 4, 8):
        for T in (1, 4, 10):
            s = _sched(K, T)
            for t in range(1, T + 1):
                Q = transition_matrix(s, t)
                res.check(
                    f"columns K={K} T={T} t={t}",
                    float(np.abs(Q.sum(axis=0) - 1.0).max()) <= 1e-12 and (Q >= 0).all(),
                )
            Qbar = np.eye(K + 1)
            for t in range(0, T + 1):
                if t > 0:
                    Qbar = transition_matrix(s, t) @ Qbar
                worst = max(
                    float(np.abs(marginal_distribution(s, x0, t) - Qbar[:, x0]).max())
                    for x0 in range(K)
                )
                res.check(f"marginal K={K} T={T} t={t}", worst <= 1e-10, f"err {worst:.2e}")
            e_mask = np.eye(K + 1)[K]
            res.check(f"absorbing K={K} T={T}", np.array_equal(Qbar @ e_mask, e_mask))
    return res


def posterior_suite(seed: int) -> SuiteResult:
    res = SuiteResult("posterior")
    for K in (2, 4, 8):
        for T in (1, 4, 10):
            s = _sched(K, T)
            worst = 0.0
            worst_norm = 0.0
            for t in range(1, T + 1):
                Q = transition_matrix(s, t)
                for x0 in range(K):
                    prev = marginal_distribution(s, x0, t - 1)
                    now = marginal_distribution(s, x0, t)
                    for xt in range(K + 1):
                        row = posterior(s, xt, x0, t)
                        oracle = Q[xt, :] * prev / now[xt]
                        worst = max(worst, float(np.abs(row - oracle).max()))
                        worst_norm = max(worst_norm, abs(float(row.sum()) - 1.0))
            res.check(f"enumeration K={K} T={T}", worst <= 1e-10, f"err {worst:.2e}")
            res.check(f"row sums K={K} T={T}", worst_norm <= 1e-10, f"err {worst_norm:.2e}")
    s = _sched(4, 8)
    rng = derive_rng(seed, "verify.posterior")
    dist = rng.dirichlet(np.ones(4), size=(6,))
    for xt in (0, 2, 4):
        mix = posterior_from_x0_prediction(s, np.full(6, xt), dist, 5)
        hand = np.array([sum(dist[i, k] * posterior(s, xt, k, 5) for k in range(4)) for i in range(6)])
        res.check(f"mixture xt={xt}", float(np.abs(mix - hand).max()) <= 1e-12)
    return res


def gradient_suite(seed: int) -> SuiteResult:
    res = SuiteResult("gradient")
    rng = derive_rng(seed, "verify.gradient")

    # single-op spot checks via the analytic composites
    logits = Tensor(np.array([[1.0, 1.0]]), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_all(ad.cross_entropy(ad.softmax_rows(logits), np.array([0])))
        tape.backward(loss)
    res.check("softmax-ce analytic", float(np.abs(logits.grad - [[-0.5, 0.5]]).max()) < 1e-12)

    a = rng.normal(size=(4, 4))
    b = rng.normal(size=(4, 4))
    naive = np.zeros((4, 4))
    for i in range(4):
        for j in range(4):
            for k in range(4):
                naive[i, j] += a[i, k] * b[k, j]
    res.check(
        "matmul naive oracle",
        float(np.abs(ad.matmul(Tensor(a), Tensor(b)).data - naive).max()) <= 1e-12,
    )

    # full contrastive loss on an adapted model, every trainable scalar
    s = _sched(4, 4)
    cfg = DenoiserConfig(K=4, T=4, D=3, n_conditions=2, d_model=16, n_layers=1, n_heads=2, d_cond=8)
    model = Denoiser(cfg, derive_rng(seed, "verify.gradient.model"))
    attach_lora(model, LoraConfig(r=2), derive_rng(seed, "verify.gradient.lora"))
    for name in sorted(model._adapter_names):
        model._params[name].data = rng.normal(0, 0.05, model._params[name].data.shape)
    x0 = np.array([1, 0, 3])
    frozen_rng_seed = int(rng.integers(2**31))

    def f():
        br = total_loss(model, s, x0, cond=1, lam=5e-5, n_negatives=2, t=3,
                        rng=np.random.default_rng(frozen_rng_seed))
        return br.loss

    report = ad.finite_diff_check(f, sorted(model.trainable_parameters().items()))
    res.check(
        "contrastive loss FD (adapted model)", report.passed,
        f"max rel err {report.max_rel_err:.2e} over {report.n_params} params",
    )

    # posterior mixture op jacobian
    dist = Tensor(rng.dirichlet(np.ones(4), size=(2, 3)), requires_grad=True)
    xt = rng.integers(0, 5, size=(2, 3))
    w = rng.normal(size=dist.data.size + 2 * 3)

    def g():
        out = posterior_mix_op(s, xt, np.array([2, 4]), dist)
        return ad.weighted_sum(ad.reshape(out, (out.data.size,)), w)

    rep2 = ad.finite_diff_check(g, [("dist", dist)], step=1e-6, tol=1e-6)
    res.check("posterior mixture FD", rep2.passed, f"max rel err {rep2.max_rel_err:.2e}")
    return res


def lora_suite(seed: int) -> SuiteResult:
    res = SuiteResult("lora")
    cfg = DenoiserConfig(K=4, T=6, D=3, n_conditions=3, d_model=16, n_layers=2, n_heads=2, d_cond=8)
    model = Denoiser(cfg, derive_rng(seed, "verify.lora.model"))
    tokens = np.array([[0, 4, 2], [1, 1, 3]])
    before = model(tokens, 4, np.array([0, 2]))
    attach_lora(model, LoraConfig(r=4), derive_rng(seed, "verify.lora.init"))
    res.check("attach neutrality", np.array_equal(before, model(tokens, 4, np.array([0, 2]))))
    res.check("count formula", model.count_trainable() == lora_param_count(cfg, LoraConfig(r=4)))
    res.check(
        "rank doubling",
        lora_param_count(cfg, LoraConfig(r=8)) == 2 * lora_param_count(cfg, LoraConfig(r=4)),
    )
    rng = derive_rng(seed, "verify.lora.rand")
    for name in sorted(model._adapter_names):
        model._params[name].data = rng.normal(0, 0.1, model._params[name].data.shape)
    probe = rng.integers(0, 5, size=(100, 3))
    conds = rng.integers(0, 3, size=100)
    pre = model(probe, 2, conds)
    merge_lora(model)
    post = model(probe, 2, conds)
    res.check("merge equivalence", float(np.abs(pre - post).max()) <= 1e-10)
    res.check("merged trainable count", model.count_trainable() == 0)
    return res


def oracle_chain_suite(seed: int) -> SuiteResult:
    res = SuiteResult("oracle-chain")
    s = _sched(4, 10)
    rng = derive_rng(seed, "verify.chain.forward")
    n = 50_000
    out = forward_sample_tokens(s, np.full((n, 1), 2, dtype=np.int64), s.T, rng)
    res.check(
        "terminal mask frequency",
        abs(float((out == 4).mean()) - s.gamma_bar[s.T]) < 0.012,
    )

    task = make_task(C=2, K=4, D=2, seed=101, peak=0.8, trans_peak=0.4)
    s8 = _sched(4, 8)
    oracle = OracleDenoiser(task, s8)
    for cond in range(task.C):
        gen, _ = generate(
            oracle, s8, cond=cond, D=2,
            rng=derive_rng(seed, f"verify.chain.gen{cond}"), n=20_000,
        )
        tv = tv_distance(empirical_table(gen, 4, 2), oracle_full_table(task, cond))
        res.check(f"chain fidelity cond={cond}", tv <= 0.03, f"TV {tv:.4f}")
    return res


def loss_suite(seed: int) -> SuiteResult:
    res = SuiteResult("loss-algebra")
    rng = derive_rng(seed, "verify.loss")
    for _ in range(10):
        p = rng.dirichlet(np.ones(5))
        q = rng.dirichlet(np.ones(5))
        naive = sum(pi * (np.log(pi) - np.log(max(qi, 1e-12))) for pi, qi in zip(p, q) if pi > 0)
        res.check("kl naive oracle", abs(kl_categorical(p, q) - naive) <= 1e-12)

    s = _sched(4, 6)
    cfg = DenoiserConfig(K=4, T=6, D=3, n_conditions=2, d_model=16, n_layers=1, n_heads=2, d_cond=8)
    model = Denoiser(cfg, derive_rng(seed, "verify.loss.model"))
    x0 = np.array([3, 0, 2])

    def run(lam):
        return total_loss(model, s, x0, cond=1, lam=lam, n_negatives=5, t=4,
                          rng=np.random.default_rng(202))

    b0, b1 = run(0.0), run(1.0)
    res.check("lambda zero reduction", b0.total == b0.positive_vb)
    slope = b1.total - b0.total
    lam = 5e-5
    res.check("affine in lambda", abs(run(lam).total - (b0.total + lam * slope)) <= 1e-12)

    counts = {}
    rng_perm = derive_rng(seed, "verify.loss.perm")
    for _ in range(5000):
        seq = tuple(make_negatives(np.array([1, 2, 3]), 1, rng_perm).sequences[0])
        counts[seq] = counts.get(seq, 0) + 1
    expected = 5000 / 5
    chi2 = sum((c - expected) ** 2 / expected for c in counts.values())
    res.check("permutation uniformity", len(counts) == 5 and chi2 < 18.47, f"chi2 {chi2:.1f}")

    # estimator unbiasedness, reduced draw count
    s4 = _sched(4, 4)
    cfg4 = DenoiserConfig(K=4, T=4, D=2, n_conditions=2, d_model=16, n_layers=1, n_heads=2, d_cond=8)
    m4 = Denoiser(cfg4, derive_rng(seed, "verify.loss.model4"))
    x02 = np.array([1, 2])
    exact = exhaustive_bound(m4, s4, x02, 0)
    draws = derive_rng(seed, "verify.loss.draws")
    n = 20_000
    ts = draws.integers(1, 5, size=n)
    total = 0.0
    for t in range(1, 5):
        m = int((ts == t).sum())
        if m == 0:
            continue
        reps = np.tile(x02, (m, 1))
        xt = corrupt_with_uniforms(s4, reps, t, draws.random((m, 2)))
        terms = bound_terms(m4, s4, reps, xt, t, np.zeros(m, dtype=np.int64))
        total += float(terms.data.sum())
    mc = 4.0 * total / n
    rel = abs(mc - exact["sum_terms"]) / exact["sum_terms"]
    res.check("estimator unbiasedness", rel < 0.03, f"rel {rel:.4f}")
    return res


def training_suite(seed: int) -> SuiteResult:
    res = SuiteResult("training")
    lr = 0.01
    res.check("adamw first step", abs((1.0 - adamw_single_update(1.0, 1.0, lr)) - lr) < 1e-9)

    task = make_task(C=2, K=4, D=3, seed=303)
    s = _sched(4, 6)
    data = sample_dataset(task, 256, derive_rng(seed, "verify.train.data"))
    cfg = DenoiserConfig(K=4, T=6, D=3, n_conditions=2, d_model=16, n_layers=1, n_heads=2, d_cond=8)

    def one_epoch():
        model = Denoiser(cfg, derive_rng(seed, "verify.train.model"))
        tr = Trainer(model, s, data, TrainConfig(
            phase="pretrain", epochs=1, batch_size=64, learning_rate=1e-3, seed=5))
        tr.train()
        return tr.history.epoch_means[0], model.state_dict()

    l1, st1 = one_epoch()
    l2, st2 = one_epoch()
    res.check("epoch determinism", l1 == l2 and all(np.array_equal(st1[k], st2[k]) for k in st1))

    model = Denoiser(cfg, derive_rng(seed, "verify.train.model2"))
    attach_lora(model, LoraConfig(r=2), derive_rng(seed, "verify.train.lora"))
    base = {k: v.data.copy() for k, v in model.base_parameters().items()}
    tr = Trainer(model, s, data, TrainConfig(
        phase="finetune_lora_contrastive", epochs=1, batch_size=64, learning_rate=1e-3,
        lam=5e-5, n_negatives=2, seed=6, lora=LoraConfig(r=2)))
    tr.train()
    res.check(
        "frozen integrity",
        all(np.array_equal(model._params[k].data, v) for k, v in base.items()),
    )
    return res


def metrics_suite(seed: int) -> SuiteResult:
    res = SuiteResult("metrics")
    rng = derive_rng(seed, "verify.metrics")
    a = rng.normal(size=(4000, 8))
    res.check("fid self", fid(a, a) <= 1e-8)
    b = rng.normal(size=(4000, 8))
    b[:, 0] += 1.0
    res.check("fid gaussian gap", abs(fid(a, b) - 1.0) < 0.1, f"fid {fid(a, b):.4f}")
    means = []
    for i in range(30):
        x = rng.normal(size=(200, 4))
        y = rng.normal(size=(200, 4))
        means.append(kid(x, y)[0])
    se = float(np.std(means, ddof=1) / np.sqrt(len(means)))
    res.check("kid null mean", abs(float(np.mean(means))) < 3 * se, f"{np.mean(means):.2e} vs se {se:.2e}")
    onehot = np.eye(4)[rng.integers(0, 4, 400)]
    mean, _ = inception_score(onehot)
    res.check("isc analytic max", abs(mean - 4.0) < 0.2)
    gen = np.tile([0.9, 0.1], (40, 1))
    ref = np.tile([0.5, 0.5], (40, 1))
    res.check(
        "kl aggregate analytic",
        abs(kl_metric(gen, ref) - (0.9 * np.log(1.8) + 0.1 * np.log(0.2))) < 1e-12,
    )
    return res


def data_suite(seed: int) -> SuiteResult:
    res = SuiteResult("data")
    task = make_task(C=3, K=5, D=3, seed=404)
    table_sum = sum(float(oracle_full_table(task, c).sum()) for c in range(3))
    res.check("oracle tables normalized", abs(table_sum - 3.0) <= 1e-10)
    ds = sample_dataset(task, 50_000, derive_rng(seed, "verify.data.sample"))
    worst = 0.0
    for c in range(task.C):
        rows = ds.tokens[ds.cond == c]
        freq = np.bincount(rows[:, 0], minlength=task.K) / rows.shape[0]
        worst = max(worst, float(np.abs(freq - task.initial[c]).max()))
    res.check("initial frequencies", worst < 0.02, f"max err {worst:.4f}")
    shifted = shift_task(task, derive_rng(seed, "verify.data.shift"), weight=0.5)
    tvs = [tv_distance(oracle_full_table(task, c), oracle_full_table(shifted, c)) for c in range(3)]
    res.check("shift separation", min(tvs) > 0.05, f"min TV {min(tvs):.4f}")
    seqs = enumerate_sequences(5, 3)
    res.check("enumeration size", seqs.shape == (125, 3))
    return res


SUITES = (
    schedule_suite,
    posterior_suite,
    gradient_suite,
    lora_suite,
    oracle_chain_suite,
    loss_suite,
    training_suite,
    metrics_suite,
    data_suite,
)


def run_all(seed: int = 11, echo=print) -> bool:
    """Run every suite; prints one pass-count line each. True if all green."""
    all_ok = True
    for suite_fn in SUITES:
        result = suite_fn(seed)
        status = "ok" if result.ok else "FAIL"
        echo(f"[{status}] {result.name}: {result.passes} checks passed, {len(result.failures)} failed")
        for failure in result.failures:
            echo(f"    breach: {failure}")
        all_ok = all_ok and result.ok
    return all_ok
