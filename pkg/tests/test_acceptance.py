"""Acceptance suite: one test per criterion, at the stated tolerances.

Each test prints an `ACCEPTANCE n [PASS|FAIL]` line (visible with -rA or
-s) and asserts the criterion. Heavier criteria (oracle chain at 1e5
samples, the end-to-end toy run) dominate the runtime; the whole module
is sized to finish on a laptop-class CPU.
"""

import json
import time

import numpy as np
import pytest

from tokendiff import autodiff as ad
from tokendiff.autodiff import Tape
from tokendiff.checkpoint import load_checkpoint, save_checkpoint
from tokendiff.cli import main as cli_main
from tokendiff.datagen import (
    Dataset,
    OracleDenoiser,
    bayes_classifier_posterior,
    empirical_table,
    make_task,
    oracle_full_table,
    sample_dataset,
    tv_distance,
)
from tokendiff.denoiser import Denoiser, DenoiserConfig, LoraConfig, attach_lora, lora_param_count, merge_lora
from tokendiff.diffusion import generate, posterior
from tokendiff.loss import bound_terms, corrupt_with_uniforms, exhaustive_bound, total_loss
from tokendiff.metrics import fid, inception_score, kid
from tokendiff.rngtools import derive_rng
from tokendiff.schedule import build_schedule, marginal_distribution, ScheduleConfig, transition_matrix
from tokendiff.trainer import TrainConfig, Trainer, make_trainer, resume_trainer


def report(criterion: int, ok: bool, detail: str) -> None:
    status = "PASS" if ok else "FAIL"
    print(f"ACCEPTANCE {criterion} [{status}] {detail}", flush=True)
    assert ok, f"criterion {criterion}: {detail}"


def sched_for(K, T):
    return build_schedule(ScheduleConfig(K=K, T=T))


def test_criterion_1_schedule_oracle():
    t0 = time.time()
    worst_marginal = 0.0
    worst_column = 0.0
    for K in (2, 4, 8):
        for T in (1, 4, 10):
            s = sched_for(K, T)
            Qbar = np.eye(K + 1)
            for t in range(0, T + 1):
                if t > 0:
                    Q = transition_matrix(s, t)
                    worst_column = max(worst_column, float(np.abs(Q.sum(axis=0) - 1.0).max()))
                    Qbar = Q @ Qbar
                for x0 in range(K):
                    err = float(np.abs(marginal_distribution(s, x0, t) - Qbar[:, x0]).max())
                    worst_marginal = max(worst_marginal, err)
    elapsed = time.time() - t0
    report(
        1,
        worst_marginal <= 1e-10 and worst_column <= 1e-12 and elapsed < 5.0,
        f"marginal err {worst_marginal:.2e} (<=1e-10), column err {worst_column:.2e} "
        f"(<=1e-12), {elapsed:.2f}s (<5s)",
    )


def test_criterion_2_posterior_oracle():
    t0 = time.time()
    worst = 0.0
    worst_norm = 0.0
    for K in (2, 4, 8):
        for T in (1, 4, 10):
            s = sched_for(K, T)
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
    elapsed = time.time() - t0
    report(
        2,
        worst <= 1e-10 and worst_norm <= 1e-10 and elapsed < 5.0,
        f"enumeration err {worst:.2e} (<=1e-10), row-sum err {worst_norm:.2e} "
        f"(<=1e-10), {elapsed:.2f}s (<5s)",
    )


def test_criterion_3_oracle_chain_fidelity():
    t0 = time.time()
    task = make_task(C=2, K=4, D=2, seed=101, peak=0.8, trans_peak=0.4)
    s = sched_for(4, 8)
    oracle = OracleDenoiser(task, s)
    worst = 0.0
    for cond in range(task.C):
        gen, _ = generate(
            oracle, s, cond=cond, D=2,
            rng=derive_rng(11, f"acc3.{cond}"), n=100_000,
        )
        tv = tv_distance(empirical_table(gen, 4, 2), oracle_full_table(task, cond))
        worst = max(worst, tv)
    elapsed = time.time() - t0
    report(3, worst <= 0.02 and elapsed < 120.0,
           f"max TV {worst:.4f} (<=0.02) at 1e5 samples/condition, {elapsed:.1f}s (<2min)")


def test_criterion_4_gradient_integrity():
    t0 = time.time()
    s = sched_for(4, 6)
    cfg = DenoiserConfig(K=4, T=6, D=4, n_conditions=2, d_model=32, n_layers=2, n_heads=4, d_cond=16)
    model = Denoiser(cfg, derive_rng(11, "acc4.model"))
    attach_lora(model, LoraConfig(r=4), derive_rng(11, "acc4.lora"))
    rng = derive_rng(11, "acc4.rand")
    for name in sorted(model._adapter_names):
        model._params[name].data = rng.normal(0, 0.05, model._params[name].data.shape)
    x0 = np.array([1, 0, 3, 2])

    def f():
        br = total_loss(model, s, x0, cond=1, lam=5e-5, n_negatives=3, t=4,
                        rng=np.random.default_rng(77))
        return br.loss

    fd = ad.finite_diff_check(f, sorted(model.trainable_parameters().items()))
    elapsed = time.time() - t0
    report(
        4,
        fd.passed and elapsed < 120.0,
        f"max rel err {fd.max_rel_err:.2e} (<1e-4) over {fd.n_params} trainable scalars "
        f"(full contrastive loss), {elapsed:.1f}s (<2min)",
    )


def test_criterion_5_lora_contracts():
    cfg = DenoiserConfig(K=8, T=10, D=4, n_conditions=4, d_model=64, n_layers=2, n_heads=4)
    model = Denoiser(cfg, derive_rng(11, "acc5.model"))
    tokens = np.array([[0, 8, 2, 5], [1, 1, 3, 7]])
    conds = np.array([0, 2])
    before = model(tokens, 4, conds)
    attach_lora(model, LoraConfig(r=4), derive_rng(11, "acc5.lora"))
    neutral = float(np.abs(model(tokens, 4, conds) - before).max())

    count4 = model.count_trainable()
    formula4 = lora_param_count(cfg, LoraConfig(r=4))
    ratio8 = lora_param_count(cfg, LoraConfig(r=8)) / formula4
    table_ratio = 1.11e6 / 583e3  # published q/k operating points, r 4 -> 8

    model.zero_grads()
    with Tape() as tape:
        probs = model.forward_probs(tokens, 4, conds)
        loss = ad.sum_all(ad.cross_entropy(probs, np.array([[0, 1, 2, 3], [4, 5, 6, 7]])))
        tape.backward(loss)
    confined = all(
        (t.grad is None) == (name not in model._adapter_names)
        for name, t in model.parameters().items()
    )

    rng = derive_rng(11, "acc5.rand")
    for name in sorted(model._adapter_names):
        model._params[name].data = rng.normal(0, 0.1, model._params[name].data.shape)
    probe = rng.integers(0, 9, size=(100, 4))
    probe_conds = rng.integers(0, 4, size=100)
    pre = model(probe, 7, probe_conds)
    merge_lora(model)
    merge_err = float(np.abs(model(probe, 7, probe_conds) - pre).max())

    ok = (
        neutral <= 1e-12
        and count4 == formula4
        and ratio8 == 2.0
        and abs(table_ratio - 2.0) < 0.11
        and confined
        and merge_err <= 1e-10
        and model.count_trainable() == 0
    )
    report(
        5, ok,
        f"attach neutrality {neutral:.1e} (<=1e-12), count {count4}=={formula4}, "
        f"r4->r8 ratio {ratio8} (published {table_ratio:.2f}), grads confined={confined}, "
        f"merge err {merge_err:.1e} (<=1e-10) on 100 inputs",
    )


def test_criterion_6_contrast_algebra_and_operating_point():
    s = sched_for(4, 6)
    cfg = DenoiserConfig(K=4, T=6, D=3, n_conditions=2, d_model=16, n_layers=1, n_heads=2, d_cond=8)
    model = Denoiser(cfg, derive_rng(11, "acc6.model"))
    x0 = np.array([3, 0, 2])

    def run(lam):
        return total_loss(model, s, x0, cond=1, lam=lam, n_negatives=5, t=4,
                          rng=np.random.default_rng(42))

    b0, b1 = run(0.0), run(1.0)
    exact_zero = b0.total == b0.positive_vb
    slope = b1.total - b0.total
    affine_err = max(
        abs(run(lam).total - (b0.total + lam * slope)) for lam in (5e-5, 0.123, 0.9)
    )

    # operating point: lambda=5e-5, N=10, 50 epochs, no divergence
    task = make_task(C=2, K=4, D=3, seed=606)
    data = sample_dataset(task, 512, derive_rng(11, "acc6.data"))
    m2 = Denoiser(DenoiserConfig(K=4, T=6, D=3, n_conditions=2, d_model=16, n_layers=1,
                                 n_heads=2, d_cond=8), derive_rng(11, "acc6.m2"))
    attach_lora(m2, LoraConfig(r=2), derive_rng(11, "acc6.lora"))
    tcfg = TrainConfig(phase="finetune_lora_contrastive", epochs=50, batch_size=64,
                       learning_rate=1e-3, lam=5e-5, n_negatives=10, seed=11,
                       lora=LoraConfig(r=2))
    trainer = Trainer(m2, s, data, tcfg)
    history = trainer.train()
    totals = np.array([rec.total for rec in history.steps])
    stable = bool(np.isfinite(totals).all() and np.abs(totals).max() < 1e3)

    ok = exact_zero and affine_err <= 1e-12 and stable
    report(
        6, ok,
        f"lambda=0 exact={exact_zero}, affine err {affine_err:.1e} (<=1e-12), "
        f"50-epoch run at lambda=5e-5 N=10 finite={stable} "
        f"(|total| max {np.abs(totals).max():.3f})",
    )


def test_criterion_7_estimator_unbiasedness():
    s = sched_for(4, 4)
    cfg = DenoiserConfig(K=4, T=4, D=2, n_conditions=2, d_model=16, n_layers=1, n_heads=2, d_cond=8)
    model = Denoiser(cfg, derive_rng(11, "acc7.model"))
    x0 = np.array([1, 2])
    exact = exhaustive_bound(model, s, x0, 0)

    draws = derive_rng(11, "acc7.draws")
    n = 100_000
    ts = draws.integers(1, 5, size=n)
    total = 0.0
    for t in range(1, 5):
        m = int((ts == t).sum())
        reps = np.tile(x0, (m, 1))
        xt = corrupt_with_uniforms(s, reps, t, draws.random((m, 2)))
        for lo in range(0, m, 16384):
            hi = min(lo + 16384, m)
            terms = bound_terms(model, s, reps[lo:hi], xt[lo:hi], t,
                                np.zeros(hi - lo, dtype=np.int64))
            total += float(terms.data.sum())
    mc = s.T * total / n
    rel = abs(mc - exact["sum_terms"]) / exact["sum_terms"]
    report(7, rel < 0.01,
           f"uniform-t x T estimate {mc:.5f} vs exhaustive {exact['sum_terms']:.5f}, "
           f"rel err {rel:.4%} (<1%) at 1e5 draws")


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    """Criterion 8 artifacts, shared with the reproducibility criterion."""
    out = tmp_path_factory.mktemp("toy")
    t0 = time.time()
    seed = 11
    task = make_task(C=4, K=8, D=4, seed=5, peak=0.8, jitter=0.08)
    sched = sched_for(8, 10)
    data = sample_dataset(task, 20_000, derive_rng(seed, "acc8.data"))
    model = Denoiser(
        DenoiserConfig(K=8, T=10, D=4, n_conditions=4, d_model=64, n_layers=2, n_heads=4),
        derive_rng(seed, "acc8.model"),
    )
    tcfg = TrainConfig(phase="pretrain", epochs=40, batch_size=32, learning_rate=6e-4, seed=seed)
    trainer = make_trainer(model, sched, data, tcfg)
    trainer.train()
    train_time = time.time() - t0

    accs, tvs = [], []
    n_per = 20_000
    for c in range(4):
        gen, _ = generate(model, sched, cond=c, D=4, rng=derive_rng(seed, f"acc8.gen{c}"),
                          n=n_per, chunk=4096)
        tvs.append(tv_distance(empirical_table(gen, 8, 4), oracle_full_table(task, c)))
        post = bayes_classifier_posterior(task, gen)
        accs.append(float((post.argmax(1) == c).mean()))
    elapsed = time.time() - t0
    return {
        "accs": accs, "tvs": tvs, "elapsed": elapsed, "train_time": train_time,
        "model": model, "trainer": trainer, "sched": sched, "data": data,
        "cfg": tcfg, "out": out,
    }


def test_criterion_8_toy_end_to_end(toy_run):
    acc = min(toy_run["accs"])
    tv = max(toy_run["tvs"])
    elapsed = toy_run["elapsed"]
    report(
        8,
        acc >= 0.90 and tv <= 0.15 and elapsed <= 600.0,
        f"min conditional accuracy {acc:.4f} (>=0.90), max per-condition TV {tv:.4f} "
        f"(<=0.15), total {elapsed:.0f}s (<=600s; train {toy_run['train_time']:.0f}s)",
    )


def test_criterion_9_ablation_harness(tmp_path):
    out = tmp_path / "run"
    tiny = [
        "--set", "task.C=2", "--set", "task.K=4", "--set", "task.D=3",
        "--set", "schedule.T=6",
        "--set", "model.d_model=32", "--set", "model.n_layers=1",
        "--set", "model.n_heads=2", "--set", "model.d_cond=16",
        "--set", "data.n_train=1024", "--set", "data.n_val=128",
        "--set", "train.epochs=2", "--set", "train.batch_size=64",
        "--set", "ablation.n_train=512", "--set", "ablation.epochs=2",
        "--set", "ablation.n_eval_per_condition=1500",
    ]
    assert cli_main(["gen-data", "--out", str(out), *tiny]) == 0
    assert cli_main(["pretrain", "--out", str(out), *tiny]) == 0
    ck = str(out / "checkpoints" / "pretrain")
    assert cli_main(["finetune", "--out", str(out), "--base", ck, "--ablation", *tiny]) == 0

    table = (out / "ablation" / "comparison.txt").read_text()
    rows = table.strip().split("\n")
    arms = [r.split()[0] for r in rows[2:]]
    reports_exist = all(
        (out / "ablation" / arm / "report.json").exists()
        for arm in ("base", "lora", "lora_contrast")
    )
    manifest = json.loads((out / "manifest-finetune.json").read_text())
    ok = (
        arms == ["base", "+lora", "+lora+contrast"]
        and reports_exist
        and manifest["seed"] == 11
        and "config" in manifest
    )
    report(9, ok, f"three-row table arms={arms}, per-arm reports + archived manifest present")


def test_criterion_10_metric_formulas():
    rng = derive_rng(11, "acc10.gauss")
    a = rng.normal(size=(10_000, 8))
    self_fid = fid(a, a)
    b = rng.normal(size=(10_000, 8))
    b[:, 0] += 1.0
    gap_fid = fid(a, b)

    bounds_ok = True
    for _ in range(10):
        post = rng.dirichlet(np.ones(4) * rng.uniform(0.2, 5.0), size=200)
        mean, _ = inception_score(post)
        bounds_ok = bounds_ok and 1.0 - 1e-9 <= mean <= 4.0 + 1e-9

    null_means = []
    for i in range(100):
        x = rng.normal(size=(400, 4))
        y = rng.normal(size=(400, 4))
        null_means.append(kid(x, y, seed=i)[0])
    null_mean = float(np.mean(null_means))
    se = float(np.std(null_means, ddof=1) / np.sqrt(len(null_means)))

    ok = (
        self_fid <= 1e-8
        and abs(gap_fid - 1.0) <= 0.05
        and bounds_ok
        and abs(null_mean) <= 3 * se
    )
    report(
        10, ok,
        f"fid(a,a)={self_fid:.1e} (<=1e-8), unit-gap fid {gap_fid:.4f} (1.0+/-0.05), "
        f"ISc bounds held, KID null mean {null_mean:.2e} within 3se ({3*se:.2e}) over 100 reps",
    )


def test_criterion_11_reproducibility(toy_run, tmp_path):
    # CLI byte-determinism on a small config
    tiny = [
        "--set", "task.C=2", "--set", "task.K=4", "--set", "task.D=3",
        "--set", "schedule.T=4", "--set", "model.d_model=16",
        "--set", "model.n_layers=1", "--set", "model.n_heads=2", "--set", "model.d_cond=8",
        "--set", "data.n_train=256", "--set", "data.n_val=64",
        "--set", "train.epochs=1", "--set", "train.batch_size=64",
    ]
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert cli_main(["gen-data", "--out", str(out), *tiny]) == 0
        assert cli_main(["pretrain", "--out", str(out), *tiny]) == 0
        ck = str(out / "checkpoints" / "pretrain")
        assert cli_main(["sample", "--out", str(out), "--checkpoint", ck, "--n", "32", *tiny]) == 0
    cli_identical = all(
        (a / rel).read_bytes() == (b / rel).read_bytes()
        for rel in (
            "data/train.jsonl", "checkpoints/pretrain/weights.bin",
            "logs/pretrain_loss.csv", "samples/samples.jsonl",
        )
    )

    # resume bit-identical to uninterrupted, on the toy-run configuration
    sched, data, cfg = toy_run["sched"], toy_run["data"], toy_run["cfg"]
    small = Dataset(cond=data.cond[:2000], tokens=data.tokens[:2000])

    def fresh_model():
        return Denoiser(
            DenoiserConfig(K=8, T=10, D=4, n_conditions=4, d_model=64, n_layers=2, n_heads=4),
            derive_rng(11, "acc11.model"),
        )

    run_cfg = TrainConfig(phase="pretrain", epochs=3, batch_size=64,
                          learning_rate=6e-4, seed=13)
    t1 = make_trainer(fresh_model(), sched, small, run_cfg)
    t1.train(2)
    ck_dir = tmp_path / "ck"
    save_checkpoint(ck_dir, t1.model, optimizer_state=t1.opt.state(),
                    rng_state=t1.training_state()["rng_state"], epoch=t1.epoch)
    t1.train(1)
    uninterrupted = t1.model.state_dict()

    resumed = resume_trainer(sched, small, run_cfg, load_checkpoint(ck_dir))
    resumed.train(1)
    resumed_state = resumed.model.state_dict()
    resume_identical = all(
        np.array_equal(uninterrupted[k], resumed_state[k]) for k in uninterrupted
    )

    report(
        11,
        cli_identical and resume_identical,
        f"CLI artifacts byte-identical={cli_identical}, "
        f"checkpoint resume bit-identical={resume_identical}",
    )
