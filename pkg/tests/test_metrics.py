"""Metric-formula tests against analytics and naive oracles."""

import numpy as np
import pytest

from tokendiff.datagen import make_task, sample_dataset
from tokendiff.errors import UsageError
from tokendiff.loss import kl_categorical
from tokendiff.metrics import (
    MetricReport,
    comparison_table,
    fid,
    inception_score,
    kid,
    kl_metric,
    oracle_report,
    sequence_features,
)

RNG = np.random.default_rng(555)


def test_sequence_features_shape_and_norm():
    feats = sequence_features(np.array([[0, 1, 1], [2, 2, 0]]), K=3)
    assert feats.shape == (2, 3 + 9)
    np.testing.assert_allclose(np.linalg.norm(feats, axis=1), 1.0, atol=1e-12)
    # first row: unigrams {0:1, 1:2}, bigrams (0,1) and (1,1)
    raw = feats[0] * np.linalg.norm([1, 2, 0, 0, 1, 0, 0, 1, 0, 0, 0, 0])
    assert raw[0] == 1.0 and raw[1] == 2.0
    assert raw[3 + 0 * 3 + 1] == 1.0 and raw[3 + 1 * 3 + 1] == 1.0


def test_fid_self_is_zero_and_symmetric():
    a = RNG.normal(size=(300, 6))
    b = RNG.normal(size=(280, 6)) + 0.3
    assert fid(a, a) <= 1e-8
    assert abs(fid(a, b) - fid(b, a)) < 1e-8
    perm = RNG.permutation(300)
    assert abs(fid(a, b) - fid(a[perm], b)) < 1e-12


def test_fid_between_known_gaussians():
    n = 10_000
    a = RNG.normal(size=(n, 8))
    b = RNG.normal(size=(n, 8))
    b[:, 0] += 1.0
    value = fid(a, b)
    assert abs(value - 1.0) < 0.05


def test_fid_input_validation():
    with pytest.raises(UsageError):
        fid(RNG.normal(size=(5, 3)), RNG.normal(size=(5, 4)))
    with pytest.raises(UsageError):
        fid(RNG.normal(size=(1, 3)), RNG.normal(size=(5, 3)))
    with pytest.warns(UserWarning):
        fid(RNG.normal(size=(4, 6)), RNG.normal(size=(8, 6)))


def test_kid_same_draws_split_disjointly():
    a = RNG.normal(size=(400, 5))
    mean, std = kid(a, a.copy(), seed=3)
    # identical sets, disjoint splits: null behavior
    assert abs(mean) <= 3 * std + 1e-12


def test_kid_null_independent_draws():
    a = RNG.normal(size=(400, 5))
    b = RNG.normal(size=(400, 5))
    mean, std = kid(a, b)
    assert abs(mean) < 3 * std + 1e-3


def test_kid_disjoint_point_masses():
    a = np.tile(np.eye(4)[0], (100, 1))
    b = np.tile(np.eye(4)[1], (100, 1))
    mean, std = kid(a, b)
    assert mean > 0
    assert mean > 10 * std  # std is 0 for constant sets


def test_kid_order_invariance_and_guards():
    a = RNG.normal(size=(200, 4))
    b = RNG.normal(size=(200, 4))
    m1, s1 = kid(a, b)
    m2, s2 = kid(a[RNG.permutation(200)], b[RNG.permutation(200)])
    assert m1 == m2 and s1 == s2
    with pytest.raises(UsageError):
        kid(a[:5], b)


def test_inception_score_analytics():
    same = np.tile([0.25, 0.25, 0.25, 0.25], (100, 1))
    mean, std = inception_score(same)
    assert abs(mean - 1.0) < 1e-12 and std < 1e-12

    onehot = np.eye(4)[RNG.integers(0, 4, 400)]
    mean, _ = inception_score(onehot)
    assert abs(mean - 4.0) < 0.15  # analytic maximum C, up to split noise

    mixed = RNG.dirichlet(np.ones(5), 300)
    mean, std = inception_score(mixed)
    assert 1.0 <= mean <= 5.0


def test_inception_score_matches_naive_single_split():
    p = RNG.dirichlet(np.ones(3), 50)
    mean, std = inception_score(p, n_splits=1)
    marginal = p.mean(axis=0)
    naive = np.exp(np.mean([kl_categorical(row, marginal) for row in p]))
    assert abs(mean - naive) < 1e-10
    assert std == 0.0


def test_kl_metric_analytic_value():
    gen = np.tile([0.9, 0.1], (40, 1))
    ref = np.tile([0.5, 0.5], (40, 1))
    expected = 0.9 * np.log(1.8) + 0.1 * np.log(0.2)
    assert abs(kl_metric(gen, ref) - expected) < 1e-12
    assert kl_metric(gen, gen) == 0.0
    assert kl_metric(gen, ref) == kl_categorical(gen.mean(axis=0), ref.mean(axis=0))


def test_oracle_report_self_consistency():
    task = make_task(C=3, K=4, D=3, seed=20)
    gen = sample_dataset(task, 30_000, np.random.default_rng(1))
    ref = sample_dataset(task, 30_000, np.random.default_rng(2))
    report = oracle_report(task, gen, ref)
    assert report.tv_max is not None and report.tv_max < 0.03
    assert report.fid < 0.01
    assert report.conditional_accuracy > 0.7
    assert 1.0 <= report.isc_mean <= task.C
    assert report.kl < 0.01


def test_oracle_report_detects_condition_scrambling():
    task = make_task(C=4, K=5, D=4, seed=21)
    gen = sample_dataset(task, 20_000, np.random.default_rng(3))
    ref = sample_dataset(task, 20_000, np.random.default_rng(4))
    honest = oracle_report(task, gen, ref)
    scrambled_cond = np.random.default_rng(5).permutation(gen.cond)
    from tokendiff.datagen import Dataset

    scrambled = Dataset(cond=scrambled_cond, tokens=gen.tokens)
    chance = oracle_report(task, scrambled, ref)
    assert honest.conditional_accuracy > 0.85
    assert abs(chance.conditional_accuracy - 1.0 / task.C) < 0.05


def test_point_mass_task_perfect_model_accuracy_one():
    from conftest import point_mass_task

    task = point_mass_task()
    gen = sample_dataset(task, 500, np.random.default_rng(6))
    ref = sample_dataset(task, 500, np.random.default_rng(7))
    report = oracle_report(task, gen, ref)
    assert report.conditional_accuracy == 1.0


def test_report_serialization_and_table():
    report = MetricReport(
        fid=1.25, kid_mean=0.002, kid_std=0.0005, isc_mean=2.1, isc_std=0.2,
        kl=0.3, conditional_accuracy=0.95, tv_max=0.07, n_generated=100,
    )
    doc = report.to_json()
    assert '"fid": 1.25' in doc
    row = report.csv_row("base")
    assert row.startswith("base,1.25,")
    table = comparison_table({"base": report, "tuned": report})
    assert "FID v" in table and table.count("\n") == 4
