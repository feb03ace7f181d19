import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone
from sklearn.utils.estimator_checks import check_classifiers_train

from oracles import loop_diversity, loop_kid, loop_mpjpe, loop_pr

from macdiff.evaluation import (FeatureSet, LinearProbeClassifier, MetricReport, diversity, diversity_pairs, fid, kid,
                                linear_probe, mpjpe, precision_recall, stratified_subset)


def test_mpjpe_examples(rng):
    x = rng.normal(size=(2, 6, 4, 3))
    assert mpjpe(x, x) == 0.0
    d = np.array([0.3, -0.4, 1.2])
    assert math.isclose(mpjpe(x + d, x), np.linalg.norm(d), rel_tol=1e-12)


def test_mpjpe_loop_oracle(rng):
    p, t = rng.normal(size=(3, 6, 4, 3)), rng.normal(size=(3, 6, 4, 3))
    mask = rng.random((6, 4)) < 0.5
    mask[0, 0] = True
    assert abs(mpjpe(p, t, mask) - loop_mpjpe(p, t, mask)) < 1e-9
    with pytest.raises(ValueError):
        mpjpe(p, t, np.zeros((6, 4), bool))
    with pytest.raises(ValueError):
        mpjpe(p, t[:2])


def test_fid_identical_and_symmetric(rng):
    a = rng.normal(size=(300, 8))
    b = rng.normal(size=(300, 8)) * 1.3 + 0.2
    assert fid(a, a) < 1e-3
    assert abs(fid(a, b) - fid(b, a)) < 1e-6


def test_fid_shifted_gaussian():
    rng = np.random.default_rng(0)
    m = np.full(8, 0.5)
    a = rng.normal(size=(5000, 8))
    assert abs(fid(a, a + m) / np.sum(m**2) - 1) < 1e-6
    reps = [fid(rng.normal(size=(5000, 8)), rng.normal(size=(5000, 8)) + m) for _ in range(20)]
    assert abs(np.mean(reps) / np.sum(m**2) - 1) < 0.02


def test_fid_errors(rng):
    with pytest.raises(ValueError):
        fid(rng.normal(size=(5, 8)), rng.normal(size=(20, 8)))
    with pytest.raises(ValueError):
        FeatureSet(np.full((3, 2), np.nan))


def test_kid_loop_oracle(rng):
    a, b = rng.normal(size=(50, 6)), rng.normal(size=(50, 6)) + 0.3
    assert abs(kid(a, b) - loop_kid(a, b)) < 1e-9


def test_kid_separated_clusters(rng):
    a = rng.normal(size=(60, 4))
    assert kid(a, a + 10.0) > 0


def test_kid_identical_rows_closed_form():
    # on identical sets the unbiased estimator reduces to (2/n) * (mean off-diagonal - mean diagonal) kernel
    rng = np.random.default_rng(0)
    a = rng.normal(size=(1000, 8))
    K = (a @ a.T / 8 + 1) ** 3
    n = len(a)
    off = (K.sum() - np.trace(K)) / (n * (n - 1))
    expect = -2 / n * (np.trace(K) / n - off)
    assert abs(kid(a, a) - expect) < 1e-9
    small = rng.normal(size=(1000, 8)) * 0.05
    assert abs(kid(small, small)) < 1e-3


def test_diversity_examples(rng):
    assert diversity(np.ones((10, 3)), pairs=5, rng=rng) == 0.0
    pair = np.array([[0.0, 0.0], [3.0, 4.0]])
    assert math.isclose(diversity(pair, pairs=7, rng=rng), 5.0)


@pytest.mark.parametrize("n", [50, 500])
def test_diversity_loop_oracle(n):
    f = np.random.default_rng(1).normal(size=(n, 5))
    i, j = diversity_pairs(n, 100, np.random.default_rng(3))
    assert np.all(i != j)
    if n >= 200:
        assert len(set(i) | set(j)) == 200
    assert abs(diversity(f, 100, np.random.default_rng(3)) - loop_diversity(f, i, j)) < 1e-9


def test_precision_recall_examples(rng):
    a = rng.normal(size=(50, 4))
    assert precision_recall(a, a) == (1.0, 1.0)
    assert precision_recall(a, a + 100)[0] == 0.0


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 5))
def test_precision_recall_brute_force(seed, k):
    g = np.random.default_rng(seed)
    a, b = g.normal(size=(50, 3)), g.normal(size=(50, 3)) * 1.2 + 0.3
    p, r = precision_recall(a, b, k)
    pe, re = loop_pr(a, b, k)
    assert abs(p - pe) < 1e-9 and abs(r - re) < 1e-9


def test_probe_separable():
    rng = np.random.default_rng(0)
    X = np.concatenate([rng.normal(-3, 0.5, (40, 4)), rng.normal(3, 0.5, (40, 4))])
    y = np.repeat([0, 1], 40)
    assert linear_probe(X, y, X, y) == 1.0
    assert linear_probe(np.concatenate([X, X]), np.concatenate([y, y]), X, y) == 1.0


def test_probe_shuffled_labels_near_chance():
    accs = []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(800, 8))
        y = rng.integers(0, 4, 800)
        accs.append(linear_probe(X[:400], rng.permutation(y[:400]), X[400:], y[400:], epochs=20, seed=seed))
    assert abs(np.mean(accs) - 0.25) < 0.05


def test_probe_estimator_contract():
    clf = LinearProbeClassifier(epochs=5, random_state=1)
    assert clone(clf).get_params() == clf.get_params()
    check_classifiers_train("LinearProbeClassifier", LinearProbeClassifier(epochs=30))
    X = np.random.default_rng(0).normal(size=(40, 3))
    y = (X[:, 0] > 0).astype(int)
    clf.fit(X, y, eval_set=(X, y))
    assert len(clf.history_) == 5 and np.allclose(clf.predict_proba(X).sum(1), 1)
    with pytest.raises(ValueError):
        LinearProbeClassifier().fit(X, np.zeros(40))


def test_stratified_subset(rng):
    y = np.repeat(np.arange(4), [10, 20, 30, 40])
    idx = stratified_subset(y, 0.1, rng)
    assert np.bincount(y[idx]).tolist() == [1, 2, 3, 4]
    assert np.all(np.diff(idx) > 0)
    with pytest.raises(ValueError):
        stratified_subset(y, 0.05, rng)
    with pytest.raises(ValueError):
        stratified_subset(y, 0.0, rng)


def test_metric_report_json():
    r = MetricReport({"fid": 1.5}, fingerprint="abc", seed=3)
    back = MetricReport.from_json(r.to_json())
    assert back.metrics == {"fid": 1.5} and back.fingerprint == "abc" and back.seed == 3
    assert "timestamp" not in json.loads(r.to_json(include_timestamp=False))
    assert r.to_json(False) == MetricReport({"fid": 1.5}, fingerprint="abc", seed=3).to_json(False)
