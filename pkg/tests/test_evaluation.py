import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cfad.detector import DetectorConfig, pretrain
from cfad.evaluation import (MetricUndefinedError, auc_pr, auc_roc, changing_ratio, evaluate,
                             macro_f1, mean_reports, tradeoff_sweep)
from cfad.numerics import ContractError


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return total / (len(pos) * len(neg))


def brute_ap(scores, labels):
    """Step interpolation over each distinct threshold, highest first."""
    scores, labels = np.asarray(scores), np.asarray(labels)
    n_pos = labels.sum()
    ap, prev_recall = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        flagged = scores >= t
        tp = np.sum(flagged & (labels == 1))
        recall = tp / n_pos
        ap += (recall - prev_recall) * tp / flagged.sum()
        prev_recall = recall
    return ap


def brute_f1(preds, labels):
    out = []
    for c in (0, 1):
        tp = sum(p == c and y == c for p, y in zip(preds, labels))
        fp = sum(p == c and y != c for p, y in zip(preds, labels))
        fn = sum(p != c and y == c for p, y in zip(preds, labels))
        out.append(1.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn))
    return sum(out) / 2


def test_auc_examples():
    assert auc_roc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)
    assert auc_roc([1, 1, 1, 1], [0, 1, 0, 1]) == 0.5
    assert auc_roc([3, 2, 1], [1, 0, 0]) == 1.0


def test_ap_examples():
    assert auc_pr([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx((1 + 2 / 3) / 2)
    # a tie group is taken in one step
    assert auc_pr([0.5, 0.5], [1, 0]) == pytest.approx(0.5)


def test_f1_examples():
    assert macro_f1([1, 1, 0, 0, 0, 1, 0, 0], [1, 0, 0, 0, 1, 1, 0, 0]) == pytest.approx((2 / 3 + 4 / 5) / 2)
    assert macro_f1([0, 0, 0], [0, 0, 0]) == 1.0
    assert changing_ratio([0, 1, 1, 0], [0, 0, 1, 1]) == 0.5


def test_undefined_and_contract_errors():
    with pytest.raises(MetricUndefinedError):
        auc_roc([1, 2], [0, 0])
    with pytest.raises(MetricUndefinedError):
        auc_pr([1, 2], [0, 0])
    with pytest.raises(ContractError):
        auc_roc([1, 2, 3], [0, 1])
    with pytest.raises(ContractError):
        changing_ratio([], [])
    with pytest.raises(ContractError):
        macro_f1([], [])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.booleans()), min_size=2, max_size=25))
def test_property_metrics_match_brute_force(items):
    scores = [float(s) for s, _ in items]
    labels = [int(y) for _, y in items]
    if 0 < sum(labels) < len(labels):
        assert auc_roc(scores, labels) == pytest.approx(brute_auc(scores, labels))
    if sum(labels):
        assert auc_pr(scores, labels) == pytest.approx(brute_ap(scores, labels))
    preds = [int(s > 3) for s in scores]
    assert macro_f1(preds, labels) == pytest.approx(brute_f1(preds, labels))
    assert 0.0 <= changing_ratio(preds, labels) <= 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_property_auc_flip_symmetry(seed):
    rng = np.random.default_rng(seed)
    s = rng.integers(0, 5, 30).astype(float)
    y = rng.integers(0, 2, 30)
    if 0 < y.sum() < 30:
        assert auc_roc(s, y) + auc_roc(-s, y) == pytest.approx(1.0)


@pytest.fixture(scope="module")
def setup():
    rng = np.random.default_rng(0)
    train = rng.normal(size=(997, 4))
    test = np.vstack([rng.normal(size=(150, 4)), rng.normal(size=(50, 4)) * 4])
    labels = np.r_[np.zeros(150), np.ones(50)].astype(int)
    params = pretrain(train, DetectorConfig(pretrain_epochs=3))
    return params, train, test, test + 0.1, labels


def test_sweep_flag_rate_on_train(setup):
    params, train, *_ = setup
    rows = tradeoff_sweep(params, train, train, train, np.zeros(len(train), int),
                          quantiles=(0.9, 0.99, 0.999))
    from cfad.detector import anomaly_scores
    s = anomaly_scores(params, train)
    for r in rows:
        assert np.mean(s > r.tau) <= (1 - r.q) + 1 / len(train)
    assert [r.q for r in rows] == [0.9, 0.99, 0.999]


def test_evaluate_report(setup):
    params, train, test, test_cf, labels = setup
    rep = evaluate(params, train, test, test_cf, labels, q=0.95)
    assert set(rep.summary()) == {"auc_pr", "auc_roc", "macro_f1", "changing_ratio", "q", "tau"}
    assert rep.auc_roc > 0.8
    assert len(rep.sweep) == 9
    assert np.array_equal(rep.preds, (rep.scores > rep.tau).astype(int))
    mean = mean_reports([rep, rep])
    assert mean["runs"] == 2 and mean["auc_roc"] == rep.auc_roc
    assert len(mean["sweep"]) == 9
