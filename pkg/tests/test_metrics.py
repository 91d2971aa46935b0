import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as hst

from mamba2mil.metrics import (FoldMetrics, UndefinedAUCError, accuracy, aggregate, roc_auc_binary,
                               roc_auc_multiclass)


def pairwise_auc(scores, labels):
    """Exhaustive Mann-Whitney count over every positive/negative pair."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p, q in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def test_hand_example():
    assert roc_auc_binary([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_perfect_and_all_ties():
    assert roc_auc_binary([0.1, 0.2, 0.9], [0, 0, 1]) == 1.0
    assert roc_auc_binary([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5


def test_single_class_undefined():
    with pytest.raises(UndefinedAUCError):
        roc_auc_binary([0.1, 0.2], [1, 1])


@settings(max_examples=300, deadline=None)
@given(hst.integers(2, 50).flatmap(lambda n: hst.tuples(
    hst.lists(hst.integers(0, 6), min_size=n, max_size=n),
    hst.lists(hst.integers(0, 1), min_size=n, max_size=n))))
def test_matches_pairwise_oracle_with_ties(case):
    grid, labels = case
    if len(set(labels)) < 2:
        return
    scores = np.array(grid) / 6.0
    labels = np.array(labels)
    assert roc_auc_binary(scores, labels) == pairwise_auc(scores, labels)
    assert roc_auc_binary(scores, labels) + roc_auc_binary(scores, 1 - labels) == 1.0


def test_monotone_invariance(rng):
    scores = rng.standard_normal(40)
    labels = np.r_[np.zeros(20, int), np.ones(20, int)]
    base = roc_auc_binary(scores, labels)
    assert roc_auc_binary(np.exp(scores), labels) == base
    assert roc_auc_binary(3.0 * scores - 7.0, labels) == base


def test_multiclass_two_columns_is_binary(rng):
    p = rng.dirichlet([1, 1], 30)
    y = rng.integers(0, 2, 30)
    assert roc_auc_multiclass(p, y) == roc_auc_binary(p[:, 1], y)


def test_multiclass_perfect_one_hot():
    y = np.array([0, 1, 2, 2, 1, 0])
    assert roc_auc_multiclass(np.eye(3)[y], y) == 1.0


def test_multiclass_matches_per_class_oracle(rng):
    p = rng.dirichlet(np.ones(3), 12)
    y = np.arange(12) % 3
    oracle = np.mean([pairwise_auc(p[:, c], (y == c).astype(int)) for c in range(3)])
    assert roc_auc_multiclass(p, y) == pytest.approx(oracle, abs=1e-15)


def test_multiclass_skips_absent_classes(rng):
    p = rng.dirichlet(np.ones(4), 10)
    y = np.array([0, 2] * 5)
    oracle = np.mean([pairwise_auc(p[:, c], (y == c).astype(int)) for c in (0, 2)])
    assert roc_auc_multiclass(p, y) == pytest.approx(oracle, abs=1e-15)


def test_accuracy_cases():
    assert accuracy([0, 1, 2], [0, 1, 2]) == 1.0
    assert accuracy([1, 0], [0, 1]) == 0.0
    assert accuracy(np.array([[0.5, 0.5], [0.2, 0.8]]), [0, 1]) == 1.0  # tie -> lowest index
    with pytest.raises(ValueError):
        accuracy([], [])


def test_accuracy_permutation_invariant(rng):
    p = rng.dirichlet(np.ones(4), 50)
    y = rng.integers(0, 4, 50)
    perm = rng.permutation(50)
    assert accuracy(p, y) == accuracy(p[perm], y[perm])


def test_seven_class_chance_accuracy():
    rng = np.random.default_rng(7)
    p = rng.random((7000, 7))
    y = rng.integers(0, 7, 7000)
    assert abs(accuracy(p, y) - 1 / 7) < 0.02


def fold(v):
    return FoldMetrics(v, v, v, v)


def test_aggregate_formats():
    r = aggregate([fold(0.8), fold(1.0)])
    assert r.mean["test_auc"] == pytest.approx(0.9) and r.std["test_auc"] == pytest.approx(0.1)
    assert r.cell("test_auc") == "0.9000±0.1000"
    r = aggregate([fold(0.9)] * 3)
    assert r.std["val_acc"] == 0.0 and r.row()["val_acc"] == "0.9000±0.0000"
    assert aggregate([fold(0.5)]).std["test_acc"] == 0.0
    with pytest.raises(ValueError):
        aggregate([])


def test_report_renderings():
    r = aggregate([FoldMetrics(0.9, 0.8, 0.7, 0.6), FoldMetrics(1.0, 0.9, 0.8, 0.7)])
    lines = r.to_csv().splitlines()
    assert lines[0] == "fold,test_auc,test_acc,val_auc,val_acc" and lines[-2].startswith("mean,0.950000")
    table = r.to_table("Ours").splitlines()
    assert "Test AUC" in table[0] and table[1].startswith("Ours") and "0.9500±0.0500" in table[1]
