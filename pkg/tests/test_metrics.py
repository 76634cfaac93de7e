"""
Tests for NMI, ACC and the Hungarian matching
"""

import itertools

import numpy as np
import pytest
from sklearn.metrics import normalized_mutual_info_score

from dcbox.exceptions import ShapeError
from dcbox.metrics import acc, contingency, hungarian, nmi


def brute_force_acc(pred, truth):
    k = int(max(pred.max(), truth.max())) + 1
    best = 0
    for perm in itertools.permutations(range(k)):
        best = max(best, int(np.sum(np.asarray(perm)[pred] == truth)))
    return best / len(truth)


def test_acc_and_nmi_match_brute_force():
    """ACC equals exhaustive permutation search; NMI ignores label names"""
    rng = np.random.default_rng(0)
    for _ in range(200):
        k = int(rng.integers(1, 7))
        n = int(rng.integers(1, 30))
        pred = rng.integers(0, k, size=n)
        truth = rng.integers(0, k, size=n)
        assert acc(pred, truth) == brute_force_acc(pred, truth)

        renamed = rng.permutation(k)[pred]
        assert nmi(renamed, truth) == pytest.approx(nmi(pred, truth), abs=1e-12)
        assert acc(renamed, truth) == acc(pred, truth)


def test_identical_labelings():
    """Perfect agreement up to renaming scores 1"""
    truth = np.array([0, 0, 1, 1, 2, 2])
    pred = np.array([2, 2, 0, 0, 1, 1])
    assert nmi(pred, truth) == pytest.approx(1.0)
    assert acc(pred, truth) == 1.0


def test_constant_prediction():
    """A single cluster carries no information"""
    truth = np.array([0, 1, 0, 1])
    assert nmi(np.zeros(4, dtype=int), truth) == 0.0
    assert acc(np.zeros(4, dtype=int), truth) == 0.5


def test_nmi_uses_geometric_normalization():
    """Agrees with scikit-learn's geometric-mean NMI"""
    rng = np.random.default_rng(1)
    pred = rng.integers(0, 4, size=100)
    truth = rng.integers(0, 3, size=100)
    expected = normalized_mutual_info_score(truth, pred, average_method="geometric")
    assert nmi(pred, truth) == pytest.approx(expected, abs=1e-10)


def test_more_clusters_than_classes():
    """Unmatched clusters count as errors"""
    pred = np.array([0, 1, 2, 3])
    truth = np.array([0, 0, 1, 1])
    assert acc(pred, truth) == 0.5


def test_contingency_marginals():
    """Rows are predicted clusters, columns true classes"""
    table = contingency([0, 0, 1], [1, 1, 1])
    assert table.matrix.tolist() == [[2], [1]]
    assert table.total == 3
    assert table.pred_marginal.tolist() == [2, 1]
    assert table.true_marginal.tolist() == [3]


def test_hungarian_rectangular():
    """Rectangular costs are padded; only real cells are returned"""
    matching = hungarian([[4.0, 1.0, 3.0], [2.0, 0.0, 5.0]])
    assert matching.total_cost == pytest.approx(2.0 + 1.0)
    assert len(matching.rows) == 2


def test_hungarian_two_by_two():
    """[[1, 2], [2, 1]] is matched along the diagonal"""
    matching = hungarian([[1.0, 2.0], [2.0, 1.0]])
    assert list(zip(matching.rows.tolist(), matching.cols.tolist())) == [(0, 0), (1, 1)]
    assert matching.total_cost == pytest.approx(2.0)


def test_hungarian_matches_permutation_search():
    """Random integer costs up to 6x6 reach the brute-force minimum"""
    rng = np.random.default_rng(2)
    for _ in range(100):
        k = int(rng.integers(1, 7))
        cost = rng.integers(0, 20, size=(k, k)).astype(float)
        best = min(cost[range(k), list(perm)].sum() for perm in itertools.permutations(range(k)))
        matching = hungarian(cost)
        assert sorted(matching.rows.tolist()) == list(range(k))
        assert sorted(matching.cols.tolist()) == list(range(k))
        assert matching.total_cost == pytest.approx(best)


def test_acc_floor_on_balanced_classes():
    """Any prediction into at most k clusters scores at least 1/k on balanced classes"""
    rng = np.random.default_rng(3)
    for _ in range(100):
        k = int(rng.integers(2, 6))
        truth = np.repeat(np.arange(k), int(rng.integers(1, 6)))
        pred = rng.integers(0, int(rng.integers(1, k + 1)), size=truth.size)
        assert acc(pred, truth) >= 1.0 / k - 1e-12


def test_label_errors():
    """Mismatched lengths and empty inputs are rejected"""
    with pytest.raises(ShapeError, match="labels"):
        nmi([0, 1], [0])
    with pytest.raises(ShapeError):
        acc([], [])
    with pytest.raises(ValueError):
        hungarian([[-1.0]])
