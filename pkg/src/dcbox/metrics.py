"""
Clustering evaluation: NMI and ACC
"""

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import entropy
from sklearn.metrics import mutual_info_score
from sklearn.metrics.cluster import contingency_matrix

from .exceptions import ShapeError


@dataclass
class Contingency:
    """Co-occurrence counts, predicted clusters as rows and true classes as columns"""

    matrix: np.ndarray

    @property
    def total(self) -> int:
        return int(self.matrix.sum())

    @property
    def pred_marginal(self) -> np.ndarray:
        return self.matrix.sum(axis=1)

    @property
    def true_marginal(self) -> np.ndarray:
        return self.matrix.sum(axis=0)


@dataclass
class Assignment:
    rows: np.ndarray
    cols: np.ndarray
    total_cost: float


def _labels(pred: Sequence[int], truth: Sequence[int]):
    pred = np.asarray(pred).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction has {pred.size} labels, truth has {truth.size}")
    if pred.size == 0:
        raise ShapeError("need at least one label")
    return pred, truth


def contingency(pred: Sequence[int], truth: Sequence[int]) -> Contingency:
    pred, truth = _labels(pred, truth)
    return Contingency(matrix=contingency_matrix(pred, truth))


def nmi(pred: Sequence[int], truth: Sequence[int]) -> float:
    """I(pred; truth) / sqrt(H(pred) H(truth)), 0 when either entropy is 0"""
    table = contingency(pred, truth)
    h_pred = entropy(table.pred_marginal)
    h_true = entropy(table.true_marginal)
    if h_pred <= 0 or h_true <= 0:
        return 0.0
    mutual = mutual_info_score(None, None, contingency=table.matrix)
    return float(np.clip(mutual / np.sqrt(h_pred * h_true), 0.0, 1.0))


def hungarian(cost) -> Assignment:
    """Minimum-cost matching; rectangular inputs are zero-padded to square first"""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.size == 0:
        raise ShapeError(f"cost must be a non-empty matrix, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)) or np.any(cost < 0):
        raise ValueError("cost entries must be finite and non-negative")
    size = max(cost.shape)
    padded = np.zeros((size, size))
    padded[: cost.shape[0], : cost.shape[1]] = cost
    rows, cols = linear_sum_assignment(padded)
    real = (rows < cost.shape[0]) & (cols < cost.shape[1])
    rows, cols = rows[real], cols[real]
    return Assignment(rows=rows, cols=cols, total_cost=float(cost[rows, cols].sum()))


def acc(pred: Sequence[int], truth: Sequence[int]) -> float:
    """Best one-to-one cluster-to-class accuracy"""
    table = contingency(pred, truth)
    counts = table.matrix
    matching = hungarian(counts.max() - counts)
    return float(counts[matching.rows, matching.cols].sum() / table.total)
