"""
Clustering and non-clustering losses with analytic gradients

Every loss returns a LossTerm whose `grads` are keyed by what they differentiate:
"features", "reconstruction", "augmented_features", "centroids", "logits" or
"assignments". Losses written as sums over points take `reduction="mean"` to
divide by the batch size instead.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Iterable, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.ndimage import shift as ndimage_shift
from scipy.spatial.distance import cdist
from scipy.special import log_softmax, softmax, xlogy

from .clustering import ClusterModel, LocalityGraph
from .exceptions import DegenerateClusterError, LossInputError, ScheduleError, ShapeError
from .models import AlphaMode, AlphaSchedule, AugmentationSpec, GroupSparsityParams, Phase, SelfAugmentationSimilarity


logger = logging.getLogger(__name__)

AFFINITY_EPS = 1e-6
ROW_SUM_TOL = 1e-6
# floor for a cluster's mean soft mass inside a log
MASS_EPS = 1e-12


class LossTerm(NamedTuple):
    value: float
    grads: Dict[str, np.ndarray]


def _reduce(value: float, grads: Dict[str, np.ndarray], n: int, reduction: str) -> LossTerm:
    if reduction == "sum":
        return LossTerm(float(value), grads)
    if reduction == "mean":
        return LossTerm(float(value) / n, {name: g / n for name, g in grads.items()})
    raise LossInputError(f"unknown reduction '{reduction}', expected 'sum' or 'mean'")


def _matrix(values, name: str) -> np.ndarray:
    array = np.asarray(values, dtype=np.float64)
    if array.ndim != 2:
        raise ShapeError(f"{name} must be a 2-D matrix, got shape {array.shape}")
    return array


def reconstruction_mse(inputs: np.ndarray, reconstruction: np.ndarray) -> LossTerm:
    """Mean over the batch of per-sample squared error sums"""
    inputs = np.asarray(inputs, dtype=np.float64)
    reconstruction = np.asarray(reconstruction, dtype=np.float64)
    if inputs.shape != reconstruction.shape:
        raise ShapeError(f"input shape {inputs.shape} does not match reconstruction {reconstruction.shape}")
    n = inputs.shape[0]
    diff = reconstruction - inputs
    return LossTerm(float(np.sum(diff**2) / n), {"reconstruction": 2.0 * diff / n})


def self_augmentation_loss(
    features: np.ndarray,
    augmented_features: np.ndarray,
    similarity: SelfAugmentationSimilarity = SelfAugmentationSimilarity.NEG_SQUARED_DISTANCE,
) -> LossTerm:
    """-(1/N) sum_i s(f(x_i), f(T(x_i)))"""
    f = _matrix(features, "features")
    fa = _matrix(augmented_features, "augmented_features")
    if f.shape != fa.shape:
        raise ShapeError(f"features {f.shape} and augmented features {fa.shape} differ in shape")
    n = f.shape[0]
    if similarity == SelfAugmentationSimilarity.NEG_SQUARED_DISTANCE:
        diff = f - fa
        return LossTerm(
            float(np.sum(diff**2) / n),
            {"features": 2.0 * diff / n, "augmented_features": -2.0 * diff / n},
        )

    for name, rows in (("features", f), ("augmented_features", fa)):
        if np.any(rows < 0) or np.any(np.abs(rows.sum(axis=1) - 1.0) > ROW_SUM_TOL):
            raise LossInputError(f"cross-entropy similarity needs {name} rows that are distributions")
    if np.any(fa <= 0):
        raise LossInputError("cross-entropy similarity needs strictly positive augmented features")
    value = -np.sum(xlogy(f, fa)) / n
    return LossTerm(
        float(value),
        {"features": -np.log(fa) / n, "augmented_features": -f / (fa * n)},
    )


def softmax_backward(probabilities: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Chain a gradient w.r.t. row-softmax outputs back to the logits"""
    return probabilities * (grad - np.sum(grad * probabilities, axis=1, keepdims=True))


def kmeans_loss(
    embeddings: np.ndarray,
    model: ClusterModel,
    indices: Optional[np.ndarray] = None,
    reduction: str = "sum",
) -> LossTerm:
    """
    sum_i ||z_i - mu_{s_i}||^2 under the model's hard assignments

    `indices` picks the rows of `model.assignments` that belong to this batch.
    """
    z = _matrix(embeddings, "embeddings")
    mu = model.centroids
    assignments = model.assignments if indices is None else model.assignments[np.asarray(indices)]
    if len(assignments) != z.shape[0]:
        raise ShapeError(f"{z.shape[0]} embeddings but {len(assignments)} assignments")
    if z.shape[1] != mu.shape[1]:
        raise ShapeError(f"embedding dimension {z.shape[1]} does not match centroid dimension {mu.shape[1]}")
    if len(assignments) and (assignments.min() < 0 or assignments.max() >= mu.shape[0]):
        raise LossInputError(f"assignment ids must lie in [0, {mu.shape[0]}), got {assignments.max()}")
    diff = z - mu[assignments]
    grad_mu = np.zeros_like(mu)
    np.add.at(grad_mu, assignments, -2.0 * diff)
    grads = {"features": 2.0 * diff, "centroids": grad_mu}
    return _reduce(np.sum(diff**2), grads, z.shape[0], reduction)


@dataclass
class SoftAssignment:
    """Student's-t soft assignments plus what their backward pass needs"""

    q: np.ndarray
    nu: float
    embeddings: Optional[np.ndarray] = None
    centroids: Optional[np.ndarray] = None
    sq_dist: Optional[np.ndarray] = None

    @property
    def hard(self) -> np.ndarray:
        return np.argmax(self.q, axis=1)


@dataclass
class TargetDistribution:
    p: np.ndarray


def student_t_assignments(embeddings: np.ndarray, centroids: np.ndarray, nu: float = 1.0) -> SoftAssignment:
    """q_ij proportional to (1 + ||z_i - mu_j||^2 / nu)^(-(nu + 1) / 2), computed in log space"""
    if nu <= 0:
        raise LossInputError(f"nu must be positive, got {nu}")
    z = _matrix(embeddings, "embeddings")
    mu = _matrix(centroids, "centroids")
    if z.shape[1] != mu.shape[1]:
        raise ShapeError(f"embedding dimension {z.shape[1]} does not match centroid dimension {mu.shape[1]}")
    sq_dist = cdist(z, mu, "sqeuclidean")
    logits = -(nu + 1.0) / 2.0 * np.log1p(sq_dist / nu)
    return SoftAssignment(q=softmax(logits, axis=1), nu=nu, embeddings=z, centroids=mu, sq_dist=sq_dist)


def _logit_backward(soft: SoftAssignment, grad_logits: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    if soft.embeddings is None:
        raise LossInputError("soft assignment carries no embeddings to differentiate")
    nu = soft.nu
    grad_sq = grad_logits * (-(nu + 1.0) / (2.0 * (nu + soft.sq_dist)))
    z, mu = soft.embeddings, soft.centroids
    # d(||z_i - mu_j||^2) = 2 (z_i - mu_j)
    grad_z = 2.0 * (grad_sq.sum(axis=1, keepdims=True) * z - grad_sq @ mu)
    grad_mu = -2.0 * (grad_sq.T @ z - grad_sq.sum(axis=0)[:, None] * mu)
    return grad_z, grad_mu


def student_t_backward(soft: SoftAssignment, grad_q: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients for embeddings and centroids given dL/dq"""
    grad_q = np.asarray(grad_q, dtype=np.float64)
    if grad_q.shape != soft.q.shape:
        raise ShapeError(f"gradient shape {grad_q.shape} does not match q {soft.q.shape}")
    return _logit_backward(soft, softmax_backward(soft.q, grad_q))


def _as_q(q: Union[SoftAssignment, np.ndarray]) -> np.ndarray:
    return q.q if isinstance(q, SoftAssignment) else _matrix(q, "q")


def target_distribution(q: Union[SoftAssignment, np.ndarray]) -> TargetDistribution:
    """Square q, divide by soft cluster frequency, renormalize rows"""
    q = _as_q(q)
    frequency = q.sum(axis=0)
    empty = np.flatnonzero(frequency <= 0)
    if empty.size:
        raise DegenerateClusterError(int(empty[0]))
    weight = q**2 / frequency
    return TargetDistribution(p=weight / weight.sum(axis=1, keepdims=True))


def assignment_hardening_kl(
    p: Union[TargetDistribution, np.ndarray],
    q: SoftAssignment,
    reduction: str = "sum",
) -> LossTerm:
    """KL(P || Q) with P held constant"""
    p = p.p if isinstance(p, TargetDistribution) else _matrix(p, "p")
    if p.shape != q.q.shape:
        raise ShapeError(f"P shape {p.shape} does not match Q shape {q.q.shape}")
    if np.any(q.q <= 0):
        raise LossInputError("Q has zero entries; KL(P || Q) is undefined")
    value = np.sum(xlogy(p, p) - xlogy(p, q.q))
    # d/d logits of -sum p log softmax(logits)
    grad_logits = q.q * p.sum(axis=1, keepdims=True) - p
    grad_z, grad_mu = _logit_backward(q, grad_logits)
    return _reduce(value, {"features": grad_z, "centroids": grad_mu}, p.shape[0], reduction)


def balanced_assignments_loss(
    q: Union[SoftAssignment, np.ndarray],
    prior: Optional[Sequence[float]] = None,
) -> LossTerm:
    """KL(G || prior) where G is the mean soft assignment; prior defaults to uniform"""
    qm = _as_q(q)
    n, k = qm.shape
    if prior is None:
        prior = np.full(k, 1.0 / k)
    else:
        prior = np.asarray(prior, dtype=np.float64)
        if prior.shape != (k,):
            raise ShapeError(f"prior must have {k} entries, got shape {prior.shape}")
        if np.any(prior <= 0):
            raise LossInputError("prior must be strictly positive")
        if abs(prior.sum() - 1.0) > ROW_SUM_TOL:
            raise LossInputError(f"prior must sum to 1, got {prior.sum():.6f}")
    g = qm.mean(axis=0)
    value = np.sum(xlogy(g, g / prior))
    grad_q = np.broadcast_to((np.log(np.maximum(g, MASS_EPS) / prior) + 1.0) / n, qm.shape).copy()
    grads = {"assignments": grad_q}
    if isinstance(q, SoftAssignment) and q.embeddings is not None:
        grads["features"], grads["centroids"] = student_t_backward(q, grad_q)
    return LossTerm(float(value), grads)


def locality_preserving_loss(embeddings: np.ndarray, graph: LocalityGraph, reduction: str = "sum") -> LossTerm:
    """sum_i sum_{j in N(i)} s(x_i, x_j) ||z_i - z_j||^2"""
    z = _matrix(embeddings, "embeddings")
    n = z.shape[0]
    if graph.neighbors.shape[0] != n:
        raise LossInputError(f"graph covers {graph.neighbors.shape[0]} points, got {n} embeddings")
    if graph.neighbors.size and (graph.neighbors.min() < 0 or graph.neighbors.max() >= n):
        raise LossInputError(f"neighbor index out of range [0, {n})")
    diff = z[:, None, :] - z[graph.neighbors]
    weighted = graph.weights[:, :, None] * diff
    value = np.sum(graph.weights * np.sum(diff**2, axis=2))
    grad = 2.0 * weighted.sum(axis=1)
    np.add.at(grad, graph.neighbors.reshape(-1), -2.0 * weighted.reshape(-1, z.shape[1]))
    return _reduce(value, {"features": grad}, n, reduction)


def group_sparsity_loss(features: np.ndarray, params: GroupSparsityParams, reduction: str = "sum") -> LossTerm:
    """sum_i sum_g lambda_g ||phi^g(x_i)||; zero subgradient at zero-norm groups"""
    f = _matrix(features, "features")
    if f.shape[1] != params.feature_dim:
        raise LossInputError(f"group sizes sum to {params.feature_dim}, features have {f.shape[1]} columns")
    bounds = np.cumsum([0] + list(params.group_sizes))
    value = 0.0
    grad = np.zeros_like(f)
    for g, weight in enumerate(params.weights):
        block = f[:, bounds[g]:bounds[g + 1]]
        norms = np.linalg.norm(block, axis=1, keepdims=True)
        value += weight * norms.sum()
        safe = np.where(norms > 0, norms, 1.0)
        grad[:, bounds[g]:bounds[g + 1]] = np.where(norms > 0, weight * block / safe, 0.0)
    return _reduce(value, {"features": grad}, f.shape[0], reduction)


def cluster_classification_loss(logits: np.ndarray, mock_labels: Sequence[int]) -> LossTerm:
    """Mean softmax cross-entropy against cluster ids used as labels"""
    logits = _matrix(logits, "logits")
    labels = np.asarray(mock_labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"{n} logit rows but {labels.shape} labels")
    if n == 0:
        return LossTerm(0.0, {"logits": np.zeros((0, k))})
    if labels.min() < 0 or labels.max() >= k:
        raise LossInputError(f"mock labels must lie in [0, {k})")
    log_p = log_softmax(logits, axis=1)
    rows = np.arange(n)
    grad = np.exp(log_p)
    grad[rows, labels] -= 1.0
    return LossTerm(float(-log_p[rows, labels].sum() / n), {"logits": grad / n})


def cluster_affinity(embeddings_a: np.ndarray, embeddings_b: np.ndarray) -> float:
    """1 / (eps + mean pairwise squared distance between two clusters)"""
    return 1.0 / (AFFINITY_EPS + float(cdist(embeddings_a, embeddings_b, "sqeuclidean").mean()))


def agglomerative_loss(
    embeddings: np.ndarray,
    merged_pairs: Iterable[Tuple[Sequence[int], Sequence[int]]],
    reduction: str = "sum",
) -> LossTerm:
    """-sum of affinities of the cluster pairs merged in the latest step"""
    z = _matrix(embeddings, "embeddings")
    n = z.shape[0]
    value = 0.0
    grad = np.zeros_like(z)
    for a, b in merged_pairs:
        a = np.asarray(a, dtype=np.int64)
        b = np.asarray(b, dtype=np.int64)
        if a.size == 0 or b.size == 0:
            raise LossInputError("merged pair contains an empty cluster")
        if min(a.min(), b.min()) < 0 or max(a.max(), b.max()) >= n:
            raise LossInputError(f"merged pair index out of range [0, {n})")
        za, zb = z[a], z[b]
        affinity = cluster_affinity(za, zb)
        value -= affinity
        # d(-A)/d(mean sq dist) = A^2
        scale = affinity**2 * 2.0 / (a.size * b.size)
        np.add.at(grad, a, scale * (b.size * za - zb.sum(axis=0)))
        np.add.at(grad, b, scale * (a.size * zb - za.sum(axis=0)))
    return _reduce(value, {"features": grad}, n, reduction)


def sum_losses(terms: Iterable[LossTerm]) -> Optional[LossTerm]:
    """Add several losses of the same kind; None when there are none"""
    terms = list(terms)
    if not terms:
        return None
    grads: Dict[str, np.ndarray] = {}
    for term in terms:
        for name, g in term.grads.items():
            grads[name] = grads[name] + g if name in grads else g
    return LossTerm(float(sum(t.value for t in terms)), grads)


def combine_losses(
    clustering_loss: Optional[LossTerm],
    non_clustering_loss: Optional[LossTerm],
    alpha: float,
) -> LossTerm:
    """alpha * L_c + (1 - alpha) * L_n, applied to values and gradients alike"""
    if not 0.0 <= alpha <= 1.0:
        raise ScheduleError(f"alpha must lie in [0, 1], got {alpha}")
    value = 0.0
    grads: Dict[str, np.ndarray] = {}
    for weight, term in ((alpha, clustering_loss), (1.0 - alpha, non_clustering_loss)):
        if term is None:
            continue
        value += weight * term.value
        for name, g in term.grads.items():
            grads[name] = grads[name] + weight * g if name in grads else weight * g
    return LossTerm(float(value), grads)


def alpha_at(schedule: AlphaSchedule, phase: Union[Phase, str], step: int) -> float:
    """Weight of the clustering loss at a given phase and step"""
    try:
        phase = Phase(phase)
    except ValueError as e:
        raise ScheduleError(f"unknown phase '{phase}'") from e
    if step < 0:
        raise ScheduleError(f"step must be non-negative, got {step}")
    if phase == Phase.PRETRAIN:
        return 0.0
    if schedule.mode == AlphaMode.PRETRAIN_FINETUNE:
        return 1.0
    if schedule.mode == AlphaMode.JOINT:
        return schedule.alpha_constant
    progress = min(step / schedule.ramp_steps, 1.0)
    return schedule.ramp_start + (schedule.ramp_end - schedule.ramp_start) * progress


def augment(batch: np.ndarray, spec: AugmentationSpec, rng: np.random.Generator) -> np.ndarray:
    """Additive Gaussian noise, plus a random integer shift with zero fill for image batches"""
    batch = np.asarray(batch, dtype=np.float64)
    out = batch
    if batch.ndim == 4 and spec.max_shift_pixels > 0:
        m = spec.max_shift_pixels
        offsets = rng.integers(-m, m + 1, size=(batch.shape[0], 2))
        out = np.stack(
            [
                ndimage_shift(image, (0, dy, dx), order=0, mode="constant", cval=0.0)
                for image, (dy, dx) in zip(batch, offsets)
            ]
        )
    if spec.noise_sigma > 0:
        out = out + rng.normal(0.0, spec.noise_sigma, size=batch.shape)
    return out
