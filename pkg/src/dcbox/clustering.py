"""
Classical clustering: Lloyd k-means with k-means++ seeding, agglomerative
clustering with Lance-Williams updates, and exact k-NN graphs
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.distance import cdist

from .exceptions import ClusteringError
from .models import KMeansInit, Linkage, Similarity


logger = logging.getLogger(__name__)

INERTIA_RTOL = 1e-9
SeedLike = Union[int, np.random.Generator, None]


def _rng(seed: SeedLike) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _points(points) -> np.ndarray:
    array = np.asarray(points, dtype=np.float64)
    if array.ndim == 1:
        array = array[:, None]
    if array.ndim != 2 or array.shape[0] == 0:
        raise ClusteringError(f"points must be a non-empty (n, d) matrix, got shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise ClusteringError("points contain NaN or infinite values")
    return array


@dataclass
class ClusterModel:
    """Centroids, hard assignments and the k-means objective they reach"""

    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    n_iter: int = 0
    inertia_history: List[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.k)


@dataclass(frozen=True)
class StopRule:
    """Fires when at most `threshold` of the points changed cluster, or at `max_iter`"""

    threshold: float = 0.0
    max_iter: int = 300

    def should_stop(self, changed: int, n: int, iteration: int) -> bool:
        return changed <= self.threshold * n or iteration >= self.max_iter


def stop_rule_assignment_change(threshold_fraction: float, max_iter: int = 300) -> StopRule:
    if not 0.0 <= threshold_fraction <= 1.0:
        raise ClusteringError(f"threshold must lie in [0, 1], got {threshold_fraction}")
    if max_iter < 1:
        raise ClusteringError(f"max_iter must be at least 1, got {max_iter}")
    return StopRule(threshold=threshold_fraction, max_iter=max_iter)


def assign(points: np.ndarray, centroids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Nearest centroid per point (lowest index on ties) and the squared distance to it"""
    sq_dist = cdist(points, centroids, "sqeuclidean")
    labels = np.argmin(sq_dist, axis=1)
    return labels, sq_dist[np.arange(len(points)), labels]


def kmeanspp_init(points, k: int, seed: SeedLike = 0) -> np.ndarray:
    """k-means++ seeding; picks uniformly once every point coincides with a chosen centroid"""
    points = _points(points)
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ClusteringError(f"k must lie in [1, {n}], got {k}")
    rng = _rng(seed)
    chosen = [int(rng.integers(n))]
    nearest = cdist(points, points[chosen[-1:]], "sqeuclidean")[:, 0]
    for _ in range(1, k):
        total = nearest.sum()
        index = int(rng.integers(n)) if total <= 0 else int(rng.choice(n, p=nearest / total))
        chosen.append(index)
        nearest = np.minimum(nearest, cdist(points, points[index:index + 1], "sqeuclidean")[:, 0])
    return points[chosen].copy()


def _update_centroids(points: np.ndarray, labels: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    k = centroids.shape[0]
    counts = np.bincount(labels, minlength=k)
    sums = np.zeros_like(centroids)
    np.add.at(sums, labels, points)
    updated = centroids.copy()
    filled = counts > 0
    updated[filled] = sums[filled] / counts[filled, None]

    empty = np.flatnonzero(~filled)
    if empty.size:
        # reseed at the points farthest from their own centroid
        spread = np.sum((points - updated[labels]) ** 2, axis=1)
        farthest = np.argsort(-spread, kind="stable")
        for cluster, point in zip(empty, farthest):
            updated[cluster] = points[point]
        logger.debug(f"Reseeded {empty.size} empty clusters")
    return updated


def _lloyd(points: np.ndarray, centroids: np.ndarray, stop: StopRule) -> ClusterModel:
    n = points.shape[0]
    labels, sq = assign(points, centroids)
    inertia = float(sq.sum())
    history = [inertia]
    iteration = 0
    while True:
        iteration += 1
        centroids = _update_centroids(points, labels, centroids)
        new_labels, sq = assign(points, centroids)
        new_inertia = float(sq.sum())
        if new_inertia > inertia + INERTIA_RTOL * max(1.0, abs(inertia)):
            raise ClusteringError(f"k-means inertia increased from {inertia} to {new_inertia} at iteration {iteration}")
        changed = int(np.count_nonzero(new_labels != labels))
        labels, inertia = new_labels, new_inertia
        history.append(inertia)
        if stop.should_stop(changed, n, iteration):
            break
    return ClusterModel(centroids=centroids, assignments=labels, inertia=inertia, n_iter=iteration, inertia_history=history)


def kmeans(
    points,
    k: int,
    init: Union[KMeansInit, str] = KMeansInit.KMEANSPP,
    stop: Optional[StopRule] = None,
    seed: SeedLike = 0,
    initial_centroids: Optional[np.ndarray] = None,
    n_init: int = 1,
) -> ClusterModel:
    """Lloyd iterations; with n_init > 1 the lowest-inertia restart wins (earliest on ties)"""
    points = _points(points)
    n, d = points.shape
    if not 1 <= k <= n:
        raise ClusteringError(f"k must lie in [1, {n}], got {k}")
    init = KMeansInit(init)
    stop = stop or StopRule()
    rng = _rng(seed)

    if init == KMeansInit.PROVIDED:
        if initial_centroids is None:
            raise ClusteringError("init 'provided' needs initial_centroids")
        start = np.asarray(initial_centroids, dtype=np.float64)
        if start.shape != (k, d):
            raise ClusteringError(f"initial centroids must have shape {(k, d)}, got {start.shape}")
        return _lloyd(points, start.copy(), stop)

    best: Optional[ClusterModel] = None
    for _ in range(max(1, n_init)):
        if init == KMeansInit.KMEANSPP:
            start = kmeanspp_init(points, k, rng)
        else:
            start = points[rng.choice(n, size=k, replace=False)].copy()
        model = _lloyd(points, start, stop)
        if best is None or model.inertia < best.inertia:
            best = model
    logger.debug(f"k-means k={k} over {n} points: inertia {best.inertia:.6g} after {best.n_iter} iterations")
    return best


@dataclass
class AgglomerativeState:
    """Current partition of the points plus the merges that produced it"""

    clusters: List[List[int]]
    linkage: Linkage = Linkage.AVERAGE
    merge_history: List[Tuple[int, int]] = field(default_factory=list)
    merged_pairs: List[Tuple[List[int], List[int]]] = field(default_factory=list)

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    @property
    def n_points(self) -> int:
        return sum(len(c) for c in self.clusters)

    def labels(self) -> np.ndarray:
        labels = np.empty(self.n_points, dtype=np.int64)
        for cluster_id, members in enumerate(self.clusters):
            labels[members] = cluster_id
        return labels

    @classmethod
    def singletons(cls, n: int, linkage: Linkage = Linkage.AVERAGE) -> "AgglomerativeState":
        return cls(clusters=[[i] for i in range(n)], linkage=linkage)


def _cluster_distances(points: np.ndarray, clusters: Sequence[List[int]], linkage: Linkage) -> np.ndarray:
    pairwise = cdist(points, points)
    m = len(clusters)
    if all(len(c) == 1 for c in clusters):
        order = [c[0] for c in clusters]
        return pairwise[np.ix_(order, order)].copy()
    reduce = np.min if linkage == Linkage.SINGLE else np.mean
    dist = np.zeros((m, m))
    for a in range(m):
        for b in range(a + 1, m):
            dist[a, b] = dist[b, a] = reduce(pairwise[np.ix_(clusters[a], clusters[b])])
    return dist


def agglomerative(
    points,
    target_clusters: int,
    linkage: Union[Linkage, str] = Linkage.AVERAGE,
    state: Optional[AgglomerativeState] = None,
    max_merges: Optional[int] = None,
) -> AgglomerativeState:
    """
    Merge the closest pair of clusters until `target_clusters` remain

    Starts from singletons or continues from `state`; `max_merges` caps the number
    of merges in this call. Ties go to the lexicographically lowest cluster pair.
    """
    points = _points(points)
    n = points.shape[0]
    linkage = Linkage(linkage)
    if not 1 <= target_clusters <= n:
        raise ClusteringError(f"target_clusters must lie in [1, {n}], got {target_clusters}")
    if state is None:
        clusters = [[i] for i in range(n)]
        history: List[Tuple[int, int]] = []
    else:
        if state.n_points != n:
            raise ClusteringError(f"state covers {state.n_points} points, got {n}")
        clusters = [sorted(c) for c in state.clusters]
        history = list(state.merge_history)

    m = len(clusters)
    merges = max(0, m - target_clusters)
    if max_merges is not None:
        merges = min(merges, max_merges)

    dist = _cluster_distances(points, clusters, linkage)
    upper = np.triu(np.ones((m, m), dtype=bool), k=1)
    dist = np.where(upper, dist, np.inf)
    sizes = np.array([len(c) for c in clusters], dtype=np.float64)
    active = np.ones(m, dtype=bool)
    row_arg = np.argmin(dist, axis=1)
    row_min = dist[np.arange(m), row_arg]

    def refresh(row: int):
        row_arg[row] = np.argmin(dist[row])
        row_min[row] = dist[row, row_arg[row]]

    merged_pairs: List[Tuple[List[int], List[int]]] = []
    for _ in range(merges):
        a = int(np.argmin(row_min))
        b = int(row_arg[a])
        merged_pairs.append((list(clusters[a]), list(clusters[b])))
        history.append((a, b))

        # Lance-Williams update of every distance to the merged cluster, stored in slot a
        others = np.flatnonzero(active)
        others = others[(others != a) & (others != b)]
        d_a = np.minimum(dist[a], dist[:, a])[others]
        d_b = np.minimum(dist[b], dist[:, b])[others]
        if linkage == Linkage.SINGLE:
            merged = np.minimum(d_a, d_b)
        else:
            merged = (sizes[a] * d_a + sizes[b] * d_b) / (sizes[a] + sizes[b])
        below, above = others[others < a], others[others > a]
        dist[below, a] = merged[others < a]
        dist[a, above] = merged[others > a]

        clusters[a] = sorted(clusters[a] + clusters[b])
        clusters[b] = []
        sizes[a] += sizes[b]
        active[b] = False
        dist[b, :] = np.inf
        dist[:, b] = np.inf
        row_min[b] = np.inf

        refresh(a)
        for row in np.flatnonzero(active):
            if row == a:
                continue
            if row_arg[row] in (a, b) or (row < a and dist[row, a] <= row_min[row]):
                refresh(row)

    remaining = [clusters[i] for i in range(m) if active[i]]
    logger.debug(f"Agglomerative ({linkage.value}): {m} -> {len(remaining)} clusters")
    return AgglomerativeState(clusters=remaining, linkage=linkage, merge_history=history, merged_pairs=merged_pairs)


@dataclass
class LocalityGraph:
    """k nearest neighbors per point and their similarity weights"""

    neighbors: np.ndarray
    weights: np.ndarray

    @property
    def k_nn(self) -> int:
        return self.neighbors.shape[1]


def knn_graph(
    points,
    k_nn: int,
    similarity: Union[Similarity, str] = Similarity.GAUSSIAN,
    sigma: float = 1.0,
) -> LocalityGraph:
    """Exact Euclidean k-NN lists (self excluded, lowest index on ties)"""
    points = _points(points)
    n = points.shape[0]
    if not 1 <= k_nn < n:
        raise ClusteringError(f"k_nn must lie in [1, {n - 1}] for {n} points, got {k_nn}")
    if sigma <= 0:
        raise ClusteringError(f"sigma must be positive, got {sigma}")
    sq_dist = cdist(points, points, "sqeuclidean")
    np.fill_diagonal(sq_dist, np.inf)
    neighbors = np.argsort(sq_dist, axis=1, kind="stable")[:, :k_nn]
    if Similarity(similarity) == Similarity.BINARY:
        weights = np.ones(neighbors.shape)
    else:
        weights = np.exp(-np.take_along_axis(sq_dist, neighbors, axis=1) / (2.0 * sigma**2))
    return LocalityGraph(neighbors=neighbors, weights=weights)
