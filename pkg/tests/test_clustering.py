"""
Tests for k-means, agglomerative clustering and k-NN graphs
"""

import itertools

import numpy as np
import pytest
from scipy.cluster.hierarchy import fcluster, linkage as scipy_linkage

from dcbox.clustering import (
    AgglomerativeState,
    StopRule,
    agglomerative,
    assign,
    kmeans,
    kmeanspp_init,
    knn_graph,
    stop_rule_assignment_change,
)
from dcbox.exceptions import ClusteringError


def exhaustive_optimum(points, k):
    """Lowest within-cluster sum of squares over every labeling"""
    n = points.shape[0]
    labelings = np.array(list(itertools.product(range(k), repeat=n)))
    total = np.sum(points**2)
    best = np.full(len(labelings), total)
    for cluster in range(k):
        mask = (labelings == cluster).astype(np.float64)
        counts = mask.sum(axis=1)
        sums = mask @ points
        filled = counts > 0
        best[filled] -= np.sum(sums[filled] ** 2, axis=1) / counts[filled]
    return float(best.min())


def partition(labels):
    groups = {}
    for index, label in enumerate(labels):
        groups.setdefault(label, set()).add(index)
    return {frozenset(g) for g in groups.values()}


def test_kmeans_matches_exhaustive_optimum():
    """Best of 20 seeds reaches the optimal inertia on tiny instances"""
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(2, 9))
        k = int(rng.integers(1, min(3, n) + 1))
        points = rng.normal(size=(n, 2))
        best = min(kmeans(points, k, seed=seed).inertia for seed in range(20))
        assert best == pytest.approx(exhaustive_optimum(points, k), rel=1e-9, abs=1e-12)


def test_kmeans_separated_blobs():
    """Well separated blobs are recovered exactly"""
    rng = np.random.default_rng(1)
    centers = np.array([[0.0, 0.0], [20.0, 0.0], [0.0, 20.0]])
    truth = np.repeat(np.arange(3), 30)
    points = centers[truth] + rng.normal(size=(90, 2))
    model = kmeans(points, 3, seed=0, n_init=5)
    assert partition(model.assignments) == partition(truth)
    assert sorted(model.sizes().tolist()) == [30, 30, 30]


def test_kmeans_inertia_never_increases():
    """The recorded inertia is non-increasing over Lloyd iterations"""
    points = np.random.default_rng(2).normal(size=(200, 3))
    model = kmeans(points, 5, init="random", seed=3)
    history = np.array(model.inertia_history)
    assert np.all(np.diff(history) <= 1e-9 * history[:-1])
    assert model.inertia == pytest.approx(history[-1])
    assert model.n_iter == len(history) - 1


def test_kmeans_is_deterministic():
    """Same seed, same result"""
    points = np.random.default_rng(4).normal(size=(50, 2))
    a = kmeans(points, 4, seed=7)
    b = kmeans(points, 4, seed=7)
    assert np.array_equal(a.assignments, b.assignments)
    assert np.array_equal(a.centroids, b.centroids)


def test_kmeans_provided_init():
    """Provided centroids start Lloyd directly"""
    points = np.array([[0.0], [1.0], [10.0], [11.0]])
    model = kmeans(points, 2, init="provided", initial_centroids=np.array([[0.0], [10.0]]))
    assert np.allclose(np.sort(model.centroids[:, 0]), [0.5, 10.5])
    assert model.inertia == pytest.approx(1.0)

    with pytest.raises(ClusteringError, match="initial_centroids"):
        kmeans(points, 2, init="provided")
    with pytest.raises(ClusteringError, match="shape"):
        kmeans(points, 2, init="provided", initial_centroids=np.zeros((3, 1)))


def test_kmeans_empty_cluster_is_reseeded():
    """A centroid that attracts no points moves to a far point"""
    points = np.array([[0.0], [0.1], [5.0], [5.1]])
    model = kmeans(points, 2, init="provided", initial_centroids=np.array([[2.5], [100.0]]))
    assert sorted(model.sizes().tolist()) == [2, 2]


def test_kmeans_edge_cases():
    """k = n gives zero inertia; k = 1 gives the overall mean; 1-D input is a column"""
    points = np.array([1.0, 2.0, 4.0])
    assert kmeans(points, 3).inertia == pytest.approx(0.0)
    single = kmeans(points, 1)
    assert single.centroids[0, 0] == pytest.approx(7.0 / 3.0)
    with pytest.raises(ClusteringError):
        kmeans(points, 4)
    with pytest.raises(ClusteringError, match="NaN"):
        kmeans(np.array([[0.0], [np.nan]]), 1)


def test_kmeanspp_samples_proportional_to_squared_distance():
    """First pick is uniform; the second follows D^2 from the first"""
    points = np.array([[0.0], [1.0], [3.0], [7.0]])
    trials = 8000
    firsts = np.zeros(4)
    pairs = np.zeros((4, 4))
    for seed in range(trials):
        first, second = kmeanspp_init(points, 2, seed=seed)[:, 0]
        i = int(np.flatnonzero(points[:, 0] == first)[0])
        j = int(np.flatnonzero(points[:, 0] == second)[0])
        firsts[i] += 1
        pairs[i, j] += 1
    assert np.allclose(firsts / trials, 0.25, atol=0.03)
    sq = (points - points.T) ** 2
    expected = sq / sq.sum(axis=1, keepdims=True)
    assert np.allclose(pairs / pairs.sum(axis=1, keepdims=True), expected, atol=0.04)


def test_kmeanspp_coincident_points():
    """Seeding works when every point is identical"""
    centroids = kmeanspp_init(np.ones((5, 2)), 3, seed=0)
    assert centroids.shape == (3, 2)
    assert np.all(centroids == 1.0)


def test_assign_ties_go_to_lowest_index():
    """Equidistant centroids: the first one wins"""
    labels, sq = assign(np.array([[0.0]]), np.array([[-1.0], [1.0]]))
    assert labels[0] == 0
    assert sq[0] == 1.0


def test_stop_rule():
    """Stops at the change threshold or the iteration cap"""
    rule = stop_rule_assignment_change(0.1, max_iter=5)
    assert rule.should_stop(changed=1, n=10, iteration=1)
    assert not rule.should_stop(changed=2, n=10, iteration=1)
    assert rule.should_stop(changed=9, n=10, iteration=5)
    assert StopRule().should_stop(0, 10, 1)
    with pytest.raises(ClusteringError):
        stop_rule_assignment_change(1.5)
    with pytest.raises(ClusteringError):
        stop_rule_assignment_change(0.1, max_iter=0)


@pytest.mark.parametrize("method", ["average", "single"])
@pytest.mark.parametrize("seed", range(5))
def test_agglomerative_matches_scipy(method, seed):
    """Same partition as scipy's hierarchical clustering cut at k clusters"""
    points = np.random.default_rng(seed).normal(size=(25, 2))
    for k in [1, 3, 7]:
        state = agglomerative(points, k, method)
        reference = fcluster(scipy_linkage(points, method=method), k, criterion="maxclust")
        assert state.n_clusters == k
        assert partition(state.labels()) == partition(reference)


def test_agglomerative_continues_from_state():
    """Merging in two calls equals merging in one"""
    points = np.random.default_rng(5).normal(size=(30, 3))
    direct = agglomerative(points, 4)
    halfway = agglomerative(points, 12)
    resumed = agglomerative(points, 4, state=halfway)
    assert partition(resumed.labels()) == partition(direct.labels())
    assert len(resumed.merge_history) == 30 - 4


def test_agglomerative_max_merges():
    """max_merges caps the merges of one call and reports the merged pairs"""
    points = np.random.default_rng(6).normal(size=(10, 2))
    state = agglomerative(points, 1, max_merges=3)
    assert state.n_clusters == 7
    assert len(state.merged_pairs) == 3
    for a, b in state.merged_pairs:
        assert a and b and not set(a) & set(b)


def test_agglomerative_first_merge_is_closest_pair():
    """The first merge joins the two nearest points"""
    points = np.array([[0.0], [10.0], [10.5], [30.0]])
    state = agglomerative(points, 3)
    assert state.merged_pairs == [([1], [2])]


@pytest.mark.parametrize("method", ["average", "single"])
def test_agglomerative_ignores_point_order(method):
    """Reordering the input points leaves the merge sequence unchanged"""
    rng = np.random.default_rng(7)
    points = rng.normal(size=(20, 2))
    perm = rng.permutation(20)

    def merges(state, names):
        return [
            (frozenset(names[i] for i in a), frozenset(names[i] for i in b))
            for a, b in state.merged_pairs
        ]

    direct = merges(agglomerative(points, 1, method), np.arange(20))
    shuffled = merges(agglomerative(points[perm], 1, method), perm)
    assert len(direct) == 19
    assert [set(pair) for pair in shuffled] == [set(pair) for pair in direct]


def test_agglomerative_errors():
    """Targets out of range and mismatched states are rejected"""
    points = np.zeros((4, 1))
    with pytest.raises(ClusteringError):
        agglomerative(points, 5)
    with pytest.raises(ClusteringError, match="state covers"):
        agglomerative(points, 1, state=AgglomerativeState.singletons(3))


def test_knn_graph():
    """Self is excluded; weights follow the chosen similarity"""
    points = np.array([[0.0], [1.0], [3.0], [7.0]])
    graph = knn_graph(points, 2, "gaussian", sigma=1.0)
    assert graph.k_nn == 2
    assert graph.neighbors[0].tolist() == [1, 2]
    assert graph.neighbors[3].tolist() == [2, 1]
    assert graph.weights[0, 0] == pytest.approx(np.exp(-0.5))
    assert not np.any(graph.neighbors == np.arange(4)[:, None])

    binary = knn_graph(points, 1, "binary")
    assert np.all(binary.weights == 1.0)
    with pytest.raises(ClusteringError):
        knn_graph(points, 4)
