import itertools
import math

import numpy as np
import pytest

from fhirmap.clustering import (
    NOISE,
    ClusterAssignment,
    ClusteringError,
    FeatureMatrix,
    agglomerative,
    calinski_harabasz,
    davies_bouldin,
    dbscan,
    kmeans,
    select_clustering,
    silhouette,
)


# ---------------------------------------------------------------------------
# brute-force oracles (plain python, independent of the library implementations)

def _dist(p, q):
    return math.sqrt(sum((a - b) ** 2 for a, b in zip(p, q)))


def oracle_silhouette(points, labels):
    scores = []
    for i, p in enumerate(points):
        own = [j for j in range(len(points)) if labels[j] == labels[i] and j != i]
        if not own:
            scores.append(0.0)
            continue
        a = sum(_dist(p, points[j]) for j in own) / len(own)
        b = min(
            sum(_dist(p, points[j]) for j in range(len(points)) if labels[j] == c)
            / sum(1 for j in range(len(points)) if labels[j] == c)
            for c in set(labels)
            if c != labels[i]
        )
        m = max(a, b)
        scores.append((b - a) / m if m > 0 else 0.0)
    return sum(scores) / len(scores)


def _centroid(pts):
    d = len(pts[0])
    return [sum(p[i] for p in pts) / len(pts) for i in range(d)]


def oracle_calinski_harabasz(points, labels):
    n = len(points)
    clusters = sorted(set(labels))
    k = len(clusters)
    overall = _centroid(points)
    b = w = 0.0
    for c in clusters:
        pts = [points[j] for j in range(n) if labels[j] == c]
        cent = _centroid(pts)
        b += len(pts) * _dist(cent, overall) ** 2
        w += sum(_dist(p, cent) ** 2 for p in pts)
    return (b / (k - 1)) / (w / (n - k))


def oracle_davies_bouldin(points, labels):
    clusters = sorted(set(labels))
    cents = {}
    scatters = {}
    for c in clusters:
        pts = [points[j] for j in range(len(points)) if labels[j] == c]
        cents[c] = _centroid(pts)
        scatters[c] = sum(_dist(p, cents[c]) for p in pts) / len(pts)
    total = 0.0
    for i in clusters:
        total += max(
            (scatters[i] + scatters[j]) / _dist(cents[i], cents[j])
            for j in clusters
            if j != i
        )
    return total / len(clusters)


def oracle_best_sse(points, k):
    """Exhaustive minimum SSE over all partitions into exactly k non-empty parts."""
    n = len(points)
    best = math.inf
    for labels in itertools.product(range(k), repeat=n):
        if len(set(labels)) != k:
            continue
        sse = 0.0
        for c in range(k):
            pts = [points[j] for j in range(n) if labels[j] == c]
            cent = _centroid(pts)
            sse += sum(_dist(p, cent) ** 2 for p in pts)
        best = min(best, sse)
    return best


def kmeans_sse(matrix, assignment):
    x = matrix.values
    labels = np.asarray(assignment.labels)
    total = 0.0
    for c in set(assignment.labels):
        pts = x[labels == c]
        total += float(np.sum((pts - pts.mean(axis=0)) ** 2))
    return total


# ---------------------------------------------------------------------------

FOUR = FeatureMatrix(("p0", "p1", "p2", "p3"), np.array([[0.0], [0.2], [10.0], [10.2]]))
FOUR_GOLD = ClusterAssignment(FOUR.ids, (0, 0, 1, 1), "gold", {})


def members(assignment):
    return {frozenset(v) for v in assignment.members().values()}


def test_kmeans_separates_two_blobs():
    a = kmeans(FOUR, k=2, seed=0, restarts=10)
    assert members(a) == {frozenset({"p0", "p1"}), frozenset({"p2", "p3"})}


def test_kmeans_k_equals_n_gives_singletons():
    a = kmeans(FOUR, k=4, seed=3)
    assert a.n_clusters() == 4
    assert kmeans_sse(FOUR, a) == 0.0


def test_kmeans_duplicate_rows_stay_together():
    m = FeatureMatrix(("a", "b", "c", "d"), np.array([[1.0], [1.0], [5.0], [9.0]]))
    a = kmeans(m, k=2, seed=1)
    assert a.by_id()["a"] == a.by_id()["b"]


def test_kmeans_k_greater_than_n_rejected():
    with pytest.raises(ClusteringError):
        kmeans(FOUR, k=5)


def test_kmeans_deterministic_given_seed():
    a = kmeans(FOUR, k=2, seed=42)
    b = kmeans(FOUR, k=2, seed=42)
    assert a.labels == b.labels


def blob_points(rng, n, k_true, sigma=1.0):
    centers = rng.normal(scale=3.0, size=(k_true, 2))
    return np.vstack(
        [centers[rng.integers(k_true)] + rng.normal(scale=sigma, size=2) for _ in range(n)]
    )


def test_kmeans_reaches_exhaustive_optimum_small_sets():
    # blob-structured trials, the intended workload for these desk-scale sets
    rng = np.random.default_rng(5)
    misses = 0
    for trial in range(25):
        n = int(rng.integers(4, 9))
        k = int(rng.integers(2, 4))
        pts = blob_points(rng, n, k_true=int(rng.integers(2, 4)))
        m = FeatureMatrix(tuple(f"r{i}" for i in range(n)), pts)
        a = kmeans(m, k=k, seed=trial, restarts=10)
        if kmeans_sse(m, a) > oracle_best_sse(pts.tolist(), k) * (1 + 1e-9):
            misses += 1
    assert misses == 0


def test_agglomerative_average_euclidean_on_four_points():
    a = agglomerative(FOUR, k=2, linkage="average", metric="euclidean")
    assert members(a) == {frozenset({"p0", "p1"}), frozenset({"p2", "p3"})}


def test_agglomerative_k1_and_kn():
    assert agglomerative(FOUR, k=1).n_clusters() == 1
    assert agglomerative(FOUR, k=4).n_clusters() == 4


def test_agglomerative_k_greater_than_n_rejected():
    with pytest.raises(ClusteringError):
        agglomerative(FOUR, k=9)


def test_agglomerative_all_linkages_and_metrics_run():
    rng = np.random.default_rng(8)
    m = FeatureMatrix(tuple(f"r{i}" for i in range(6)), rng.normal(size=(6, 3)))
    for linkage in ("average", "complete", "single"):
        for metric in ("euclidean", "cosine"):
            a = agglomerative(m, k=3, linkage=linkage, metric=metric)
            assert a.n_clusters() == 3


def test_agglomerative_row_permutation_equivalence():
    rng = np.random.default_rng(21)
    pts = rng.normal(size=(7, 3))
    ids = tuple(f"r{i}" for i in range(7))
    base = agglomerative(FeatureMatrix(ids, pts), k=3)
    perm = rng.permutation(7)
    permuted = agglomerative(FeatureMatrix(tuple(ids[i] for i in perm), pts[perm]), k=3)
    assert members(base) == members(permuted)


def test_dbscan_two_blobs():
    a = dbscan(FOUR, eps=0.5, min_pts=2)
    assert a.n_clusters() == 2
    assert a.n_noise() == 0
    assert members(a) == {frozenset({"p0", "p1"}), frozenset({"p2", "p3"})}


def test_dbscan_eps_below_gaps_gives_all_noise():
    m = FeatureMatrix(("a", "b", "c"), np.array([[0.0], [0.2], [0.4]]))
    a = dbscan(m, eps=0.1, min_pts=2)
    assert a.n_clusters() == 0
    assert a.n_noise() == 3
    assert set(a.labels) == {NOISE}


def test_dbscan_one_dense_blob_large_eps():
    a = dbscan(FOUR, eps=100.0, min_pts=2)
    assert a.n_clusters() == 1
    assert a.n_noise() == 0


def test_dbscan_rerun_is_identical():
    rng = np.random.default_rng(3)
    m = FeatureMatrix(tuple(f"r{i}" for i in range(10)), rng.normal(size=(10, 2)))
    assert dbscan(m, 0.8, 2).labels == dbscan(m, 0.8, 2).labels


def test_silhouette_four_point_hand_value():
    # oracle gives 0.97999799...; the quoted 0.9800 is its 4-dp rounding
    expected = oracle_silhouette(FOUR.values.tolist(), list(FOUR_GOLD.labels))
    got = silhouette(FOUR, FOUR_GOLD)
    assert got == pytest.approx(expected, abs=1e-12)
    assert round(got, 4) == 0.98


def test_silhouette_identical_pairs_limit_case():
    m = FeatureMatrix(("a", "b", "c", "d"), np.array([[0.0], [0.0], [5.0], [5.0]]))
    a = ClusterAssignment(m.ids, (0, 0, 1, 1), "gold", {})
    assert silhouette(m, a) == pytest.approx(1.0, abs=1e-12)


def test_silhouette_singletons_score_zero():
    m = FeatureMatrix(("a", "b", "c"), np.array([[0.0], [5.0], [5.2]]))
    a = ClusterAssignment(m.ids, (0, 1, 1), "gold", {})
    expected = oracle_silhouette(m.values.tolist(), [0, 1, 1])
    assert silhouette(m, a) == pytest.approx(expected, abs=1e-12)


def test_silhouette_needs_two_clusters():
    m = FeatureMatrix(("a", "b"), np.array([[0.0], [1.0]]))
    with pytest.raises(ClusteringError):
        silhouette(m, ClusterAssignment(m.ids, (0, 0), "gold", {}))


def test_calinski_harabasz_four_point_hand_value():
    # B = 100, W = 0.04 -> (100/1)/(0.04/2) = 5000
    assert calinski_harabasz(FOUR, FOUR_GOLD) == pytest.approx(5000.0, abs=1e-9)


def test_calinski_harabasz_zero_within_scatter_guarded():
    m = FeatureMatrix(("a", "b", "c", "d"), np.array([[0.0], [0.0], [1.0], [1.0]]))
    a = ClusterAssignment(m.ids, (0, 0, 1, 1), "gold", {})
    with pytest.raises(ClusteringError, match="zero within-scatter"):
        calinski_harabasz(m, a)


def test_davies_bouldin_four_point_hand_value():
    assert davies_bouldin(FOUR, FOUR_GOLD) == pytest.approx(0.02, abs=1e-9)


def test_davies_bouldin_pure_singletons_is_zero():
    m = FeatureMatrix(("a", "b"), np.array([[0.0], [9.0]]))
    a = ClusterAssignment(m.ids, (0, 1), "gold", {})
    assert davies_bouldin(m, a) == 0.0


def test_davies_bouldin_coincident_centroids_rejected():
    m = FeatureMatrix(("a", "b", "c", "d"), np.array([[0.0], [2.0], [1.0], [1.0]]))
    a = ClusterAssignment(m.ids, (0, 0, 1, 1), "gold", {})
    with pytest.raises(ClusteringError, match="coincident centroids"):
        davies_bouldin(m, a)


def test_indices_match_oracles_on_random_data():
    rng = np.random.default_rng(17)
    for _ in range(40):
        n = int(rng.integers(4, 13))
        d = int(rng.integers(1, 5))
        k = int(rng.integers(2, min(n - 1, 4) + 1))
        pts = rng.normal(size=(n, d))
        labels = rng.integers(0, k, size=n)
        labels[:k] = np.arange(k)  # every cluster non-empty
        m = FeatureMatrix(tuple(f"r{i}" for i in range(n)), pts)
        a = ClusterAssignment(m.ids, tuple(int(l) for l in labels), "rand", {})
        pl, ll = pts.tolist(), [int(l) for l in labels]
        assert silhouette(m, a) == pytest.approx(oracle_silhouette(pl, ll), abs=1e-9)
        assert calinski_harabasz(m, a) == pytest.approx(
            oracle_calinski_harabasz(pl, ll), abs=1e-9, rel=1e-9
        )
        assert davies_bouldin(m, a) == pytest.approx(oracle_davies_bouldin(pl, ll), abs=1e-9)


def test_indices_invariant_under_row_permutation():
    rng = np.random.default_rng(29)
    pts = rng.normal(size=(9, 3))
    labels = np.array([0, 1, 2, 0, 1, 2, 0, 1, 2])
    ids = tuple(f"r{i}" for i in range(9))
    m1 = FeatureMatrix(ids, pts)
    a1 = ClusterAssignment(ids, tuple(int(l) for l in labels), "x", {})
    perm = rng.permutation(9)
    m2 = FeatureMatrix(tuple(ids[i] for i in perm), pts[perm])
    a2 = ClusterAssignment(m2.ids, tuple(int(labels[i]) for i in perm), "x", {})
    assert silhouette(m1, a1) == pytest.approx(silhouette(m2, a2), abs=1e-9)
    assert calinski_harabasz(m1, a1) == pytest.approx(calinski_harabasz(m2, a2), rel=1e-9)
    assert davies_bouldin(m1, a1) == pytest.approx(davies_bouldin(m2, a2), abs=1e-9)


def test_noise_points_excluded_from_indices():
    m = FeatureMatrix(("a", "b", "c", "d", "e"), np.array([[0.0], [0.2], [10.0], [10.2], [500.0]]))
    with_noise = ClusterAssignment(m.ids, (0, 0, 1, 1, NOISE), "x", {})
    assert silhouette(m, with_noise) == pytest.approx(silhouette(FOUR, FOUR_GOLD), abs=1e-12)


def test_select_clustering_prefers_k2_on_four_points():
    grid = [
        {"algorithm": "kmeans", "k": 2, "restarts": 10},
        {"algorithm": "kmeans", "k": 3, "restarts": 10},
    ]
    assignment, report = select_clustering(FOUR, grid, seed=0)
    assert assignment.params["k"] == 2
    assert report.cluster_count == 2
    assert report.silhouette == pytest.approx(0.9799979998, abs=1e-9)


def test_select_clustering_single_config():
    grid = [{"algorithm": "agglomerative", "k": 2, "linkage": "average", "metric": "euclidean"}]
    assignment, report = select_clustering(FOUR, grid)
    assert assignment.algorithm == "agglomerative"
    assert report.cluster_count == 2


def test_select_clustering_all_invalid_errors():
    m = FeatureMatrix(("a", "b", "c"), np.array([[0.0], [10.0], [20.0]]))
    grid = [{"algorithm": "dbscan", "eps": 0.1, "min_pts": 2}]
    with pytest.raises(ClusteringError, match="no valid clustering"):
        select_clustering(m, grid)


def test_select_clustering_empty_grid_rejected():
    with pytest.raises(ClusteringError, match="empty configuration grid"):
        select_clustering(FOUR, [])
