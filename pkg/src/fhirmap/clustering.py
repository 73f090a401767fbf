"""Attribute clustering (k-means, agglomerative, DBSCAN) and quality-driven selection.

All algorithms are deterministic given their inputs: k-means is seeded
(k-means++ then Lloyd, best of ``restarts`` runs by SSE), agglomerative
breaks distance ties by smallest pair index, and DBSCAN scans points in row
order with self-inclusive neighborhoods.  The cosine metric is Euclidean
distance on L2-normalized rows.

Quality indices follow the usual internal-validation definitions; noise
points are excluded before any index is computed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NOISE = -1

KMEANS_MAX_ITER = 300


class ClusteringError(ValueError):
    """Invalid clustering request or a degenerate configuration."""


@dataclass(frozen=True)
class FeatureMatrix:
    """One row of provider embeddings per attribute."""

    ids: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[0] != len(self.ids):
            raise ClusteringError("feature matrix must be n x d with one id per row")
        if not np.all(np.isfinite(self.values)):
            raise ClusteringError("feature matrix contains non-finite values")

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class ClusterAssignment:
    """Row-aligned cluster labels; NOISE (-1) marks unclustered points."""

    ids: tuple[str, ...]
    labels: tuple[int, ...]
    algorithm: str
    params: dict

    def by_id(self) -> dict[str, int]:
        return dict(zip(self.ids, self.labels))

    def n_clusters(self) -> int:
        return len({l for l in self.labels if l != NOISE})

    def n_noise(self) -> int:
        return sum(1 for l in self.labels if l == NOISE)

    def members(self) -> dict[int, list[str]]:
        out: dict[int, list[str]] = {}
        for i, label in zip(self.ids, self.labels):
            out.setdefault(label, []).append(i)
        return out


@dataclass(frozen=True)
class QualityReport:
    silhouette: float
    calinski_harabasz: float
    davies_bouldin: float
    cluster_count: int
    noise_count: int


def _pairwise_distances(x: np.ndarray) -> np.ndarray:
    # direct differences, not the Gram expansion: index tolerances are tight
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=2))


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, np.where(norms == 0, 1.0, norms))


def _sse(x: np.ndarray, labels: np.ndarray, centers: np.ndarray) -> float:
    return float(np.sum((x - centers[labels]) ** 2))


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> list[int]:
    """One k-means++ draw: first center uniform, then D^2-weighted sampling."""
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = np.sum((x - x[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # remaining candidates coincide with chosen centers; pick any unchosen row
            remaining = [i for i in range(n) if i not in chosen]
            pick = int(rng.choice(remaining))
        else:
            pick = int(rng.choice(n, p=d2 / total))
        chosen.append(pick)
        d2 = np.minimum(d2, np.sum((x - x[pick]) ** 2, axis=1))
    return chosen


def _lloyd(x: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    k = centers.shape[0]
    labels = np.zeros(x.shape[0], dtype=np.int64)
    for _ in range(KMEANS_MAX_ITER):
        d2 = np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_labels = np.argmin(d2, axis=1)
        for c in range(k):
            mask = new_labels == c
            if not np.any(mask):
                # empty cluster: reseed with the point farthest from its center
                farthest = int(np.argmax(d2[np.arange(len(x)), new_labels]))
                centers[c] = x[farthest]
                new_labels[farthest] = c
                d2[farthest, c] = 0.0
                mask = new_labels == c
            centers[c] = x[mask].mean(axis=0)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return labels, centers


def kmeans(matrix: FeatureMatrix, k: int, seed: int = 0, restarts: int = 10) -> ClusterAssignment:
    """Seeded k-means++ / Lloyd, returning the best of ``restarts`` runs by SSE.

    Each restart draws an init with k-means++; a draw whose exact center set
    was already evaluated is re-drawn (a few attempts) so restarts explore
    distinct starting points on small inputs.
    """
    n = matrix.n
    if not 2 <= k <= n:
        raise ClusteringError(f"kmeans needs 2 <= k <= n; got k={k}, n={n}")
    x = matrix.values
    best: tuple[float, np.ndarray] | None = None
    seen: set[frozenset[int]] = set()
    for r in range(restarts):
        rng = np.random.default_rng([seed, r])
        init = _kmeans_pp_init(x, k, rng)
        for _ in range(8):
            if frozenset(init) not in seen or len(set(init)) < k:
                break
            init = _kmeans_pp_init(x, k, rng)
        seen.add(frozenset(init))
        labels, centers = _lloyd(x, x[init])  # fancy indexing copies the centers
        sse = _sse(x, labels, centers)
        if best is None or sse < best[0]:
            best = (sse, labels)
    labels = _dense_labels(best[1])
    return ClusterAssignment(
        ids=matrix.ids,
        labels=tuple(int(l) for l in labels),
        algorithm="kmeans",
        params={"k": k, "seed": seed, "restarts": restarts},
    )


def _dense_labels(labels: np.ndarray) -> np.ndarray:
    """Relabel clusters to 0..k-1 in order of first appearance; NOISE passes through."""
    mapping: dict[int, int] = {}
    out = np.empty_like(labels)
    for i, l in enumerate(labels):
        if l == NOISE:
            out[i] = NOISE
            continue
        if l not in mapping:
            mapping[l] = len(mapping)
        out[i] = mapping[l]
    return out


_LINKAGES = {"average", "complete", "single"}
_METRICS = {"euclidean", "cosine"}


def agglomerative(
    matrix: FeatureMatrix, k: int, linkage: str = "average", metric: str = "euclidean"
) -> ClusterAssignment:
    """Greedy pairwise merges until ``k`` clusters remain; ties by smallest pair index."""
    n = matrix.n
    if not 1 <= k <= n:
        raise ClusteringError(f"agglomerative needs 1 <= k <= n; got k={k}, n={n}")
    if linkage not in _LINKAGES:
        raise ClusteringError(f"unknown linkage {linkage!r}")
    if metric not in _METRICS:
        raise ClusteringError(f"unknown metric {metric!r}")
    x = _normalize_rows(matrix.values) if metric == "cosine" else matrix.values
    dist = _pairwise_distances(x)

    clusters: list[list[int]] = [[i] for i in range(n)]
    while len(clusters) > k:
        best_pair = None
        best_d = np.inf
        for a in range(len(clusters)):
            for b in range(a + 1, len(clusters)):
                block = dist[np.ix_(clusters[a], clusters[b])]
                if linkage == "average":
                    d = float(block.mean())
                elif linkage == "complete":
                    d = float(block.max())
                else:
                    d = float(block.min())
                if d < best_d:
                    best_d, best_pair = d, (a, b)
        a, b = best_pair
        clusters[a] = clusters[a] + clusters[b]
        del clusters[b]

    labels = np.empty(n, dtype=np.int64)
    for c, members in enumerate(clusters):
        labels[members] = c
    labels = _dense_labels(labels)
    return ClusterAssignment(
        ids=matrix.ids,
        labels=tuple(int(l) for l in labels),
        algorithm="agglomerative",
        params={"k": k, "linkage": linkage, "metric": metric},
    )


def dbscan(matrix: FeatureMatrix, eps: float, min_pts: int) -> ClusterAssignment:
    """Density clustering; a point is core when its eps-ball (itself included)
    holds at least ``min_pts`` points.  Border points join the first core
    cluster that reaches them, scanning rows in index order."""
    if eps <= 0:
        raise ClusteringError("eps must be positive")
    if min_pts < 1:
        raise ClusteringError("min_pts must be >= 1")
    n = matrix.n
    dist = _pairwise_distances(matrix.values)
    neighbors = [np.flatnonzero(dist[i] <= eps) for i in range(n)]
    core = np.array([len(nb) >= min_pts for nb in neighbors])

    labels = np.full(n, NOISE, dtype=np.int64)
    cluster = 0
    for i in range(n):
        if labels[i] != NOISE or not core[i]:
            continue
        labels[i] = cluster
        queue = list(neighbors[i])
        while queue:
            j = queue.pop(0)
            if labels[j] != NOISE:
                continue
            labels[j] = cluster
            if core[j]:
                queue.extend(int(m) for m in neighbors[j] if labels[m] == NOISE)
        cluster += 1
    return ClusterAssignment(
        ids=matrix.ids,
        labels=tuple(int(l) for l in labels),
        algorithm="dbscan",
        params={"eps": eps, "min_pts": min_pts},
    )


def _clustered_points(matrix: FeatureMatrix, assignment: ClusterAssignment):
    labels = np.asarray(assignment.labels)
    mask = labels != NOISE
    return matrix.values[mask], labels[mask]


def silhouette(matrix: FeatureMatrix, assignment: ClusterAssignment) -> float:
    """Mean silhouette coefficient ``(b - a) / max(a, b)``; noise excluded,
    points in singleton clusters score 0."""
    x, labels = _clustered_points(matrix, assignment)
    clusters = sorted(set(labels.tolist()))
    if len(clusters) < 2:
        raise ClusteringError("silhouette needs at least 2 clusters")
    dist = _pairwise_distances(x)
    scores = np.zeros(len(x))
    for i in range(len(x)):
        own = labels[i]
        own_mask = labels == own
        if own_mask.sum() == 1:
            scores[i] = 0.0
            continue
        a = dist[i, own_mask].sum() / (own_mask.sum() - 1)
        b = min(dist[i, labels == c].mean() for c in clusters if c != own)
        denom = max(a, b)
        scores[i] = (b - a) / denom if denom > 0 else 0.0
    return float(scores.mean())


def calinski_harabasz(matrix: FeatureMatrix, assignment: ClusterAssignment) -> float:
    """Between/within variance ratio ``(B / (k-1)) / (W / (n-k))``; noise excluded."""
    x, labels = _clustered_points(matrix, assignment)
    clusters = sorted(set(labels.tolist()))
    n, k = len(x), len(clusters)
    if not 2 <= k <= n - 1:
        raise ClusteringError(f"calinski_harabasz needs 2 <= k <= n-1; got k={k}, n={n}")
    overall = x.mean(axis=0)
    b = w = 0.0
    for c in clusters:
        pts = x[labels == c]
        centroid = pts.mean(axis=0)
        b += len(pts) * float(np.sum((centroid - overall) ** 2))
        w += float(np.sum((pts - centroid) ** 2))
    if w < 1e-15:
        raise ClusteringError("degenerate zero within-scatter")
    return (b / (k - 1)) / (w / (n - k))


def davies_bouldin(matrix: FeatureMatrix, assignment: ClusterAssignment) -> float:
    """Mean over clusters of the worst ``(s_i + s_j) / d_ij`` ratio; noise excluded."""
    x, labels = _clustered_points(matrix, assignment)
    clusters = sorted(set(labels.tolist()))
    k = len(clusters)
    if k < 2:
        raise ClusteringError("davies_bouldin needs at least 2 clusters")
    centroids = np.array([x[labels == c].mean(axis=0) for c in clusters])
    scatter = np.array(
        [float(np.linalg.norm(x[labels == c] - centroids[i], axis=1).mean())
         for i, c in enumerate(clusters)]
    )
    total = 0.0
    for i in range(k):
        worst = 0.0
        for j in range(k):
            if i == j:
                continue
            d = float(np.linalg.norm(centroids[i] - centroids[j]))
            if d < 1e-15:
                raise ClusteringError("coincident centroids")
            worst = max(worst, (scatter[i] + scatter[j]) / d)
        total += worst
    return total / k


def quality_report(matrix: FeatureMatrix, assignment: ClusterAssignment) -> QualityReport:
    return QualityReport(
        silhouette=silhouette(matrix, assignment),
        calinski_harabasz=calinski_harabasz(matrix, assignment),
        davies_bouldin=davies_bouldin(matrix, assignment),
        cluster_count=assignment.n_clusters(),
        noise_count=assignment.n_noise(),
    )


def default_grid() -> list[dict]:
    """Search grid sized for a few dozen attributes."""
    grid: list[dict] = []
    grid += [{"algorithm": "kmeans", "k": k, "restarts": 10} for k in range(4, 13)]
    grid += [
        {"algorithm": "agglomerative", "k": k, "linkage": "average", "metric": "cosine"}
        for k in range(4, 13)
    ]
    grid += [
        {"algorithm": "dbscan", "eps": eps, "min_pts": m}
        for eps in (0.3, 0.5, 0.7)
        for m in (2, 3)
    ]
    return grid


def run_config(matrix: FeatureMatrix, config: dict, seed: int = 0) -> ClusterAssignment:
    algorithm = config.get("algorithm")
    if algorithm == "kmeans":
        return kmeans(matrix, config["k"], seed=config.get("seed", seed),
                      restarts=config.get("restarts", 10))
    if algorithm == "agglomerative":
        return agglomerative(matrix, config["k"], linkage=config.get("linkage", "average"),
                             metric=config.get("metric", "euclidean"))
    if algorithm == "dbscan":
        return dbscan(matrix, config["eps"], config["min_pts"])
    raise ClusteringError(f"unknown clustering algorithm: {algorithm!r}")


def _competition_ranks(values: list[float], descending: bool) -> list[int]:
    ranks = []
    for v in values:
        if descending:
            better = sum(1 for o in values if o > v)
        else:
            better = sum(1 for o in values if o < v)
        ranks.append(1 + better)
    return ranks


def select_clustering(
    matrix: FeatureMatrix, grid: list[dict], seed: int = 0
) -> tuple[ClusterAssignment, QualityReport]:
    """Evaluate every config in the grid and pick the best by rank aggregation.

    Each valid clustering is ranked on silhouette (higher better),
    Calinski-Harabasz (higher better), and Davies-Bouldin (lower better);
    the lowest rank sum wins, ties going to the higher silhouette.  Configs
    that cannot be scored (all noise, too few or too many clusters,
    degenerate scatter) are skipped; if nothing valid remains the error
    lists everything attempted.
    """
    if not grid:
        raise ClusteringError("empty configuration grid")
    if matrix.n < 3:
        raise ClusteringError("selection needs at least 3 points")
    candidates: list[tuple[dict, ClusterAssignment, QualityReport]] = []
    attempted: list[str] = []
    for config in grid:
        attempted.append(str(config))
        try:
            assignment = run_config(matrix, config, seed=seed)
            report = quality_report(matrix, assignment)
        except ClusteringError:
            continue
        candidates.append((config, assignment, report))
    if not candidates:
        raise ClusteringError(
            "no valid clustering in grid; attempted: " + "; ".join(attempted)
        )
    sil = [r.silhouette for _, _, r in candidates]
    ch = [r.calinski_harabasz for _, _, r in candidates]
    db = [r.davies_bouldin for _, _, r in candidates]
    rank_sums = [
        s + c + d
        for s, c, d in zip(
            _competition_ranks(sil, descending=True),
            _competition_ranks(ch, descending=True),
            _competition_ranks(db, descending=False),
        )
    ]
    best_idx = min(
        range(len(candidates)), key=lambda i: (rank_sums[i], -sil[i], i)
    )
    _, assignment, report = candidates[best_idx]
    return assignment, report
