"""
Crowd statistics
Object scales and their coefficient of variation, N-nearest-neighbour distances,
1-D k-means, the Dunn validity index and the CV / DVI difficulty buckets.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from services.errors import DegenerateClusteringError, UsageError
from services.tools.annotation_tools import BBoxRecord

logger = logging.getLogger(__name__)

# Left edges of buckets 1..n; bucket 0 starts at 0
CV_BUCKET_EDGES = (0.2, 0.4, 0.6, 0.8)
DVI_BUCKET_EDGES = (1.0, 2.0, 3.0)

SCALE_BIN_WIDTH = 2.0
DISTANCE_BIN_WIDTH = 5.0

NEIGHBOURS = 2
CLUSTERS = 2
KMEANS_RESTARTS = 10
KMEANS_MAX_ITER = 300


@dataclass
class ScaleStats:
    scales: np.ndarray
    mean: float
    std: float
    cv: float


def object_scales(records: Sequence[BBoxRecord]) -> ScaleStats:
    """Population statistics of (bb_width + bb_height) / 2 over the boxes"""
    if not records:
        raise UsageError("object_scales needs at least one box")
    scales = np.array([r.scale for r in records], dtype=np.float64)
    mean = float(scales.mean())
    std = float(scales.std())
    if mean <= 0:
        raise UsageError("coefficient of variation is undefined for a zero mean scale")
    return ScaleStats(scales=scales, mean=mean, std=std, cv=std / mean)


def knn_mean_distance(points, n: int = NEIGHBOURS) -> np.ndarray:
    """Per point, the mean Euclidean distance to its n nearest other points"""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if n < 1:
        raise UsageError(f"neighbour count must be at least 1, got {n}")
    if len(points) < n + 1:
        raise UsageError(f"{n} nearest neighbours need at least {n + 1} points, got {len(points)}")
    distances, _ = cKDTree(points).query(points, k=n + 1)
    return distances[:, 1:].mean(axis=1)


# K-means on one dimension

@dataclass
class Clustering:
    k: int
    assignments: np.ndarray
    centers: np.ndarray
    wcss: float

    def members(self, values) -> List[np.ndarray]:
        values = np.asarray(values, dtype=np.float64)
        return [values[self.assignments == j] for j in range(self.k)]


def _assign(values: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # argmin takes the lowest index on ties
    return np.argmin(np.abs(values[:, None] - centers[None, :]), axis=1)


def _centers(values: np.ndarray, assignments: np.ndarray, k: int) -> np.ndarray:
    return np.array([values[assignments == j].mean() for j in range(k)])


def _repair_empty(values: np.ndarray, assignments: np.ndarray, centers: np.ndarray, k: int) -> np.ndarray:
    """Refill empty clusters with the point farthest from its centre, taken from a cluster that can spare it"""
    assignments = assignments.copy()
    counts = np.bincount(assignments, minlength=k)
    for empty in np.flatnonzero(counts == 0):
        donors = counts[assignments] >= 2
        distance = np.where(donors, np.abs(values - centers[assignments]), -1.0)
        moved = int(np.argmax(distance))
        counts[assignments[moved]] -= 1
        assignments[moved] = empty
        counts[empty] += 1
    return assignments


def _wcss(values: np.ndarray, assignments: np.ndarray, centers: np.ndarray) -> float:
    return float(np.sum((values - centers[assignments]) ** 2))


def _lloyd(values: np.ndarray, centers: np.ndarray, max_iter: int) -> Tuple[np.ndarray, np.ndarray]:
    k = len(centers)
    assignments = _repair_empty(values, _assign(values, centers), centers, k)
    for _ in range(max_iter):
        centers = _centers(values, assignments, k)
        updated = _repair_empty(values, _assign(values, centers), centers, k)
        if np.array_equal(updated, assignments):
            break
        assignments = updated
    return assignments, _centers(values, assignments, k)


def _best_two_split(values: np.ndarray) -> np.ndarray:
    """Centres of the contiguous 2-partition of the sorted values with the lowest WCSS"""
    ordered = np.sort(values)
    n = len(ordered)
    sizes = np.arange(1, n, dtype=np.float64)
    left_sum = np.cumsum(ordered)[:-1]
    left_sq = np.cumsum(ordered ** 2)[:-1]
    right_sum = ordered.sum() - left_sum
    right_sq = np.sum(ordered ** 2) - left_sq
    cost = (left_sq - left_sum ** 2 / sizes) + (right_sq - right_sum ** 2 / (n - sizes))
    split = int(np.argmin(cost)) + 1
    return np.array([ordered[:split].mean(), ordered[split:].mean()])


def kmeans_1d(values, k: int = CLUSTERS, restarts: int = KMEANS_RESTARTS, seed: int = 0,
              max_iter: int = KMEANS_MAX_ITER) -> Clustering:
    """
    Lloyd's algorithm, best of `restarts` seeded initialisations by WCSS.

    For k=2 one extra run starts from the optimal contiguous split of the sorted values,
    which in one dimension is the global optimum. Clusters are relabelled so centres ascend.
    """
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if k < 1:
        raise UsageError(f"k must be at least 1, got {k}")
    if k > len(values):
        raise UsageError(f"k={k} exceeds the number of values ({len(values)})")
    if restarts < 1:
        raise UsageError(f"restarts must be at least 1, got {restarts}")

    rng = np.random.default_rng(seed)
    starts = [np.sort(values[rng.choice(len(values), size=k, replace=False)]) for _ in range(restarts)]
    if k == 2 and len(values) >= 2:
        starts.append(_best_two_split(values))

    best = None
    for start in starts:
        assignments, centers = _lloyd(values, start, max_iter)
        score = _wcss(values, assignments, centers)
        if best is None or score < best[0]:
            best = (score, assignments, centers)

    score, assignments, centers = best
    order = np.argsort(centers, kind='stable')
    relabel = np.empty(k, dtype=int)
    relabel[order] = np.arange(k)
    return Clustering(k=k, assignments=relabel[assignments], centers=centers[order], wcss=score)


def _min_gap(a: np.ndarray, b: np.ndarray) -> float:
    """Smallest |x - y| with x in a, y in b"""
    b = np.sort(b)
    positions = np.searchsorted(b, a)
    left = np.abs(a - b[np.clip(positions - 1, 0, len(b) - 1)])
    right = np.abs(b[np.clip(positions, 0, len(b) - 1)] - a)
    return float(min(left.min(), right.min()))


def dunn_index(values, clustering: Clustering) -> float:
    """Single-linkage separation over the largest cluster diameter"""
    groups = [g for g in clustering.members(values) if len(g)]
    if len(groups) < 2:
        raise DegenerateClusteringError("Dunn index needs at least two non-empty clusters")

    diameter = max(float(g.max() - g.min()) for g in groups)
    if diameter == 0:
        raise DegenerateClusteringError("every cluster has zero diameter, Dunn index is undefined")

    separation = min(_min_gap(groups[i], groups[j])
                     for i in range(len(groups)) for j in range(i + 1, len(groups)))
    return separation / diameter


# Buckets and histograms

def _bucket(value: float, edges, name: str) -> int:
    if value is None or not np.isfinite(value) or value < 0:
        raise UsageError(f"{name} must be a finite non-negative number, got {value}")
    return int(np.searchsorted(edges, value, side='right'))


def bucket_cv(cv: float) -> int:
    """0..4 over [0,0.2) [0.2,0.4) [0.4,0.6) [0.6,0.8) [0.8,inf)"""
    return _bucket(cv, CV_BUCKET_EDGES, 'cv')


def bucket_dvi(dvi: float) -> int:
    """0..3 over [0,1) [1,2) [2,3) [3,inf)"""
    return _bucket(dvi, DVI_BUCKET_EDGES, 'dvi')


def bucket_label(edges: Sequence[float], bucket: int) -> str:
    left = 0.0 if bucket == 0 else edges[bucket - 1]
    right = edges[bucket] if bucket < len(edges) else float('inf')
    return f"[{left:g},{right:g})"


def histogram(values, bin_width: float) -> List[Tuple[float, int]]:
    """(bin_left, count) pairs over fixed-width bins anchored at 0, empty bins included"""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if bin_width <= 0:
        raise UsageError(f"bin width must be positive, got {bin_width}")
    if values.size == 0:
        return []
    if np.any(values < 0):
        raise UsageError("histogram values must be non-negative")
    index = np.floor(values / bin_width).astype(int)
    counts = np.bincount(index)
    return [(float(i * bin_width), int(c)) for i, c in enumerate(counts)]


# Per-image report

@dataclass
class CrowdStatsReport:
    image: str
    object_count: int
    scale_mean: float
    scale_std: float
    cv: float
    cv_bucket: int
    dvi: Optional[float] = None
    dvi_bucket: Optional[int] = None
    cluster_centers: Optional[List[float]] = None
    flag: Optional[str] = None
    scale_histogram: List[Tuple[float, int]] = field(default_factory=list)
    distance_histogram: List[Tuple[float, int]] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            'image': self.image,
            'object_count': self.object_count,
            'scale_mean': self.scale_mean,
            'scale_std': self.scale_std,
            'cv': self.cv,
            'cv_bucket': self.cv_bucket,
            'dvi': self.dvi,
            'dvi_bucket': self.dvi_bucket,
            'cluster_centers': self.cluster_centers,
            'flag': self.flag,
            'scale_histogram': [[left, count] for left, count in self.scale_histogram],
            'distance_histogram': [[left, count] for left, count in self.distance_histogram],
        }


def analyze_image(image: str, points, records: Sequence[BBoxRecord], seed: int = 0,
                  restarts: int = KMEANS_RESTARTS) -> CrowdStatsReport:
    """CV from box scales; DVI from 2-means over N=2 neighbour distances. DVI failures are flagged, not raised"""
    stats = object_scales(records)
    report = CrowdStatsReport(
        image=image,
        object_count=len(records),
        scale_mean=stats.mean,
        scale_std=stats.std,
        cv=stats.cv,
        cv_bucket=bucket_cv(stats.cv),
        scale_histogram=histogram(stats.scales, SCALE_BIN_WIDTH),
    )

    try:
        distances = knn_mean_distance(points, NEIGHBOURS)
        report.distance_histogram = histogram(distances, DISTANCE_BIN_WIDTH)
        clustering = kmeans_1d(distances, CLUSTERS, restarts=restarts, seed=seed)
        report.cluster_centers = [float(c) for c in clustering.centers]
        report.dvi = dunn_index(distances, clustering)
        report.dvi_bucket = bucket_dvi(report.dvi)
    except (UsageError, DegenerateClusteringError) as e:
        report.flag = str(e)
        logger.warning("⚠️ STATS: %s has no DVI: %s", image, e)
    return report


def summarize_buckets(reports: Iterable[CrowdStatsReport]) -> Dict[str, Dict[int, int]]:
    """Image counts per CV bucket and per DVI bucket"""
    cv_counts = {b: 0 for b in range(len(CV_BUCKET_EDGES) + 1)}
    dvi_counts = {b: 0 for b in range(len(DVI_BUCKET_EDGES) + 1)}
    for report in reports:
        cv_counts[report.cv_bucket] += 1
        if report.dvi_bucket is not None:
            dvi_counts[report.dvi_bucket] += 1
    return {'cv': cv_counts, 'dvi': dvi_counts}
