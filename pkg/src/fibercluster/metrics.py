"""Cluster evaluation: Davies-Bouldin index over MDF, WMPG and TAPC."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import anatomy
from .geometry import mdf, pairwise_mdf

DETECTION_MIN_FIBERS = 10


@dataclass
class ClusterResult:
    """Per-fiber cluster ids with outlier flags.

    ``clusters`` holds the arg-max cluster of every fiber, including the
    rejected ones; ``outlier`` marks rejections. ``fibers`` optionally keeps
    the resampled coordinates (mm) the assignment was made on, and
    ``streamlines`` the original point lists used for region lookup.
    """

    clusters: np.ndarray
    k: int
    outlier: np.ndarray | None = None
    q_max: np.ndarray | None = None
    fibers: np.ndarray | None = None
    streamlines: list | None = None

    def __post_init__(self):
        self.clusters = np.asarray(self.clusters, dtype=np.int64)
        if self.outlier is None:
            self.outlier = np.zeros(len(self.clusters), dtype=bool)
        self.outlier = np.asarray(self.outlier, dtype=bool)
        if len(self.outlier) != len(self.clusters):
            raise ValueError("outlier mask and cluster ids differ in length")
        if len(self.clusters) and (self.clusters.min() < 0 or self.clusters.max() >= self.k):
            raise ValueError(f"cluster ids must lie in [0, {self.k})")

    def __len__(self):
        return len(self.clusters)

    @property
    def labels(self) -> np.ndarray:
        """Cluster ids with -1 for rejected fibers."""
        return np.where(self.outlier, -1, self.clusters)

    def members(self, c: int) -> np.ndarray:
        return np.flatnonzero((self.clusters == c) & ~self.outlier)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.clusters[~self.outlier], minlength=self.k)


@dataclass
class DBReport:
    db: float
    included: list[int]
    excluded: list[int]
    alpha: dict[int, float] = field(default_factory=dict)
    centroids: dict[int, np.ndarray] = field(default_factory=dict)
    centroid_distances: np.ndarray | None = None


def centroid_fiber(fibers: np.ndarray) -> np.ndarray:
    """Point-wise mean after flipping each member to agree with the first."""
    fibers = np.asarray(fibers, dtype=np.float64)
    ref = fibers[0]
    aligned = np.empty_like(fibers)
    for i, f in enumerate(fibers):
        direct = np.linalg.norm(f - ref, axis=1).mean()
        flipped = np.linalg.norm(f[::-1] - ref, axis=1).mean()
        aligned[i] = f[::-1] if flipped < direct else f
    return aligned.mean(axis=0)


def mean_intra_distance(fibers: np.ndarray) -> float:
    """Mean MDF over all unordered member pairs."""
    n = len(fibers)
    d = pairwise_mdf(fibers)
    return float(d[np.triu_indices(n, 1)].mean())


def db_index(result: ClusterResult, fibers: np.ndarray | None = None) -> DBReport:
    """Davies-Bouldin index with MDF as the fiber distance.

    Clusters with fewer than two members have no intra-cluster distance and
    are left out of the average; they are listed in ``excluded``.
    """
    fibers = result.fibers if fibers is None else fibers
    if fibers is None:
        raise ValueError("db_index needs fiber coordinates")
    fibers = np.asarray(fibers, dtype=np.float64)
    included, excluded = [], []
    alpha, cents = {}, {}
    for c in range(result.k):
        idx = result.members(c)
        if len(idx) < 2:
            if len(idx):
                excluded.append(c)
            continue
        included.append(c)
        alpha[c] = mean_intra_distance(fibers[idx])
        cents[c] = centroid_fiber(fibers[idx])
    if len(included) < 2:
        raise ValueError("Davies-Bouldin index needs at least two clusters with two or more fibers")
    n = len(included)
    dist = np.zeros((n, n))
    for a in range(n):
        for b in range(a + 1, n):
            dist[a, b] = dist[b, a] = mdf(cents[included[a]], cents[included[b]])
    total = 0.0
    for a in range(n):
        worst = 0.0
        for b in range(n):
            if a == b:
                continue
            num = alpha[included[a]] + alpha[included[b]]
            ratio = np.inf if dist[a, b] == 0 else num / dist[a, b]
            worst = max(worst, ratio)
        total += worst
    return DBReport(total / n, included, excluded, alpha, cents, dist)


def detected_clusters(result: ClusterResult, min_fibers: int = DETECTION_MIN_FIBERS) -> int:
    """Number of clusters holding strictly more than ``min_fibers`` fibers."""
    return int((result.sizes() > min_fibers).sum())


def wmpg(results, k: int, min_fibers: int = DETECTION_MIN_FIBERS) -> float:
    """Mean over subjects of the fraction of the ``k`` clusters detected."""
    results = list(results)
    if not results:
        raise ValueError("wmpg needs at least one subject")
    return float(np.mean([detected_clusters(r, min_fibers) / k for r in results]))


def tapc_per_cluster(result: ClusterResult, region_sets, atlas_tap) -> dict[int, float]:
    """Mean Dice between member region sets and the cluster's atlas TAP."""
    scores = {}
    for c in range(result.k):
        idx = result.members(c)
        if len(idx) == 0:
            continue
        scores[c] = sum(anatomy.dice(region_sets[i], atlas_tap[c]) for i in idx) / len(idx)
    return scores


def tapc(result: ClusterResult, vol, atlas_tap, fibers=None) -> float:
    """Tract anatomical profile coherence averaged over non-empty clusters.

    Region sets come from ``fibers`` if given, else the result's original
    streamlines, else its resampled fibers.
    """
    if fibers is None:
        fibers = result.streamlines if result.streamlines is not None else result.fibers
    if fibers is None:
        raise ValueError("tapc needs fiber coordinates")
    region_sets = anatomy.fiberset_regions(fibers, vol)
    scores = tapc_per_cluster(result, region_sets, atlas_tap)
    if not scores:
        raise ValueError("tapc needs at least one non-empty cluster")
    return float(np.mean(list(scores.values())))
