"""Synthetic fiber bundles with known ground truth and a matching label volume."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation
from sklearn.metrics import adjusted_rand_score

from .geometry import cross_mdf, resample
from .io import FiberSet, LabelVolume
from .metrics import ClusterResult

_DENSE = 1024


@dataclass(frozen=True)
class SynthConfig:
    n_bundles: int = 20
    fibers_per_bundle: int = 100
    sigma: float = 2.0
    flip_prob: float = 0.5
    n_outliers: int = 100
    box: float = 200.0
    voxel_size: float = 2.0
    control_points: int = 4
    min_template_length: float = 80.0
    min_separation: float = 35.0
    points_per_fiber: tuple[int, int] = (30, 60)
    outlier_shift: tuple[float, float] = (25.0, 45.0)
    outlier_kink_deg: tuple[float, float] = (40.0, 120.0)
    seed: int = 0

    def __post_init__(self):
        if self.n_bundles < 1 or self.fibers_per_bundle < 1:
            raise ValueError("need at least one bundle and one fiber per bundle")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must lie in [0, 1]")
        if self.n_outliers < 0:
            raise ValueError("n_outliers must be >= 0")
        if self.control_points < 2:
            raise ValueError("a template needs at least 2 control points")
        if self.voxel_size <= 0 or self.box <= 0:
            raise ValueError("box and voxel_size must be positive")


@dataclass
class GroundTruth:
    bundle: np.ndarray      # -1 for outliers
    outlier: np.ndarray

    def __post_init__(self):
        self.bundle = np.asarray(self.bundle, dtype=np.int64)
        self.outlier = np.asarray(self.outlier, dtype=bool)
        if (self.bundle[self.outlier] != -1).any() or (self.bundle[~self.outlier] < 0).any():
            raise ValueError("outliers must have bundle -1 and inliers a bundle id")


def bezier(control: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Evaluate a Bezier curve of any degree with de Casteljau's scheme."""
    pts = np.repeat(control[None, :, :], len(t), axis=0)
    t = t[:, None]
    while pts.shape[1] > 1:
        pts = (1 - t)[..., None] * pts[:, :-1] + t[..., None] * pts[:, 1:]
    return pts[:, 0]


def _tangents(points: np.ndarray) -> np.ndarray:
    tan = np.gradient(points, axis=0)
    return tan / np.linalg.norm(tan, axis=1, keepdims=True)


def make_templates(cfg: SynthConfig, rng: np.random.Generator, max_tries: int = 2000) -> list[np.ndarray]:
    """Dense template polylines, pairwise MDF-separated by ``min_separation``.

    Raises:
        ValueError: the box cannot hold ``n_bundles`` templates with the
            requested length and separation.
    """
    margin = 3 * cfg.sigma + 1.0
    lo, hi = margin, cfg.box - margin
    if hi - lo < cfg.min_template_length / np.sqrt(3):
        raise ValueError(f"box too small for {cfg.n_bundles} templates")
    templates, probes = [], []
    t = np.linspace(0.0, 1.0, _DENSE)
    for _ in range(max_tries):
        if len(templates) == cfg.n_bundles:
            break
        ctrl = rng.uniform(lo, hi, (cfg.control_points, 3))
        if np.linalg.norm(ctrl[-1] - ctrl[0]) < cfg.min_template_length:
            continue
        dense = resample(bezier(ctrl, t), _DENSE)
        probe = resample(dense, 14)
        if probes and cross_mdf(probe[None], np.stack(probes)).min() < cfg.min_separation:
            continue
        templates.append(dense)
        probes.append(probe)
    if len(templates) < cfg.n_bundles:
        raise ValueError(f"box too small for {cfg.n_bundles} templates "
                         f"(placed {len(templates)} with separation {cfg.min_separation} mm)")
    return templates


def _bundle_fibers(template, cfg: SynthConfig, rng: np.random.Generator):
    fibers = []
    for _ in range(cfg.fibers_per_bundle):
        m = int(rng.integers(cfg.points_per_fiber[0], cfg.points_per_fiber[1] + 1))
        pts = resample(template, m)
        tan = _tangents(pts)
        g = rng.normal(0.0, cfg.sigma, 3) if cfg.sigma > 0 else np.zeros(3)
        offset = g[None, :] - (tan @ g)[:, None] * tan
        fiber = pts + offset
        if rng.random() < cfg.flip_prob:
            fiber = fiber[::-1].copy()
        fibers.append(fiber)
    return fibers


def _outlier(templates, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    while True:
        base = templates[int(rng.integers(len(templates)))]
        m = int(rng.integers(cfg.points_per_fiber[0], cfg.points_per_fiber[1] + 1))
        pts = resample(base, m)
        shift = rng.normal(size=3)
        pts = pts + shift / np.linalg.norm(shift) * rng.uniform(*cfg.outlier_shift)
        for _ in range(2):
            k = int(rng.integers(int(0.2 * m), int(0.8 * m)))
            axis = rng.normal(size=3)
            angle = np.deg2rad(rng.uniform(*cfg.outlier_kink_deg))
            rot = Rotation.from_rotvec(axis / np.linalg.norm(axis) * angle)
            pts[k:] = rot.apply(pts[k:] - pts[k]) + pts[k]
        pts = np.clip(pts, 0.0, cfg.box)
        if np.sqrt(((pts[1:] - pts[:-1]) ** 2).sum(axis=1)).sum() > 60.0:
            if rng.random() < cfg.flip_prob:
                pts = pts[::-1].copy()
            return pts


def label_volume(templates, cfg: SynthConfig) -> LabelVolume:
    """Label voxels within ``3 * sigma`` of a template with ``1 + template id``."""
    n = int(np.ceil(cfg.box / cfg.voxel_size))
    centers = (np.arange(n) + 0.5) * cfg.voxel_size
    grid = np.stack(np.meshgrid(centers, centers, centers, indexing="ij"), axis=-1).reshape(-1, 3)
    labels = np.zeros(len(grid), dtype=np.int32)
    radius = 3.0 * cfg.sigma
    if radius > 0:
        pts = np.concatenate(templates)
        owner = np.repeat(np.arange(len(templates)), [len(t) for t in templates])
        dist, nearest = cKDTree(pts).query(grid, distance_upper_bound=radius)
        hit = np.isfinite(dist) & (dist <= radius)
        labels[hit] = owner[nearest[hit]] + 1
    return LabelVolume(labels.reshape(n, n, n), (0.0, 0.0, 0.0), (cfg.voxel_size,) * 3)


def generate(cfg: SynthConfig = SynthConfig()):
    """Returns ``(FiberSet, GroundTruth, LabelVolume, templates)``.

    Bundle fibers come first, in bundle order, followed by the outliers.
    Each bundle draws from its own child seed.
    """
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_bundles + 2)
    templates = make_templates(cfg, np.random.default_rng(seeds[0]))
    fibers, bundle = [], []
    for b, tmpl in enumerate(templates):
        fibers.extend(_bundle_fibers(tmpl, cfg, np.random.default_rng(seeds[b + 1])))
        bundle.extend([b] * cfg.fibers_per_bundle)
    out_rng = np.random.default_rng(seeds[-1])
    for _ in range(cfg.n_outliers):
        fibers.append(_outlier(templates, cfg, out_rng))
        bundle.append(-1)
    bundle = np.asarray(bundle)
    truth = GroundTruth(bundle, bundle < 0)
    return FiberSet(fibers), truth, label_volume(templates, cfg), templates


def write_ground_truth(truth: GroundTruth, path) -> None:
    lines = ["id\tbundle\toutlier"]
    lines += [f"{i}\t{b}\t{int(o)}" for i, (b, o) in enumerate(zip(truth.bundle, truth.outlier))]
    Path(path).write_text("\n".join(lines) + "\n")


def read_ground_truth(path) -> GroundTruth:
    rows = Path(path).read_text().split("\n")
    if not rows or rows[0].split("\t") != ["id", "bundle", "outlier"]:
        raise ValueError(f"{path}: not a ground-truth table")
    data = np.array([[int(v) for v in r.split("\t")] for r in rows[1:] if r.strip()], dtype=np.int64).reshape(-1, 3)
    if (data[:, 0] != np.arange(len(data))).any():
        raise ValueError(f"{path}: ids must be 0..N-1 in order")
    return GroundTruth(data[:, 1], data[:, 2].astype(bool))


def cluster_accuracy(truth_labels, pred_labels) -> float:
    """Best one-to-one cluster/class matching accuracy (Hungarian)."""
    truth_labels = np.asarray(truth_labels)
    pred_labels = np.asarray(pred_labels)
    if len(truth_labels) == 0:
        return 0.0
    _, t = np.unique(truth_labels, return_inverse=True)
    _, p = np.unique(pred_labels, return_inverse=True)
    w = np.zeros((p.max() + 1, t.max() + 1), dtype=np.int64)
    np.add.at(w, (p, t), 1)
    rows, cols = linear_sum_assignment(-w)
    return float(w[rows, cols].sum() / len(truth_labels))


def match_clusters(result: ClusterResult, truth: GroundTruth) -> dict[str, float]:
    """Accuracy and ARI on true inliers, plus outlier precision/recall.

    Accuracy and ARI use the arg-max cluster of each true inlier whether or
    not it was rejected; rejection quality is scored separately.
    """
    if len(result) != len(truth.bundle):
        raise ValueError("prediction and ground truth differ in length")
    inl = ~truth.outlier
    pred = result.clusters[inl]
    gt = truth.bundle[inl]
    flagged = result.outlier
    tp = int((flagged & truth.outlier).sum())
    n_flag = int(flagged.sum())
    n_out = int(truth.outlier.sum())
    return {
        "accuracy": cluster_accuracy(gt, pred),
        "ari": float(adjusted_rand_score(gt, pred)),
        "outlier_precision": tp / n_flag if n_flag else float("nan"),
        "outlier_recall": tp / n_out if n_out else float("nan"),
        "inlier_rejection": float(flagged[inl].mean()) if inl.any() else float("nan"),
    }
