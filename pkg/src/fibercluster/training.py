"""Two-stage training (Siamese distance regression, then DEC clustering with
anatomical weighting) and atlas inference."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import anatomy, dec, nn
from .geometry import (DEFAULT_N_POINTS, Normalization, fibermaps, fit_normalization, mdf_pairs, normalize,
                       resample_all)
from .io import Atlas, FiberSet, LabelVolume
from .metrics import ClusterResult

log = logging.getLogger(__name__)

PAPER_PRETRAIN_SCHEDULE = ((25000, 1e-4), (4000, 1e-5))
H_REFERENCE_K = 800


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for both training stages and inference.

    Schedules are ``((iterations, learning_rate), ...)``. The defaults are the
    desk-scale settings; :data:`PAPER_PRETRAIN_SCHEDULE` holds the full-scale
    one.
    """

    k: int = 20
    lam: float = 0.1
    h: float = 0.015
    rescale_h: bool = True
    n_points: int = DEFAULT_N_POINTS
    pretrain_schedule: tuple[tuple[int, float], ...] = ((1500, 1e-3), (500, 1e-4))
    cluster_schedule: tuple[tuple[int, float], ...] = ((800, 1e-4), (200, 1e-5))
    pretrain_fibers: int = 64
    pretrain_pairs: int = 256
    cluster_batch: int = 64
    cluster_pair_fibers: int = 64
    cluster_pairs: int = 128
    refresh_period: int = 200
    anatomy: bool = True
    outlier_removal: bool = True
    flip_augment: bool = True
    distance_unit: float = 1.0
    kmeans_n_init: int = 10
    infer_chunk: int = 256
    log_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be >= 2")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if not 0.0 <= self.h < 1.0:
            raise ValueError("h must lie in [0, 1)")
        if self.distance_unit <= 0:
            raise ValueError("distance_unit must be positive")
        if self.refresh_period < 1:
            raise ValueError("refresh_period must be >= 1")

    @property
    def effective_h(self) -> float:
        """Rejection threshold actually applied (0 when removal is off).

        With ``rescale_h`` the nominal threshold, tuned for 800 clusters, is
        scaled by ``800 / k`` to keep its ratio to the uniform assignment.
        """
        if not self.outlier_removal:
            return 0.0
        return self.h * H_REFERENCE_K / self.k if self.rescale_h else self.h

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class History:
    records: list[dict] = field(default_factory=list)

    def add(self, **record):
        self.records.append(record)
        log.info("%s", record)

    def where(self, key):
        return [r for r in self.records if key in r]


# ---------------------------------------------------------------- inputs

@dataclass
class Prepared:
    """Resampled fibers (mm) and their normalized FiberMaps.

    ``raw`` keeps the original point lists; region sets are looked up on
    every original point, not only on the resampled ones.
    """

    resampled: np.ndarray
    maps: np.ndarray
    normalization: Normalization
    raw: list | None = None

    @property
    def n_points(self) -> int:
        return self.resampled.shape[1]

    def batch(self, index, flips=None) -> np.ndarray:
        x = self.maps[index]
        if flips is not None and flips.any():
            x = x.copy()
            x[flips] = np.roll(x[flips], self.n_points, axis=1)
        return x


def prepare(fibers, n_points: int = DEFAULT_N_POINTS, norm: Normalization | None = None) -> Prepared:
    if isinstance(fibers, FiberSet):
        fibers = fibers.fibers
    fibers = [np.asarray(f, dtype=np.float64) for f in fibers]
    resampled = resample_all(fibers, n_points)
    if norm is None:
        norm = fit_normalization(resampled)
    return Prepared(resampled, fibermaps(normalize(resampled, norm)), norm, fibers)


def embed(prep: Prepared, store: nn.ParamStore, chunk: int = 256) -> np.ndarray:
    out = [nn.encoder_forward(prep.maps[s:s + chunk], store) for s in range(0, len(prep.maps), chunk)]
    return np.concatenate(out) if out else np.zeros((0, nn.EncoderConfig().embedding_dim))


# ---------------------------------------------------------------- losses

def pair_loss(z, left, right, targets):
    """Mean of ``(|z_a - z_b| - t)^2`` over pairs, with ``dL/dz``."""
    diff = z[left] - z[right]
    dist = np.sqrt((diff ** 2).sum(axis=1))
    resid = dist - targets
    loss = float(np.mean(resid ** 2))
    coef = np.where(dist > 0, 2.0 * resid / (len(targets) * np.where(dist > 0, dist, 1.0)), 0.0)
    g = coef[:, None] * diff
    dz = np.zeros_like(z)
    np.add.at(dz, left, g)
    np.add.at(dz, right, -g)
    return loss, dz


@dataclass
class JointBatch:
    """Inputs of one optimization step.

    ``pair_maps`` feeds the distance-regression term over ``left``/``right``
    index pairs. ``cluster_maps`` (optional) feeds the KL term with targets
    ``p`` and Dice rows ``dice``.
    """

    pair_maps: np.ndarray
    left: np.ndarray
    right: np.ndarray
    targets: np.ndarray
    cluster_maps: np.ndarray | None = None
    p: np.ndarray | None = None
    dice: np.ndarray | None = None
    lam: float = 0.0


def joint_loss(store: nn.ParamStore, batch: JointBatch, need_grads: bool = True):
    """``L = L_p + lam * L_c`` and gradients for every trained parameter.

    Returns ``(report, grads)`` where report holds ``L_p``, ``L_c`` and
    ``L``. Centroids get a gradient only when ``lam > 0``.
    """
    z, cache = nn.encoder_forward(batch.pair_maps, store, return_cache=True)
    lp, dz = pair_loss(z, batch.left, batch.right, batch.targets)
    grads = nn.encoder_backward(dz, cache, store) if need_grads else {}
    lc = 0.0
    if batch.cluster_maps is not None:
        zc, cache_c = nn.encoder_forward(batch.cluster_maps, store, return_cache=True)
        lc, dzc, dmu = dec.clustering_loss(zc, store["centroids"], batch.p, batch.dice)
        if need_grads and batch.lam > 0:
            gc = nn.encoder_backward(batch.lam * dzc, cache_c, store)
            for name, g in gc.items():
                grads[name] = grads[name] + g
            grads["centroids"] = batch.lam * dmu
    report = {"L_p": lp, "L_c": lc, "L": lp + batch.lam * lc}
    return report, grads


# ---------------------------------------------------------------- sampling

def _sample_pairs(rng, n_total, n_fibers, n_pairs, flip_augment):
    subset = rng.choice(n_total, size=min(n_fibers, n_total), replace=False)
    m = len(subset)
    left = rng.integers(m, size=n_pairs)
    right = (left + rng.integers(1, m, size=n_pairs)) % m
    flips = rng.random(m) < 0.5 if flip_augment else None
    return subset, left, right, flips


def _pair_batch(prep, rng, n_fibers, n_pairs, cfg):
    subset, left, right, flips = _sample_pairs(rng, len(prep.maps), n_fibers, n_pairs, cfg.flip_augment)
    targets = mdf_pairs(prep.resampled, subset[left], subset[right]) / cfg.distance_unit
    return prep.batch(subset, flips), left, right, targets


def _check_finite(report, stage, it):
    if not loss_is_finite(report):
        raise FloatingPointError(f"non-finite loss in {stage} stage at iteration {it}: {report}")


def _iterations(schedule):
    for iters, lr in schedule:
        for _ in range(int(iters)):
            yield lr


# ---------------------------------------------------------------- stage 1

def _hyperparameters(cfg: TrainConfig, stage: str) -> dict:
    return {
        "stage": stage,
        "k": cfg.k,
        "n_points": cfg.n_points,
        "h": cfg.h,
        "h_effective": cfg.effective_h,
        "lambda": cfg.lam,
        "anatomy": cfg.anatomy,
        "outlier_removal": cfg.outlier_removal,
        "distance_unit": cfg.distance_unit,
        "embedding_dim": nn.EncoderConfig().embedding_dim,
        "tap_fraction": anatomy.TAP_FRACTION,
        "seed": cfg.seed,
    }


def pretrain(fibers, cfg: TrainConfig = TrainConfig(), history: History | None = None) -> Atlas:
    """Siamese distance-regression pretraining.

    Each step embeds a random subset of fibers and regresses embedding
    distances onto MDF (in ``distance_unit`` mm) for random pairs within the
    subset. Returns a pretrained-only atlas (weights and normalization).
    """
    if len(fibers) < 2:
        raise ValueError("pretraining needs at least 2 fibers")
    history = history if history is not None else History()
    prep = prepare(fibers, cfg.n_points)
    store = nn.init_encoder(seed=cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])
    for it, lr in enumerate(_iterations(cfg.pretrain_schedule)):
        maps, left, right, targets = _pair_batch(prep, rng, cfg.pretrain_fibers, cfg.pretrain_pairs, cfg)
        report, grads = joint_loss(store, JointBatch(maps, left, right, targets))
        _check_finite(report, "pretrain", it)
        nn.adamax_step(store, grads, lr)
        if it % cfg.log_every == 0:
            history.add(stage="pretrain", iteration=it, lr=lr, **report)
    return Atlas(dict(store.params), prep.normalization, _hyperparameters(cfg, "pretrained"))


# ---------------------------------------------------------------- stage 2

@dataclass
class _ClusterState:
    regions: list | None
    taps: list
    dice: np.ndarray | None
    p: np.ndarray
    q: np.ndarray


def _refresh(prep, store, cfg, regions, dice_prev, labels=None) -> _ClusterState:
    z = embed(prep, store, cfg.infer_chunk)
    mu = store["centroids"]
    if labels is None:
        labels = dec.soft_assign(z, mu, dice_prev).assignment
    if cfg.anatomy:
        taps = anatomy.cluster_taps(regions, labels, cfg.k)
        dm = anatomy.dice_matrix(regions, taps)
    else:
        taps, dm = [frozenset() for _ in range(cfg.k)], None
    q = dec.soft_assign(z, mu, dm).q
    return _ClusterState(regions, taps, dm, dec.target_distribution(q), q)


def cluster_train(fibers, pretrained: Atlas, cfg: TrainConfig = TrainConfig(),
                  labels: LabelVolume | None = None, history: History | None = None) -> Atlas:
    """k-means initialization followed by joint ``L_p + lam * L_c`` training.

    Every ``refresh_period`` steps the whole set is re-embedded and the
    targets ``p``, cluster TAPs and Dice matrix are recomputed. The first
    TAPs come from the k-means clusters.

    With a label volume the final per-cluster TAPs are stored in the atlas
    even when anatomy is disabled; they are then only used for scoring.

    Raises:
        ValueError: anatomy is enabled but no label volume was given, or
            there are fewer fibers than clusters.
    """
    if cfg.anatomy and labels is None:
        raise ValueError("anatomical weighting is enabled but no label volume was given")
    if len(fibers) < cfg.k:
        raise ValueError(f"need at least k={cfg.k} fibers")
    if cfg.effective_h >= 1.0:
        log.warning("effective threshold h=%g >= 1 rejects every fiber; lower h or raise k", cfg.effective_h)
    history = history if history is not None else History()
    prep = prepare(fibers, cfg.n_points, pretrained.normalization)
    store = nn.ParamStore({k: v.copy() for k, v in pretrained.weights.items()})
    regions = anatomy.fiberset_regions(prep.raw, labels) if labels is not None else None

    km = dec.kmeans_init(embed(prep, store, cfg.infer_chunk), cfg.k, seed=cfg.seed, n_init=cfg.kmeans_n_init)
    store.add("centroids", km.centroids)
    state = _refresh(prep, store, cfg, regions, None, labels=km.labels)
    history.add(stage="cluster", iteration=0, refresh=True,
                kl_full=dec.kl_loss(state.p, state.q) / len(state.q))

    rng = np.random.default_rng([cfg.seed, 2])
    n = len(prep.maps)
    for it, lr in enumerate(_iterations(cfg.cluster_schedule)):
        if it > 0 and it % cfg.refresh_period == 0:
            state = _refresh(prep, store, cfg, regions, state.dice)
            history.add(stage="cluster", iteration=it, refresh=True,
                        kl_full=dec.kl_loss(state.p, state.q) / len(state.q))
        idx = rng.choice(n, size=min(cfg.cluster_batch, n), replace=False)
        flips = rng.random(len(idx)) < 0.5 if cfg.flip_augment else None
        maps, left, right, targets = _pair_batch(prep, rng, cfg.cluster_pair_fibers, cfg.cluster_pairs, cfg)
        batch = JointBatch(maps, left, right, targets, prep.batch(idx, flips), state.p[idx],
                           None if state.dice is None else state.dice[idx], cfg.lam)
        report, grads = joint_loss(store, batch)
        _check_finite(report, "cluster", it)
        nn.adamax_step(store, grads, lr)
        if it % cfg.log_every == 0:
            history.add(stage="cluster", iteration=it, lr=lr, **report)

    z = embed(prep, store, cfg.infer_chunk)
    sa = dec.soft_assign(z, store["centroids"], state.dice)
    final_labels = np.where(sa.q_max < cfg.effective_h, -1, sa.assignment)
    # TAPs are stored whenever labels exist so the no-anatomy ablation can be scored
    taps = (anatomy.cluster_taps(regions, final_labels, cfg.k) if regions is not None
            else [frozenset() for _ in range(cfg.k)])
    q = dec.soft_assign(z, store["centroids"], anatomy.dice_matrix(regions, taps)).q if cfg.anatomy else sa.q
    history.add(stage="cluster", iteration=sum(i for i, _ in cfg.cluster_schedule), refresh=True,
                kl_full=dec.kl_loss(dec.target_distribution(q), q) / len(q))
    mu = store.params.pop("centroids")
    return Atlas(dict(store.params), prep.normalization, _hyperparameters(cfg, "clustered"),
                 centroids=mu, tap=[sorted(t) for t in taps])


# ---------------------------------------------------------------- inference

@dataclass
class Inference:
    result: ClusterResult
    q: np.ndarray
    embeddings: np.ndarray


def infer(fibers, atlas: Atlas, labels: LabelVolume | None = None, h: float | None = None) -> Inference:
    """Assign fibers to atlas clusters and flag outliers.

    Uses the anatomically weighted assignment with the atlas TAPs when the
    atlas was trained with anatomy. Fibers whose maximum probability is
    below ``h`` (default: the atlas's effective threshold) are flagged.

    Raises:
        ValueError: the atlas has no centroids, or needs a label volume
            that was not given.
    """
    if not atlas.is_trained:
        raise ValueError("atlas has no clustering layer (pretrained only)")
    hyper = atlas.hyperparameters
    if isinstance(fibers, Prepared):
        prep = fibers
    else:
        prep = prepare(fibers, int(hyper["n_points"]), atlas.normalization)
    store = nn.ParamStore(dict(atlas.weights))
    z = embed(prep, store)
    dm = None
    if hyper.get("anatomy"):
        if labels is None:
            raise ValueError("atlas uses anatomical weighting; a label volume is required")
        dm = anatomy.dice_matrix(anatomy.fiberset_regions(_points(prep), labels), atlas.tap)
    sa = dec.soft_assign(z, atlas.centroids, dm)
    thr = float(hyper.get("h_effective", 0.0)) if h is None else float(h)
    q_max = sa.q_max
    result = ClusterResult(sa.assignment, atlas.k, q_max < thr, q_max, prep.resampled, _points(prep))
    return Inference(result, sa.q, z)


def _points(prep: Prepared):
    return prep.raw if prep.raw is not None else prep.resampled


def flip_consistency(fibers, atlas: Atlas, labels: LabelVolume | None = None) -> float:
    """Fraction of fibers assigned the same cluster as their reversed copy."""
    fibers = fibers.fibers if isinstance(fibers, FiberSet) else list(fibers)
    a = infer(fibers, atlas, labels).result.clusters
    b = infer([np.asarray(f)[::-1] for f in fibers], atlas, labels).result.clusters
    return float(np.mean(a == b))


def loss_is_finite(report: dict) -> bool:
    return all(math.isfinite(v) for v in report.values())
