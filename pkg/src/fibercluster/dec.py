"""Student-t soft assignment, self-training targets, KL loss and k-means
initialization for the clustering layer."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class SoftAssignment:
    q: np.ndarray

    @property
    def q_max(self) -> np.ndarray:
        return self.q.max(axis=1)

    @property
    def assignment(self) -> np.ndarray:
        return self.q.argmax(axis=1)


def squared_distances(z: np.ndarray, mu: np.ndarray) -> np.ndarray:
    diff = np.asarray(z, dtype=np.float64)[:, None, :] - np.asarray(mu, dtype=np.float64)[None, :, :]
    return (diff ** 2).sum(axis=-1)


def _kernel(z, mu, dice):
    d2 = squared_distances(z, mu)
    if dice is None:
        w = 1.0 / (1.0 + d2)
        a = None
    else:
        a = 1.0 - np.asarray(dice, dtype=np.float64)
        w = 1.0 / (1.0 + d2 * a)
    return d2, a, w


def soft_assign(z, mu, dice=None) -> SoftAssignment:
    """Student-t soft assignment of embeddings ``z`` to centroids ``mu``.

    ``q_ij ∝ 1 / (1 + |z_i - mu_j|^2 (1 - D_ij))``, rows normalized. With
    ``dice`` omitted the anatomical factor is dropped.
    """
    _, _, w = _kernel(z, mu, dice)
    return SoftAssignment(w / w.sum(axis=1, keepdims=True))


def target_distribution(q) -> np.ndarray:
    """Sharpened self-training target ``p_ij ∝ q_ij^2 / sum_i q_ij``."""
    q = np.asarray(q, dtype=np.float64)
    freq = q.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(freq > 0, q ** 2 / freq, 0.0)
    return r / r.sum(axis=1, keepdims=True)


def kl_loss(p, q) -> float:
    """``sum_ij p_ij log(p_ij / q_ij)`` with ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p / q), 0.0)
    return float(terms.sum())


def clustering_loss(z, mu, p, dice=None):
    """Batch-mean KL(P||Q) with gradients wrt ``z`` and ``mu``.

    Returns ``(loss, dz, dmu)``. ``p`` is treated as a constant.
    """
    z = np.asarray(z, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    n = len(z)
    _, a, w = _kernel(z, mu, dice)
    q = w / w.sum(axis=1, keepdims=True)
    loss = kl_loss(p, q) / n
    # dL/d(d2_ij) = (p_ij - q_ij) * a_ij * w_ij / n
    g = (p - q) * w / n
    if a is not None:
        g = g * a
    diff = z[:, None, :] - mu[None, :, :]
    dz = 2.0 * (g[:, :, None] * diff).sum(axis=1)
    dmu = -2.0 * (g[:, :, None] * diff).sum(axis=0)
    return loss, dz, dmu


@dataclass
class ClusterLayer:
    centroids: np.ndarray
    labels: np.ndarray | None = None
    inertia: float = float("nan")

    @property
    def k(self) -> int:
        return len(self.centroids)


def _kmeans_pp(x, k, rng):
    n = len(x)
    trials = 2 + int(np.log(k))
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = ((x - centers[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = closest.sum()
        if total <= 0:
            centers[c] = x[rng.integers(n)]
            continue
        # greedy variant: keep the candidate that lowers the potential most
        cand = rng.choice(n, size=trials, p=closest / total)
        d2 = np.minimum(closest, squared_distances(x[cand], x))
        best = int(d2.sum(axis=1).argmin())
        centers[c] = x[cand[best]]
        closest = d2[best]
    return centers


def _lloyd(x, centers, max_iter, tol):
    for _ in range(max_iter):
        labels = squared_distances(x, centers).argmin(axis=1)
        new = centers.copy()
        for c in range(len(centers)):
            members = x[labels == c]
            if len(members):
                new[c] = members.mean(axis=0)
        shift = np.sqrt(((new - centers) ** 2).sum(axis=1)).max()
        centers = new
        if shift < tol:
            break
    d2 = squared_distances(x, centers)
    labels = d2.argmin(axis=1)
    return centers, labels, float(d2[np.arange(len(x)), labels].sum())


def kmeans_init(x, k: int, seed: int = 0, n_init: int = 10, max_iter: int = 300, tol: float = 1e-6) -> ClusterLayer:
    """Lloyd's k-means with k-means++ seeding; best of ``n_init`` runs.

    Iteration stops after ``max_iter`` rounds or when no centroid moves by
    ``tol`` or more. An empty cluster keeps its previous centroid.
    """
    x = np.asarray(x, dtype=np.float64)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(x):
        raise ValueError(f"k={k} exceeds the number of points ({len(x)})")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        centers, labels, inertia = _lloyd(x, _kmeans_pp(x, k, rng), max_iter, tol)
        if best is None or inertia < best.inertia:
            best = ClusterLayer(centers, labels, inertia)
    return best
