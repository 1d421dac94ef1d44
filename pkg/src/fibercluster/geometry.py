"""Fiber resampling, point-order flipping, MDF distance, normalization and
FiberMap construction.

The MDF kernels are compiled with numba. Every distance, whether computed
one pair at a time or through :func:`pairwise_mdf`, goes through the same
compiled routine so results agree bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

# The bundled TBB is too old for numba; fall back to OpenMP / workqueue quietly.
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

DEFAULT_N_POINTS = 14
_SCALE_GUARD = 1e-9


def arc_length(points: np.ndarray) -> float:
    """Total polyline length of an ``(m, 3)`` point array."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 2:
        return 0.0
    return float(np.sqrt(((pts[1:] - pts[:-1]) ** 2).sum(axis=1)).sum())


def resample(points: np.ndarray, n: int = DEFAULT_N_POINTS) -> np.ndarray:
    """Resample a polyline to ``n`` points equally spaced in arc length.

    Linear interpolation along the input polyline; the first and last
    points are copied exactly.

    Raises:
        ValueError: fewer than 2 input points, ``n < 2``, or zero length.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (m, 3) points, got shape {pts.shape}")
    if len(pts) < 2:
        raise ValueError("fiber needs at least 2 points")
    if n < 2:
        raise ValueError("n must be >= 2")
    seg = np.sqrt(((pts[1:] - pts[:-1]) ** 2).sum(axis=1))
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if not total > 0.0:
        raise ValueError("cannot resample a zero-length fiber")
    targets = np.linspace(0.0, total, n)
    out = np.empty((n, 3))
    for ax in range(3):
        out[:, ax] = np.interp(targets, cum, pts[:, ax])
    out[0] = pts[0]
    out[-1] = pts[-1]
    return out


def resample_all(fibers, n: int = DEFAULT_N_POINTS) -> np.ndarray:
    """Resample a sequence of fibers into an ``(N, n, 3)`` array."""
    out = np.empty((len(fibers), n, 3))
    for i, f in enumerate(fibers):
        out[i] = resample(f, n)
    return out


def flip(points: np.ndarray) -> np.ndarray:
    """Reverse point order. Works on one fiber or a trailing-axis batch."""
    return np.ascontiguousarray(np.asarray(points)[..., ::-1, :])


@numba.njit(cache=True)
def _mdf_kernel(a, b):
    # Terms i and n-1-i are added together before accumulating, which makes
    # the result exactly symmetric in (a, b) and exactly flip invariant.
    n = a.shape[0]
    direct = 0.0
    flipped = 0.0
    half = n // 2
    for i in range(half):
        r = n - 1 - i
        dx = a[i, 0] - b[i, 0]
        dy = a[i, 1] - b[i, 1]
        dz = a[i, 2] - b[i, 2]
        d1 = np.sqrt(dx * dx + dy * dy + dz * dz)
        dx = a[r, 0] - b[r, 0]
        dy = a[r, 1] - b[r, 1]
        dz = a[r, 2] - b[r, 2]
        d2 = np.sqrt(dx * dx + dy * dy + dz * dz)
        direct += d1 + d2
        dx = a[i, 0] - b[r, 0]
        dy = a[i, 1] - b[r, 1]
        dz = a[i, 2] - b[r, 2]
        f1 = np.sqrt(dx * dx + dy * dy + dz * dz)
        dx = a[r, 0] - b[i, 0]
        dy = a[r, 1] - b[i, 1]
        dz = a[r, 2] - b[i, 2]
        f2 = np.sqrt(dx * dx + dy * dy + dz * dz)
        flipped += f1 + f2
    if n % 2 == 1:
        dx = a[half, 0] - b[half, 0]
        dy = a[half, 1] - b[half, 1]
        dz = a[half, 2] - b[half, 2]
        d = np.sqrt(dx * dx + dy * dy + dz * dz)
        direct += d
        flipped += d
    return min(direct, flipped) / n


@numba.njit(parallel=True, cache=True)
def _pairwise_kernel(fibers):
    n_fib = fibers.shape[0]
    out = np.zeros((n_fib, n_fib))
    for i in numba.prange(n_fib):
        for j in range(i + 1, n_fib):
            out[i, j] = _mdf_kernel(fibers[i], fibers[j])
    for i in range(n_fib):
        for j in range(i + 1, n_fib):
            out[j, i] = out[i, j]
    return out


@numba.njit(parallel=True, cache=True)
def _cross_kernel(a, b):
    out = np.empty((a.shape[0], b.shape[0]))
    for i in numba.prange(a.shape[0]):
        for j in range(b.shape[0]):
            out[i, j] = _mdf_kernel(a[i], b[j])
    return out


@numba.njit(parallel=True, cache=True)
def _indexed_kernel(fibers, left, right):
    out = np.empty(left.shape[0])
    for p in numba.prange(left.shape[0]):
        out[p] = _mdf_kernel(fibers[left[p]], fibers[right[p]])
    return out


def _as_batch(fibers) -> np.ndarray:
    arr = np.ascontiguousarray(fibers, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (N, n, 3) resampled fibers, got {arr.shape}")
    return arr


def mdf(a: np.ndarray, b: np.ndarray) -> float:
    """Minimum average direct-flip distance between two resampled fibers.

    Raises:
        ValueError: the fibers have different point counts.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 3:
        raise ValueError(f"point-count mismatch: {a.shape} vs {b.shape}")
    return float(_mdf_kernel(a, b))


def pairwise_mdf(fibers) -> np.ndarray:
    """Symmetric ``(N, N)`` MDF matrix with a zero diagonal.

    Only the upper triangle is computed; rows are distributed over numba
    worker threads. Each entry is independent of how the work is split.
    """
    return _pairwise_kernel(_as_batch(fibers))


def cross_mdf(a, b) -> np.ndarray:
    """``(len(a), len(b))`` MDF matrix between two fiber batches."""
    a, b = _as_batch(a), _as_batch(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError("point-count mismatch between batches")
    return _cross_kernel(a, b)


def mdf_pairs(fibers, left, right) -> np.ndarray:
    """MDF for index pairs ``(left[p], right[p])`` into one fiber batch."""
    left = np.ascontiguousarray(left, dtype=np.int64)
    right = np.ascontiguousarray(right, dtype=np.int64)
    return _indexed_kernel(_as_batch(fibers), left, right)


def set_workers(n: int | None) -> None:
    """Set the numba thread count used by the parallel kernels."""
    if n is None:
        return
    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


@dataclass(frozen=True)
class Normalization:
    center: tuple[float, float, float]
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("normalization scale must be positive")


def fit_normalization(fibers) -> Normalization:
    """Centre on the mean of all points; scale by the max-norm radius.

    ``fibers`` is any iterable of ``(m, 3)`` arrays or an ``(N, n, 3)``
    batch. A scale below 1e-9 is replaced by 1.
    """
    pts = np.concatenate([np.asarray(f, dtype=np.float64).reshape(-1, 3) for f in fibers])
    if len(pts) == 0:
        raise ValueError("cannot fit normalization on an empty fiber set")
    center = pts.mean(axis=0)
    scale = float(np.abs(pts - center).max())
    if scale < _SCALE_GUARD:
        scale = 1.0
    return Normalization(tuple(float(c) for c in center), scale)


def normalize(points: np.ndarray, norm: Normalization) -> np.ndarray:
    return (np.asarray(points, dtype=np.float64) - np.asarray(norm.center)) / norm.scale


def denormalize(points: np.ndarray, norm: Normalization) -> np.ndarray:
    return np.asarray(points, dtype=np.float64) * norm.scale + np.asarray(norm.center)


def fibermap(points: np.ndarray) -> np.ndarray:
    """Build the ``(2n, 2n, 3)`` FiberMap of one resampled fiber.

    Rows hold the fiber followed by its reversal; every column is a copy of
    that sequence. Reversing the fiber rotates the rows by ``n``.
    """
    pts = np.asarray(points, dtype=np.float64)
    seq = np.concatenate([pts, pts[::-1]], axis=0)
    return np.ascontiguousarray(np.broadcast_to(seq[:, None, :], (len(seq), len(seq), 3)))


def fibermaps(batch: np.ndarray) -> np.ndarray:
    """Vectorized :func:`fibermap` over an ``(N, n, 3)`` batch -> ``(N, 2n, 2n, 3)``."""
    batch = np.asarray(batch, dtype=np.float64)
    seq = np.concatenate([batch, batch[:, ::-1]], axis=1)
    m = seq.shape[1]
    return np.ascontiguousarray(np.broadcast_to(seq[:, :, None, :], (len(batch), m, m, 3)))
