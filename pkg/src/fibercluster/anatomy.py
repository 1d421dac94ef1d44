"""Fiber/region intersection, tract anatomical profiles and set Dice."""
from __future__ import annotations

from collections import Counter
from fractions import Fraction

import numpy as np

from .io import LabelVolume

TAP_FRACTION = 0.4


def point_voxels(points: np.ndarray, vol: LabelVolume) -> tuple[np.ndarray, np.ndarray]:
    """Voxel index of each point via ``floor((p - origin) / spacing)``.

    Returns the ``(m, 3)`` integer indices and a mask of points inside the
    grid.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    idx = np.floor((pts - np.asarray(vol.origin)) / np.asarray(vol.spacing)).astype(np.int64)
    inside = ((idx >= 0) & (idx < np.asarray(vol.dims))).all(axis=1)
    return idx, inside


def fiber_regions(points: np.ndarray, vol: LabelVolume) -> frozenset[int]:
    """Distinct non-zero labels under the fiber's points; points off the grid are ignored."""
    idx, inside = point_voxels(points, vol)
    idx = idx[inside]
    labels = vol.labels[idx[:, 0], idx[:, 1], idx[:, 2]]
    return frozenset(int(v) for v in np.unique(labels) if v != 0)


def fiberset_regions(fibers, vol: LabelVolume) -> list[frozenset[int]]:
    return [fiber_regions(f, vol) for f in fibers]


def compute_tap(region_sets, fraction: float = TAP_FRACTION) -> frozenset[int]:
    """Labels present in at least ``fraction`` of the member fibers.

    The threshold is compared as an exact decimal fraction, so a label hit
    by exactly 40% of fibers is kept (0.4 * 15 is not 6 in floating point).
    """
    sets = list(region_sets)
    if not sets:
        return frozenset()
    counts = Counter(r for s in sets for r in s)
    need = Fraction(repr(float(fraction))) * len(sets)
    return frozenset(r for r, c in counts.items() if c >= need)


def cluster_taps(region_sets, labels, k: int, fraction: float = TAP_FRACTION) -> list[frozenset[int]]:
    """TAP of each cluster ``0..k-1`` given per-fiber cluster ``labels``.

    Negative labels (rejected fibers) are skipped. Empty clusters get an
    empty TAP.
    """
    members = [[] for _ in range(k)]
    for s, c in zip(region_sets, labels):
        if c >= 0:
            members[int(c)].append(s)
    return [compute_tap(m, fraction) for m in members]


def dice(a, b) -> float:
    """Set Dice ``2|a & b| / (|a| + |b|)``; two empty sets give 0."""
    a, b = set(a), set(b)
    total = len(a) + len(b)
    if total == 0:
        return 0.0
    return 2.0 * len(a & b) / total


def dice_matrix(region_sets, taps) -> np.ndarray:
    """``(N, k)`` Dice between every fiber region set and every cluster TAP."""
    out = np.zeros((len(region_sets), len(taps)))
    tap_sets = [set(t) for t in taps]
    for i, s in enumerate(region_sets):
        if not s:
            continue
        for j, t in enumerate(tap_sets):
            if t:
                out[i, j] = dice(s, t)
    return out
