import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fibercluster import metrics
from fibercluster.io import LabelVolume
from fibercluster.metrics import ClusterResult
from oracles import brute_db, brute_tapc


def random_instance(rng, n, k, spread=20.0):
    centers = rng.uniform(0, 100, (k, 1, 3))
    labels = np.arange(n) % k
    rng.shuffle(labels)
    base = np.linspace(0, 30, 14)[:, None] * rng.normal(size=(k, 1, 3))
    fibers = centers[labels] + base[labels] + rng.normal(scale=spread / 10, size=(n, 14, 3))
    flips = rng.random(n) < 0.5
    fibers[flips] = fibers[flips, ::-1]
    return fibers, labels


# ---------------------------------------------------------------- Davies-Bouldin

def line(y, n=14):
    return np.stack([np.linspace(0, 13, n), np.full(n, float(y)), np.zeros(n)], axis=1)


def test_db_worked_case():
    fibers = np.stack([line(0), line(1), line(2), line(3)])
    rep = metrics.db_index(ClusterResult([0, 0, 1, 1], 2, fibers=fibers))
    assert rep.alpha == {0: 1.0, 1: 1.0}
    assert rep.centroid_distances[0, 1] == pytest.approx(2.0, rel=1e-15)
    assert rep.db == pytest.approx(1.0, rel=1e-15)


def test_db_zero_for_duplicated_fibers():
    fibers = np.stack([line(0)] * 3 + [line(10)] * 3 + [line(25)] * 3)
    assert metrics.db_index(ClusterResult([0, 0, 0, 1, 1, 1, 2, 2, 2], 3, fibers=fibers)).db == 0.0


@pytest.mark.parametrize("seed,n,k", [(0, 40, 4), (1, 120, 6), (2, 200, 8), (3, 17, 3)])
def test_db_matches_brute_force(seed, n, k):
    rng = np.random.default_rng(seed)
    fibers, labels = random_instance(rng, n, k)
    ours = metrics.db_index(ClusterResult(labels, k, fibers=fibers)).db
    assert ours == pytest.approx(brute_db(fibers, labels, k), rel=1e-12)


def test_db_excludes_singletons_and_outliers():
    rng = np.random.default_rng(4)
    fibers, labels = random_instance(rng, 30, 3)
    labels = labels.copy()
    labels[0] = 3                           # singleton cluster
    outlier = np.zeros(30, bool)
    outlier[[1, 2]] = True
    rep = metrics.db_index(ClusterResult(labels, 4, outlier, fibers=fibers))
    assert rep.excluded == [3] and 3 not in rep.included
    keep = ~outlier & (labels != 3)
    assert rep.db == pytest.approx(brute_db(fibers[keep], labels[keep], 3), rel=1e-12)


def test_db_needs_two_clusters():
    with pytest.raises(ValueError):
        metrics.db_index(ClusterResult([0, 0], 2, fibers=np.stack([line(0), line(1)])))


def test_db_translation_and_relabel_invariance():
    rng = np.random.default_rng(5)
    fibers, labels = random_instance(rng, 60, 5)
    base = metrics.db_index(ClusterResult(labels, 5, fibers=fibers)).db
    shifted = metrics.db_index(ClusterResult(labels, 5, fibers=fibers + [12.5, -3.0, 40.0])).db
    perm = np.array([3, 0, 4, 1, 2])
    relabeled = metrics.db_index(ClusterResult(perm[labels], 5, fibers=fibers)).db
    assert shifted == pytest.approx(base, rel=1e-9)
    assert relabeled == pytest.approx(base, rel=1e-12)


def test_centroid_handles_flipped_members():
    f = line(0)
    c = metrics.centroid_fiber(np.stack([f, f[::-1], f]))
    np.testing.assert_allclose(c, f, atol=1e-12)


# ---------------------------------------------------------------- WMPG

def sized_result(sizes, k):
    return ClusterResult(np.repeat(np.arange(len(sizes)), sizes), k)


def test_wmpg_all_detected():
    assert metrics.wmpg([sized_result([11] * 4, 4)] * 3, 4) == 1.0


def test_wmpg_strict_threshold():
    assert metrics.wmpg([sized_result([11, 11, 11, 10], 4)], 4) == 0.75


def test_wmpg_mean_over_subjects_and_missing_clusters():
    a = sized_result([11, 11, 11, 11], 4)
    b = sized_result([20, 5], 4)
    assert metrics.wmpg([a, b], 4) == pytest.approx((1.0 + 0.25) / 2, rel=1e-15)


def test_wmpg_outliers_do_not_count():
    r = ClusterResult(np.zeros(11, int), 2, np.eye(11, dtype=bool)[0])
    assert metrics.detected_clusters(r) == 0


def test_wmpg_zero_subjects():
    with pytest.raises(ValueError):
        metrics.wmpg([], 4)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 30), min_size=3, max_size=3), st.integers(0, 2), st.integers(1, 5))
def test_wmpg_monotone_in_added_fibers(sizes, which, extra):
    before = metrics.wmpg([sized_result(sizes, 3)], 3)
    grown = list(sizes)
    grown[which] += extra
    assert metrics.wmpg([sized_result(grown, 3)], 3) >= before


# ---------------------------------------------------------------- TAPC

@pytest.fixture
def strip_volume():
    # four regions along x, one voxel each 10 mm wide
    labels = np.zeros((4, 1, 1), dtype=np.int32)
    labels[:, 0, 0] = [1, 2, 3, 4]
    return LabelVolume(labels, (0.0, 0.0, 0.0), (10.0, 10.0, 10.0))


def segment(x0, x1):
    return np.stack([np.linspace(x0, x1, 14), np.full(14, 5.0), np.full(14, 5.0)], axis=1)


def test_tapc_perfect(strip_volume):
    fibers = np.stack([segment(1, 19)] * 3 + [segment(21, 39)] * 2)
    r = ClusterResult([0, 0, 0, 1, 1], 2, fibers=fibers)
    assert metrics.tapc(r, strip_volume, [[1, 2], [3, 4]]) == 1.0


def test_tapc_background_is_zero(strip_volume):
    fibers = np.stack([segment(100, 120)] * 4)
    r = ClusterResult([0, 0, 1, 1], 2, fibers=fibers)
    assert metrics.tapc(r, strip_volume, [[1], [2]]) == 0.0


def test_tapc_hand_evaluated(strip_volume):
    # cluster 0: {1,2} and {2,3} against TAP {2} -> dice 2/3 each
    # cluster 1: {3,4} and {4} against TAP {3,4} -> 1 and 2/3
    fibers = np.stack([segment(1, 19), segment(11, 29), segment(21, 39), segment(31, 39)])
    r = ClusterResult([0, 0, 1, 1], 2, fibers=fibers)
    expected = ((2 / 3 + 2 / 3) / 2 + (1 + 2 / 3) / 2) / 2
    assert metrics.tapc(r, strip_volume, [[2], [3, 4]]) == pytest.approx(expected, rel=1e-15)


@pytest.mark.parametrize("seed", range(4))
def test_tapc_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 9))
    n = int(rng.integers(k, 201))
    vol = LabelVolume(rng.integers(0, 6, (6, 5, 4)), (-3.0, 2.0, 0.5), (4.0, 5.0, 6.0))
    fibers = rng.uniform([-5, 0, 0], [25, 30, 28], (n, 14, 3))
    labels = rng.integers(0, k, n)
    taps = [sorted(set(rng.integers(1, 6, int(rng.integers(0, 4))).tolist())) for _ in range(k)]
    r = ClusterResult(labels, k, fibers=fibers)
    assert metrics.tapc(r, vol, taps) == pytest.approx(brute_tapc(fibers, labels, k, vol, taps), rel=1e-12)


def test_tapc_range_and_point_order_invariance():
    rng = np.random.default_rng(9)
    vol = LabelVolume(rng.integers(0, 4, (5, 5, 5)), (0.0, 0.0, 0.0), (2.0, 2.0, 2.0))
    fibers = rng.uniform(0, 10, (30, 14, 3))
    labels = rng.integers(0, 3, 30)
    taps = [[1, 2], [3], [1, 3]]
    score = metrics.tapc(ClusterResult(labels, 3, fibers=fibers), vol, taps)
    assert 0.0 <= score <= 1.0
    assert metrics.tapc(ClusterResult(labels, 3, fibers=fibers[:, ::-1]), vol, taps) == score


def test_tapc_ignores_outliers(strip_volume):
    fibers = np.stack([segment(1, 19), segment(21, 39)])
    r = ClusterResult([0, 0], 1, [False, True], fibers=fibers)
    assert metrics.tapc(r, strip_volume, [[1, 2]]) == 1.0


# ---------------------------------------------------------------- result container

def test_cluster_result_validation_and_labels():
    r = ClusterResult([0, 2, 1], 3, [False, True, False])
    assert r.labels.tolist() == [0, -1, 1]
    assert r.sizes().tolist() == [1, 1, 0]
    with pytest.raises(ValueError):
        ClusterResult([0, 3], 3)
