import numpy as np
import pytest

from fibercluster import anatomy, synthetic
from fibercluster.geometry import pairwise_mdf, resample_all
from fibercluster.metrics import ClusterResult
from fibercluster.synthetic import GroundTruth, SynthConfig


def small(**kw):
    base = dict(n_bundles=4, fibers_per_bundle=12, n_outliers=5, seed=3)
    base.update(kw)
    return SynthConfig(**base)


def bundle_mdf(fs, truth, b):
    idx = np.flatnonzero(truth.bundle == b)
    return pairwise_mdf(resample_all([fs.fibers[i] for i in idx]))


@pytest.fixture(scope="module")
def default_set():
    return synthetic.generate(SynthConfig(seed=0))


def test_noise_free_bundles_are_identical():
    fs, truth, _, _ = synthetic.generate(small(sigma=0.0, flip_prob=0.0, n_outliers=0, points_per_fiber=(40, 40)))
    for b in range(4):
        idx = np.flatnonzero(truth.bundle == b)
        assert all((fs.fibers[i] == fs.fibers[idx[0]]).all() for i in idx)
        assert (bundle_mdf(fs, truth, b) == 0).all()


def test_flip_probability_does_not_change_mdf():
    fs0, t0, _, _ = synthetic.generate(small(flip_prob=0.0))
    fs1, t1, _, _ = synthetic.generate(small(flip_prob=1.0))
    assert (t0.bundle == t1.bundle).all()
    for a, b in zip(fs0.fibers, fs1.fibers):
        assert (a[::-1] == b).all()
    for b in range(4):
        np.testing.assert_allclose(bundle_mdf(fs0, t0, b), bundle_mdf(fs1, t1, b), rtol=1e-12, atol=1e-12)


def test_generation_is_deterministic():
    a = synthetic.generate(small())
    b = synthetic.generate(small())
    assert all((x == y).all() for x, y in zip(a[0].fibers, b[0].fibers))
    assert (a[1].bundle == b[1].bundle).all() and (a[2].labels == b[2].labels).all()
    c = synthetic.generate(small(seed=4))
    assert not all(x.shape == y.shape and (x == y).all() for x, y in zip(a[0].fibers, c[0].fibers))


def test_counts_and_truth_layout(default_set):
    fs, truth, vol, templates = default_set
    assert len(fs) == 20 * 100 + 100 and len(templates) == 20
    assert truth.outlier.sum() == 100
    assert (truth.bundle[truth.outlier] == -1).all()
    assert np.bincount(truth.bundle[~truth.outlier]).tolist() == [100] * 20
    assert vol.labels.max() == 20 and vol.spacing == (2.0, 2.0, 2.0)


def test_bundles_are_mdf_separable(default_set):
    fs, truth, _, _ = default_set
    inl = np.flatnonzero(~truth.outlier)
    d = pairwise_mdf(resample_all([fs.fibers[i] for i in inl]))
    same = truth.bundle[inl][:, None] == truth.bundle[inl][None, :]
    assert d[same].max() < d[~same].min()


def test_label_volume_consistent_with_bundles(default_set):
    fs, truth, vol, _ = default_set
    sets = anatomy.fiberset_regions(fs.fibers, vol)
    for b in range(20):
        members = [sets[i] for i in np.flatnonzero(truth.bundle == b)]
        assert frozenset.intersection(*members)
        assert b + 1 in anatomy.compute_tap(members)


def test_fiber_lengths_pass_default_filter(default_set):
    from fibercluster.geometry import arc_length
    assert min(arc_length(f) for f in default_set[0].fibers) > 40.0


def test_box_too_small():
    with pytest.raises(ValueError, match="box too small"):
        synthetic.generate(SynthConfig(n_bundles=30, box=60.0, min_template_length=40.0, seed=0))


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(sigma=-1.0)
    with pytest.raises(ValueError):
        SynthConfig(flip_prob=1.5)
    with pytest.raises(ValueError):
        SynthConfig(n_bundles=0)


def test_ground_truth_round_trip(tmp_path):
    truth = GroundTruth([0, 1, -1, 1], [False, False, True, False])
    synthetic.write_ground_truth(truth, tmp_path / "t.tsv")
    back = synthetic.read_ground_truth(tmp_path / "t.tsv")
    assert (back.bundle == truth.bundle).all() and (back.outlier == truth.outlier).all()


# ---------------------------------------------------------------- matching

def truth_of(bundles, n_out=0):
    b = np.concatenate([bundles, -np.ones(n_out, int)])
    return GroundTruth(b, b < 0)


def test_match_perfect_and_permuted():
    bundles = np.repeat(np.arange(5), 20)
    truth = truth_of(bundles)
    perfect = synthetic.match_clusters(ClusterResult(bundles, 5), truth)
    assert perfect["accuracy"] == 1.0 and perfect["ari"] == 1.0
    perm = np.array([2, 4, 0, 1, 3])
    permuted = synthetic.match_clusters(ClusterResult(perm[bundles], 5), truth)
    assert permuted["accuracy"] == 1.0 and permuted["ari"] == 1.0


def test_match_random_assignment_has_chance_ari():
    rng = np.random.default_rng(0)
    bundles = np.repeat(np.arange(10), 1000)
    m = synthetic.match_clusters(ClusterResult(rng.integers(0, 10, len(bundles)), 10), truth_of(bundles))
    assert abs(m["ari"]) < 0.01
    assert m["accuracy"] < 0.2


def test_match_outlier_scores():
    bundles = np.repeat(np.arange(2), 5)
    truth = truth_of(bundles, n_out=4)
    flagged = np.zeros(14, bool)
    flagged[[10, 11, 12, 0]] = True      # three true outliers and one inlier
    clusters = np.concatenate([bundles, np.zeros(4, int)])
    m = synthetic.match_clusters(ClusterResult(clusters, 2, flagged), truth)
    assert m["outlier_precision"] == 0.75
    assert m["outlier_recall"] == 0.75
    assert m["inlier_rejection"] == 0.1
    assert m["accuracy"] == 1.0


def test_cluster_accuracy_hungarian_oracle():
    # more clusters than classes: best one-to-one matching scores 6 of 8
    truth = [0, 0, 0, 0, 1, 1, 1, 1]
    pred = [0, 0, 1, 1, 2, 2, 2, 2]
    assert synthetic.cluster_accuracy(truth, pred) == 0.75
