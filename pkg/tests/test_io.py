import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fibercluster import io
from fibercluster.geometry import Normalization

f32 = st.floats(-1e4, 1e4, allow_nan=False, allow_infinity=False, width=32)


def fiber_strategy():
    return st.integers(2, 12).flatmap(lambda m: st.lists(st.tuples(f32, f32, f32), min_size=m, max_size=m))


# ---------------------------------------------------------------- fibers

def test_fiberset_round_trip_bit_exact(tmp_path):
    fs = io.FiberSet([np.array([[0.5, 1.25, -3.0], [2.0, 2.0, 2.0]]),
                      np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])])
    path = tmp_path / "a.fibs"
    io.write_fiberset(fs, path)
    back = io.read_fiberset(path)
    assert len(back) == 2
    for a, b in zip(fs.fibers, back.fibers):
        assert a.tobytes() == b.tobytes()
    io.write_fiberset(back, tmp_path / "b.fibs")
    assert path.read_bytes() == (tmp_path / "b.fibs").read_bytes()


@settings(max_examples=50, deadline=None)
@given(st.lists(fiber_strategy(), min_size=0, max_size=6))
def test_fiberset_round_trip_property(tmp_path_factory, fibers):
    fs = io.FiberSet([np.array(f, dtype=np.float64) for f in fibers])
    data_path = tmp_path_factory.mktemp("fibs") / "x.fibs"
    io.write_fiberset(fs, data_path)
    back = io.read_fiberset(data_path)
    assert [f.tobytes() for f in back.fibers] == [f.tobytes() for f in fs.fibers]


def test_fiberset_header_layout(tmp_path):
    fs = io.FiberSet([np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])])
    path = tmp_path / "x.fibs"
    io.write_fiberset(fs, path)
    data = path.read_bytes()
    assert data[:4] == b"FIBS"
    assert struct.unpack_from("<III", data, 4) == (1, 1, 2)
    assert struct.unpack_from("<6f", data, 16) == (1.0, 2.0, 3.0, 4.0, 5.0, 6.0)
    assert len(data) == 16 + 24


def test_bad_magic(tmp_path):
    path = tmp_path / "x.fibs"
    path.write_bytes(b"XXXX" + bytes(8))
    with pytest.raises(io.FormatError, match="bad magic at offset 0"):
        io.read_fiberset(path)


def test_single_point_fiber_rejected():
    data = b"FIBS" + struct.pack("<III", 1, 1, 1) + struct.pack("<3f", 0, 0, 0)
    with pytest.raises(io.FormatError, match=r"1 point\(s\) \(< 2\) at offset 12"):
        io.parse_fiberset(data)


def test_non_finite_coordinate_offset():
    data = b"FIBS" + struct.pack("<III", 1, 1, 2) + struct.pack("<6f", 0, 0, 0, 1, float("nan"), 0)
    with pytest.raises(io.FormatError, match="non-finite coordinate at offset 32"):
        io.parse_fiberset(data)


def test_unsupported_version():
    with pytest.raises(io.FormatError, match="version 2"):
        io.parse_fiberset(b"FIBS" + struct.pack("<II", 2, 0))


def test_truncated_files_always_raise(tmp_path):
    fs = io.FiberSet([np.arange(12.0).reshape(4, 3), np.arange(9.0).reshape(3, 3)])
    path = tmp_path / "x.fibs"
    io.write_fiberset(fs, path)
    data = path.read_bytes()
    for cut in range(len(data)):
        with pytest.raises(io.FormatError):
            io.parse_fiberset(data[:cut])


def test_trailing_bytes_rejected():
    data = b"FIBS" + struct.pack("<II", 1, 0) + b"\0"
    with pytest.raises(io.FormatError, match="trailing"):
        io.parse_fiberset(data)


def test_text_format_round_trip(tmp_path):
    fs = io.FiberSet([np.array([[0.1, 0.2, 0.3], [1.0 / 3, 2.0, 3.0]])], ids=[7])
    path = tmp_path / "x.json"
    io.write_fiberset(fs, path)
    assert json.loads(path.read_text())["ids"] == [7]
    back = io.read_fiberset(path)
    np.testing.assert_array_equal(back.fibers[0], fs.fibers[0])
    assert back.ids.tolist() == [7]


def test_text_format_rejects_short_fiber(tmp_path):
    path = tmp_path / "x.json"
    path.write_text('{"fibers": [[[0, 0, 0]]]}')
    with pytest.raises(io.FormatError):
        io.read_fiberset(path)


def test_fiberset_validation():
    with pytest.raises(ValueError):
        io.FiberSet([np.array([[0.0, 0, 0], [np.inf, 0, 0]])])


# ---------------------------------------------------------------- length filter

def test_filter_by_length_strict():
    a = np.array([[0.0, 0, 0], [50.0, 0, 0]])
    b = np.array([[0.0, 0, 0], [40.0, 0, 0]])
    c = np.array([[0.0, 0, 0], [20.0, 0, 0], [20.0, 25.0, 0]])
    out = io.filter_by_length(io.FiberSet([a, b, c]), 40.0)
    assert out.ids.tolist() == [0, 2]
    assert len(io.filter_by_length(io.FiberSet([]), 40.0)) == 0
    with pytest.raises(ValueError):
        io.filter_by_length(io.FiberSet([a]), -1)


def test_filter_output_lengths_exceed_min():
    rng = np.random.default_rng(0)
    fs = io.FiberSet([np.cumsum(rng.normal(scale=5, size=(10, 3)), axis=0) for _ in range(50)])
    from fibercluster.geometry import arc_length
    out = io.filter_by_length(fs, 40.0)
    assert all(arc_length(f) > 40.0 for f in out.fibers)
    assert len(out) == sum(arc_length(f) > 40.0 for f in fs.fibers)


# ---------------------------------------------------------------- label volumes

def test_labelvolume_round_trip(tmp_path):
    vol = io.LabelVolume(np.arange(8).reshape(2, 2, 2), (1.0, -2.5, 0.0), (1.0, 2.0, 0.5))
    path = tmp_path / "v.lvol"
    io.write_labelvolume(vol, path)
    back = io.read_labelvolume(path)
    assert (back.labels == vol.labels).all() and back.labels.dtype == np.int32
    assert back.origin == vol.origin and back.spacing == vol.spacing
    data = path.read_bytes()
    # x-fastest: voxel (1,0,0) is the second label
    assert struct.unpack_from("<2i", data, 44) == (int(vol.labels[0, 0, 0]), int(vol.labels[1, 0, 0]))


@settings(max_examples=30, deadline=None)
@given(st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)), st.integers(0, 2 ** 31 - 1))
def test_labelvolume_round_trip_property(dims, seed):
    rng = np.random.default_rng(seed)
    vol = io.LabelVolume(rng.integers(0, 1000, dims), tuple(np.float32(rng.normal(size=3))),
                         tuple(np.float32(rng.uniform(0.1, 3, 3))))
    head = b"LVOL" + struct.pack("<4I", 1, *dims) + struct.pack("<6f", *vol.origin, *vol.spacing)
    data = head + vol.labels.astype("<i4").ravel(order="F").tobytes()
    back = io.parse_labelvolume(data)
    assert (back.labels == vol.labels).all()
    assert back.origin == vol.origin and back.spacing == vol.spacing


def test_labelvolume_truncated(tmp_path):
    vol = io.LabelVolume(np.arange(8).reshape(2, 2, 2), (0, 0, 0), (1, 1, 1))
    path = tmp_path / "v.lvol"
    io.write_labelvolume(vol, path)
    data = path.read_bytes()
    with pytest.raises(io.FormatError, match="truncated"):
        io.parse_labelvolume(data[:-4])
    for cut in range(len(data)):
        with pytest.raises(io.FormatError):
            io.parse_labelvolume(data[:cut])


def test_labelvolume_negative_spacing():
    with pytest.raises(ValueError, match="spacing"):
        io.LabelVolume(np.zeros((2, 2, 2)), (0, 0, 0), (1.0, -1.0, 1.0))
    data = b"LVOL" + struct.pack("<4I", 1, 1, 1, 1) + struct.pack("<6f", 0, 0, 0, 1, -1, 1) + struct.pack("<i", 0)
    with pytest.raises(io.FormatError, match="spacing"):
        io.parse_labelvolume(data)


# ---------------------------------------------------------------- atlas

def make_atlas(rng, k=3, dim=10):
    weights = {"fc.weight": rng.normal(size=(dim, 4)), "fc.bias": rng.normal(size=dim)}
    return io.Atlas(weights, Normalization((1.0 / 3, 2.0, -7.25), 91.123456789),
                    {"k": k, "h": 0.015, "lambda": 0.1, "n_points": 14, "embedding_dim": dim},
                    centroids=rng.normal(size=(k, dim)), tap=[[3, 1], [], [2]])


def test_atlas_round_trip_bit_exact(tmp_path):
    atlas = make_atlas(np.random.default_rng(0))
    io.write_atlas(atlas, tmp_path / "atlas")
    back = io.read_atlas(tmp_path / "atlas")
    for name in atlas.weights:
        assert back.weights[name].tobytes() == atlas.weights[name].tobytes()
    assert back.centroids.tobytes() == atlas.centroids.tobytes()
    assert back.tap == [[1, 3], [], [2]]
    assert back.normalization == atlas.normalization
    assert back.hyperparameters == atlas.hyperparameters
    io.write_atlas(back, tmp_path / "again")
    assert io.atlas_digest(tmp_path / "atlas") == io.atlas_digest(tmp_path / "again")


def test_atlas_pretrained_only(tmp_path):
    rng = np.random.default_rng(1)
    atlas = io.Atlas({"w": rng.normal(size=5)}, Normalization((0.0, 0.0, 0.0), 1.0), {"stage": "pretrained"})
    io.write_atlas(atlas, tmp_path / "a")
    back = io.read_atlas(tmp_path / "a")
    assert not back.is_trained and back.centroids is None


def test_atlas_version_rejected(tmp_path):
    io.write_atlas(make_atlas(np.random.default_rng(2)), tmp_path / "a")
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    manifest["version"] = 99
    (tmp_path / "a" / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(io.FormatError, match="unsupported atlas version"):
        io.read_atlas(tmp_path / "a")


def test_atlas_centroid_dimension_validated():
    rng = np.random.default_rng(3)
    with pytest.raises(ValueError, match="centroid dimension"):
        io.Atlas({}, Normalization((0.0, 0.0, 0.0), 1.0), {"embedding_dim": 10}, centroids=rng.normal(size=(3, 9)))
    with pytest.raises(ValueError, match="k >= 2"):
        io.Atlas({}, Normalization((0.0, 0.0, 0.0), 1.0), {"embedding_dim": 10}, centroids=rng.normal(size=(1, 10)))


def test_atlas_truncated_array(tmp_path):
    io.write_atlas(make_atlas(np.random.default_rng(4)), tmp_path / "a")
    f = tmp_path / "a" / "centroids.f32"
    f.write_bytes(f.read_bytes()[:-4])
    with pytest.raises(io.FormatError, match="centroids"):
        io.read_atlas(tmp_path / "a")
