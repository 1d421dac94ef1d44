"""Reading and writing fiber sets, label volumes and atlases.

Binary fiber files (``.fibs``)::

    b"FIBS" | u32 version=1 | u32 fiber count
    per fiber: u32 point count | count*3 little-endian f32 (x, y, z, ...)

Label volumes (``.lvol``)::

    b"LVOL" | u32 version=1 | 3*u32 dims | 3*f32 origin | 3*f32 spacing
    nx*ny*nz little-endian i32 labels, x fastest

An atlas is a directory holding ``manifest.json`` and one raw
little-endian f32 file per array named in the manifest.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Normalization, arc_length

FIBER_MAGIC = b"FIBS"
LABEL_MAGIC = b"LVOL"
FIBER_VERSION = 1
LABEL_VERSION = 1
ATLAS_VERSION = 1

_U32 = struct.Struct("<I")


class FormatError(ValueError):
    """Malformed or inconsistent file content."""


# ---------------------------------------------------------------- fibers

@dataclass
class FiberSet:
    fibers: list[np.ndarray]
    ids: np.ndarray | None = None

    def __post_init__(self):
        self.fibers = [np.asarray(f, dtype=np.float64).reshape(-1, 3) for f in self.fibers]
        if self.ids is None:
            self.ids = np.arange(len(self.fibers), dtype=np.int64)
        else:
            self.ids = np.asarray(self.ids, dtype=np.int64)
        if len(self.ids) != len(self.fibers):
            raise ValueError("ids and fibers differ in length")
        for i, f in enumerate(self.fibers):
            if len(f) < 2:
                raise ValueError(f"fiber {i} has {len(f)} point(s); need at least 2")
            if not np.isfinite(f).all():
                raise ValueError(f"fiber {i} has a non-finite coordinate")

    def __len__(self):
        return len(self.fibers)

    def subset(self, index) -> "FiberSet":
        index = np.asarray(index, dtype=np.int64)
        return FiberSet([self.fibers[i] for i in index], self.ids[index])


def write_fiberset(fs: FiberSet, path) -> None:
    path = Path(path)
    if path.suffix == ".json":
        _write_fiberset_text(fs, path)
        return
    parts = [FIBER_MAGIC, _U32.pack(FIBER_VERSION), _U32.pack(len(fs))]
    for f in fs.fibers:
        parts.append(_U32.pack(len(f)))
        parts.append(np.ascontiguousarray(f, dtype="<f4").tobytes())
    path.write_bytes(b"".join(parts))


def read_fiberset(path) -> FiberSet:
    """Read a ``.fibs`` binary file, or a ``.json`` text fixture.

    Raises:
        FormatError: bad magic, unsupported version, truncation, a fiber
            with fewer than 2 points, or a non-finite coordinate. The
            message names the byte offset where the problem was found.
    """
    path = Path(path)
    if path.suffix == ".json":
        return _read_fiberset_text(path)
    return parse_fiberset(path.read_bytes())


def parse_fiberset(data: bytes) -> FiberSet:
    if data[:4] != FIBER_MAGIC:
        raise FormatError("bad magic at offset 0")
    pos = 4
    version, pos = _read_u32(data, pos)
    if version != FIBER_VERSION:
        raise FormatError(f"unsupported fiber format version {version} at offset 4")
    count, pos = _read_u32(data, pos)
    fibers = []
    for i in range(count):
        start = pos
        npts, pos = _read_u32(data, pos)
        if npts < 2:
            raise FormatError(f"fiber {i} has {npts} point(s) (< 2) at offset {start}")
        nbytes = npts * 12
        if pos + nbytes > len(data):
            raise FormatError(f"truncated payload at offset {pos}: fiber {i} needs {nbytes} bytes, {len(data) - pos} left")
        pts = np.frombuffer(data, dtype="<f4", count=npts * 3, offset=pos).astype(np.float64).reshape(npts, 3)
        bad = np.flatnonzero(~np.isfinite(pts.ravel()))
        if len(bad):
            raise FormatError(f"non-finite coordinate at offset {pos + 4 * int(bad[0])}")
        fibers.append(pts)
        pos += nbytes
    if pos != len(data):
        raise FormatError(f"trailing bytes at offset {pos}")
    return FiberSet(fibers)


def _read_u32(data: bytes, pos: int) -> tuple[int, int]:
    if pos + 4 > len(data):
        raise FormatError(f"truncated payload at offset {pos}")
    return _U32.unpack_from(data, pos)[0], pos + 4


def _write_fiberset_text(fs: FiberSet, path: Path) -> None:
    doc = {"fibers": [f.tolist() for f in fs.fibers], "ids": fs.ids.tolist()}
    path.write_text(json.dumps(doc) + "\n")


def _read_fiberset_text(path: Path) -> FiberSet:
    try:
        doc = json.loads(path.read_text())
        fibers = [np.asarray(f, dtype=np.float64) for f in doc["fibers"]]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed fiber text file: {exc}") from exc
    try:
        return FiberSet(fibers, doc.get("ids"))
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def filter_by_length(fs: FiberSet, min_mm: float) -> FiberSet:
    """Keep fibers whose polyline length is strictly greater than ``min_mm``."""
    if min_mm < 0:
        raise ValueError("min_mm must be >= 0")
    keep = [i for i, f in enumerate(fs.fibers) if arc_length(f) > min_mm]
    return fs.subset(keep)


# ---------------------------------------------------------------- labels

@dataclass
class LabelVolume:
    labels: np.ndarray          # (nx, ny, nz) int32
    origin: tuple[float, float, float]
    spacing: tuple[float, float, float]

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int32)
        if self.labels.ndim != 3 or min(self.labels.shape) < 1:
            raise ValueError(f"labels must be a non-empty 3D array, got shape {self.labels.shape}")
        if (self.labels < 0).any():
            raise ValueError("labels must be non-negative")
        self.origin = tuple(float(v) for v in self.origin)
        self.spacing = tuple(float(v) for v in self.spacing)
        if len(self.origin) != 3 or len(self.spacing) != 3:
            raise ValueError("origin and spacing need 3 components")
        if not all(math.isfinite(v) for v in self.origin):
            raise ValueError("origin must be finite")
        if not all(math.isfinite(s) and s > 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.labels.shape)


def write_labelvolume(vol: LabelVolume, path) -> None:
    head = LABEL_MAGIC + struct.pack("<4I", LABEL_VERSION, *vol.dims)
    head += struct.pack("<6f", *vol.origin, *vol.spacing)
    body = np.asarray(vol.labels, dtype="<i4").ravel(order="F").tobytes()
    Path(path).write_bytes(head + body)


def read_labelvolume(path) -> LabelVolume:
    return parse_labelvolume(Path(path).read_bytes())


def parse_labelvolume(data: bytes) -> LabelVolume:
    if data[:4] != LABEL_MAGIC:
        raise FormatError("bad magic at offset 0")
    if len(data) < 44:
        raise FormatError(f"truncated header at offset {len(data)}")
    version, nx, ny, nz = struct.unpack_from("<4I", data, 4)
    if version != LABEL_VERSION:
        raise FormatError(f"unsupported label volume version {version} at offset 4")
    if min(nx, ny, nz) < 1:
        raise FormatError("label volume dims must be positive at offset 8")
    vals = struct.unpack_from("<6f", data, 20)
    count = nx * ny * nz
    if len(data) - 44 < count * 4:
        raise FormatError(f"truncated payload at offset {44 + (len(data) - 44) // 4 * 4}: "
                          f"expected {count} labels, found {(len(data) - 44) // 4}")
    if len(data) - 44 > count * 4:
        raise FormatError(f"trailing bytes at offset {44 + count * 4}")
    labels = np.frombuffer(data, dtype="<i4", count=count, offset=44).reshape((nx, ny, nz), order="F")
    try:
        return LabelVolume(labels.copy(), vals[:3], vals[3:])
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


# ---------------------------------------------------------------- atlas

@dataclass
class Atlas:
    """Deployable clustering model.

    ``centroids`` and ``tap`` are ``None`` for a pretrained-only atlas.
    Array values are kept float32-representable so that writing and
    reading reproduces them exactly.
    """

    weights: dict[str, np.ndarray]
    normalization: Normalization
    hyperparameters: dict
    centroids: np.ndarray | None = None
    tap: list[list[int]] | None = None
    version: int = ATLAS_VERSION

    def __post_init__(self):
        self.weights = {k: _f32_exact(v) for k, v in self.weights.items()}
        emb = int(self.hyperparameters.get("embedding_dim", 10))
        if self.centroids is not None:
            self.centroids = _f32_exact(self.centroids)
            if self.centroids.ndim != 2 or self.centroids.shape[0] < 2:
                raise ValueError("atlas needs a (k, dim) centroid array with k >= 2")
            if self.centroids.shape[1] != emb:
                raise ValueError(f"centroid dimension {self.centroids.shape[1]} != embedding dimension {emb}")
            if self.tap is None:
                self.tap = [[] for _ in range(len(self.centroids))]
            if len(self.tap) != len(self.centroids):
                raise ValueError("tap must have one region list per centroid")
            self.tap = [sorted(int(r) for r in set(t)) for t in self.tap]

    @property
    def k(self) -> int | None:
        return None if self.centroids is None else len(self.centroids)

    @property
    def is_trained(self) -> bool:
        return self.centroids is not None


def _f32_exact(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64).astype(np.float32).astype(np.float64)


def write_atlas(atlas: Atlas, path) -> None:
    """Write ``atlas`` into directory ``path`` (created if missing)."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    arrays = dict(atlas.weights)
    if atlas.centroids is not None:
        arrays["centroids"] = atlas.centroids
    entries = {}
    for name in sorted(arrays):
        fname = f"{name}.f32"
        (out / fname).write_bytes(np.ascontiguousarray(arrays[name], dtype="<f4").tobytes())
        entries[name] = {"file": fname, "shape": list(arrays[name].shape)}
    manifest = {
        "format": "fibercluster-atlas",
        "version": atlas.version,
        "hyperparameters": atlas.hyperparameters,
        "normalization": {"center": list(atlas.normalization.center), "scale": atlas.normalization.scale},
        "arrays": entries,
        "weights": sorted(atlas.weights),
        "tap": atlas.tap,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def read_atlas(path) -> Atlas:
    src = Path(path)
    try:
        manifest = json.loads((src / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise FormatError(f"no atlas manifest in {src}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed atlas manifest: {exc}") from exc
    version = manifest.get("version")
    if version != ATLAS_VERSION:
        raise FormatError(f"unsupported atlas version {version}")
    arrays = {}
    for name, entry in manifest["arrays"].items():
        shape = tuple(entry["shape"])
        raw = (src / entry["file"]).read_bytes()
        if len(raw) != 4 * int(np.prod(shape)):
            raise FormatError(f"atlas array {name!r} has {len(raw)} bytes, expected {4 * int(np.prod(shape))}")
        arrays[name] = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
    norm = manifest["normalization"]
    try:
        return Atlas(
            weights={k: arrays[k] for k in manifest["weights"]},
            normalization=Normalization(tuple(norm["center"]), norm["scale"]),
            hyperparameters=manifest["hyperparameters"],
            centroids=arrays.get("centroids"),
            tap=manifest.get("tap"),
            version=version,
        )
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def atlas_digest(path) -> str:
    """SHA-256 over the manifest and every array file, in name order."""
    src = Path(path)
    h = hashlib.sha256()
    for f in sorted(p for p in src.iterdir() if p.is_file()):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()
