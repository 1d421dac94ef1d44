"""Command-line entry point: synth, pretrain, train, cluster, eval, distmat.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure. Failures print a single diagnostic line on stderr.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import geometry, io, metrics, synthetic, training

log = logging.getLogger("fibercluster")

WORKERS_ENV = "FIBERCLUSTER_WORKERS"
ASSIGNMENT_MAGIC = "# fibercluster-assignments 1"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- config

def _coerce(value: str, default, key: str):
    try:
        if isinstance(default, bool):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            items = [v.strip() for v in value.split(",") if v.strip()]
            if default and isinstance(default[0], tuple):
                # schedule: "iters:lr,iters:lr"
                return tuple((int(a), float(b)) for a, b in (v.split(":") for v in items))
            kind = type(default[0]) if default else float
            return tuple(kind(v) for v in items)
    except ValueError:
        raise UsageError(f"config key {key!r}: cannot parse {value!r}") from None
    raise UsageError(f"config key {key!r}: unsupported type")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join(f"{a}:{float(b)!r}" for a, b in value)
        return ",".join(_format(v) for v in value)
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def resolve_config(cls, file_path, overrides, flags, require_seed: bool):
    """Build a ``cls`` instance from defaults < config file < --set < flags."""
    defaults = {f.name: f.default for f in dataclasses.fields(cls)}
    raw = {}
    if file_path:
        raw.update(read_config_file(file_path))
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        raw[key.strip()] = value.strip()
    unknown = sorted(set(raw) - set(defaults))
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    values = {k: _coerce(v, defaults[k], k) for k, v in raw.items()}
    values.update({k: v for k, v in flags.items() if v is not None})
    if require_seed and "seed" not in values:
        raise UsageError("a seed is required (--seed, --set seed=N or a config file)")
    try:
        cfg = cls(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    for f in dataclasses.fields(cfg):
        log.info("config %s = %s", f.name, _format(getattr(cfg, f.name)))
    return cfg


def config_lines(cfg) -> str:
    return "".join(f"{f.name} = {_format(getattr(cfg, f.name))}\n" for f in dataclasses.fields(cfg))


# ---------------------------------------------------------------- assignment files

def write_assignments(path, ids, result: metrics.ClusterResult, digest: str, h: float) -> None:
    """Text table: header lines (atlas hash, k, h), then id, cluster, q_m, outlier."""
    lines = [ASSIGNMENT_MAGIC, f"# atlas_sha256 {digest}", f"# k {result.k}", f"# h {h!r}",
             "id\tcluster\tq_m\toutlier"]
    for i, c, q, o in zip(ids, result.clusters, result.q_max, result.outlier):
        lines.append(f"{int(i)}\t{int(c)}\t{float(q)!r}\t{int(o)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_assignments(path):
    """Returns ``(header, ids, clusters, q_max, outlier)``."""
    try:
        rows = Path(path).read_text().splitlines()
    except OSError as exc:
        raise io.FormatError(f"{path}: {exc.strerror}") from None
    if not rows or rows[0] != ASSIGNMENT_MAGIC:
        raise io.FormatError(f"{path}: not an assignment file")
    header, body = {}, []
    for n, row in enumerate(rows[1:], start=2):
        if row.startswith("# "):
            key, _, value = row[2:].partition(" ")
            header[key] = value
        elif row == "id\tcluster\tq_m\toutlier" or not row.strip():
            continue
        else:
            parts = row.split("\t")
            if len(parts) != 4:
                raise io.FormatError(f"{path}:{n}: expected 4 columns")
            try:
                body.append((int(parts[0]), int(parts[1]), float(parts[2]), int(parts[3])))
            except ValueError:
                raise io.FormatError(f"{path}:{n}: malformed row") from None
    for key in ("atlas_sha256", "k", "h"):
        if key not in header:
            raise io.FormatError(f"{path}: header lacks {key}")
    header["k"], header["h"] = int(header["k"]), float(header["h"])
    table = np.array(body, dtype=np.float64).reshape(-1, 4)
    return (header, table[:, 0].astype(np.int64), table[:, 1].astype(np.int64), table[:, 2],
            table[:, 3].astype(bool))


# ---------------------------------------------------------------- commands

def _progress_writer(path, cfg):
    if not path:
        return training.History()
    fh = open(path, "w")
    fh.write(json.dumps({"config": {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)}}) + "\n")

    class _History(training.History):
        def add(self, **record):
            super().add(**record)
            fh.write(json.dumps(record) + "\n")
            fh.flush()

    return _History()


def _load_fibers(path, min_length):
    fs = io.read_fiberset(path)
    if min_length and min_length > 0:
        kept = io.filter_by_length(fs, min_length)
        log.info("length filter > %g mm kept %d of %d fibers", min_length, len(kept), len(fs))
        fs = kept
    if len(fs) == 0:
        raise io.FormatError(f"{path}: no fibers left after filtering")
    return fs


def cmd_synth(args):
    cfg = resolve_config(synthetic.SynthConfig, args.config, args.set, {"seed": args.seed}, require_seed=True)
    fs, truth, vol, _ = synthetic.generate(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_fiberset(fs, out / "fibers.fibs")
    synthetic.write_ground_truth(truth, out / "truth.tsv")
    io.write_labelvolume(vol, out / "labels.lvol")
    (out / "config.txt").write_text(config_lines(cfg))
    log.info("wrote %d fibers (%d outliers) to %s", len(fs), int(truth.outlier.sum()), out)


def _train_flags(args):
    flags = {"seed": args.seed, "k": getattr(args, "k", None)}
    if getattr(args, "no_anatomy", False):
        flags["anatomy"] = False
    if getattr(args, "no_outlier_removal", False):
        flags["outlier_removal"] = False
    return flags


def cmd_pretrain(args):
    cfg = resolve_config(training.TrainConfig, args.config, args.set, _train_flags(args), require_seed=True)
    fs = _load_fibers(args.fibers, args.min_length)
    atlas = training.pretrain(fs, cfg, _progress_writer(args.progress, cfg))
    io.write_atlas(atlas, args.out)
    log.info("pretrained atlas written to %s", args.out)


def cmd_train(args):
    cfg = resolve_config(training.TrainConfig, args.config, args.set, _train_flags(args), require_seed=True)
    fs = _load_fibers(args.fibers, args.min_length)
    pretrained = io.read_atlas(args.pretrained)
    vol = io.read_labelvolume(args.labels) if args.labels else None
    if cfg.anatomy and vol is None:
        raise UsageError("anatomical weighting needs --labels (or pass --no-anatomy)")
    atlas = training.cluster_train(fs, pretrained, cfg, vol, _progress_writer(args.progress, cfg))
    io.write_atlas(atlas, args.out)
    log.info("atlas written to %s", args.out)


def cmd_cluster(args):
    atlas = io.read_atlas(args.atlas)
    if not atlas.is_trained:
        raise io.FormatError(f"{args.atlas}: atlas is pretrained only (run train first)")
    fs = _load_fibers(args.fibers, args.min_length)
    vol = io.read_labelvolume(args.labels) if args.labels else None
    if atlas.hyperparameters.get("anatomy") and vol is None:
        raise UsageError("this atlas uses anatomical weighting; pass --labels")
    h = float(atlas.hyperparameters.get("h_effective", 0.0)) if args.h is None else args.h
    inf = training.infer(fs, atlas, vol, h=h)
    write_assignments(args.out, fs.ids, inf.result, io.atlas_digest(args.atlas), h)
    log.info("%d fibers assigned, %d flagged as outliers", len(fs), int(inf.result.outlier.sum()))


def _subject_result(fiber_path, assign_path, atlas, digest):
    header, ids, clusters, q_max, outlier = read_assignments(assign_path)
    if header["atlas_sha256"] != digest:
        raise io.FormatError(f"{assign_path}: assignments were made with a different atlas")
    fs = io.read_fiberset(fiber_path)
    index = {int(i): n for n, i in enumerate(fs.ids)}
    missing = [int(i) for i in ids if int(i) not in index]
    if missing:
        raise io.FormatError(f"{assign_path}: fiber id {missing[0]} not found in {fiber_path}")
    raw = [fs.fibers[index[int(i)]] for i in ids]
    pts = geometry.resample_all(raw, int(atlas.hyperparameters["n_points"]))
    try:
        result = metrics.ClusterResult(clusters, atlas.k, outlier, q_max, pts, raw)
    except ValueError as exc:
        raise io.FormatError(f"{assign_path}: {exc}") from None
    return result, ids


def _broadcast(items, n, name):
    items = list(items or [])
    if len(items) == 1 and n > 1:
        items = items * n
    if items and len(items) != n:
        raise UsageError(f"give one {name} per subject or a single shared one")
    return items


def cmd_eval(args):
    atlas = io.read_atlas(args.atlas)
    digest = io.atlas_digest(args.atlas)
    n = len(args.assignments)
    fibers = _broadcast(args.fibers, n, "--fibers")
    labels = _broadcast(args.labels, n, "--labels")
    truths = _broadcast(args.truth, n, "--truth")
    if len(fibers) != n:
        raise UsageError("--fibers is required")
    report = {"subjects": n, "k": atlas.k}
    per = {"db": [], "tapc": [], "outliers": []}
    results = []
    for s in range(n):
        result, ids = _subject_result(fibers[s], args.assignments[s], atlas, digest)
        results.append(result)
        tag = f"subject{s}."
        try:
            db = metrics.db_index(result).db
        except ValueError:
            db = float("nan")
        per["db"].append(db)
        per["outliers"].append(float(result.outlier.sum()))
        report[tag + "db"] = db
        report[tag + "detected"] = metrics.detected_clusters(result)
        report[tag + "outliers"] = int(result.outlier.sum())
        if labels:
            vol = io.read_labelvolume(labels[s])
            t = metrics.tapc(result, vol, atlas.tap) if atlas.tap else float("nan")
            per["tapc"].append(t)
            report[tag + "tapc"] = t
        if truths:
            truth = synthetic.read_ground_truth(truths[s])
            if len(ids) != len(truth.bundle) or (ids != np.arange(len(ids))).any():
                raise io.FormatError(f"{truths[s]}: ground truth needs assignments for ids 0..N-1 in order")
            for key, value in synthetic.match_clusters(result, truth).items():
                report[tag + key] = value
    report["db"] = float(np.mean(per["db"]))
    report["wmpg"] = metrics.wmpg(results, atlas.k)
    if per["tapc"]:
        report["tapc"] = float(np.mean(per["tapc"]))
    if truths:
        for key in ("accuracy", "ari", "outlier_precision", "outlier_recall", "inlier_rejection"):
            report[key] = float(np.mean([report[f"subject{s}.{key}"] for s in range(n)]))
    text = "".join(f"{k}={_format(v)}\n" for k, v in report.items())
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)


def cmd_distmat(args):
    fs = io.read_fiberset(args.fibers)
    d = geometry.pairwise_mdf(geometry.resample_all(fs.fibers, args.n_points))
    with open(args.out, "wb") as fh:
        np.save(fh, d)
    log.info("wrote %dx%d MDF matrix to %s", len(d), len(d), args.out)


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fibercluster", description="Deep fiber clustering toolkit.")
    p.add_argument("--workers", type=int, default=None,
                   help=f"worker threads for distance kernels (default: ${WORKERS_ENV} or all cores)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="key = value configuration file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    with_config(sp)
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_synth)

    for name, func, text in (("pretrain", cmd_pretrain, "stage 1: distance-regression pretraining"),
                             ("train", cmd_train, "stage 2: k-means init and clustering")):
        sp = sub.add_parser(name, help=text)
        with_config(sp)
        sp.add_argument("fibers")
        sp.add_argument("--out", required=True, help="atlas directory to write")
        sp.add_argument("--progress", help="write progress records as JSON lines")
        sp.add_argument("--min-length", type=float, default=40.0, help="drop fibers not longer than this (mm)")
        sp.add_argument("--k", type=int)
        if name == "train":
            sp.add_argument("--pretrained", required=True, help="pretrained atlas directory")
            sp.add_argument("--labels", help="label volume")
            sp.add_argument("--no-anatomy", action="store_true", help="disable the anatomical weighting")
            sp.add_argument("--no-outlier-removal", action="store_true", help="disable outlier rejection")
        sp.set_defaults(func=func)

    sp = sub.add_parser("cluster", help="assign fibers with a trained atlas")
    sp.add_argument("fibers")
    sp.add_argument("--atlas", required=True)
    sp.add_argument("--labels")
    sp.add_argument("--out", required=True, help="assignment file")
    sp.add_argument("--h", type=float, help="rejection threshold (default: the atlas value)")
    sp.add_argument("--min-length", type=float, default=40.0)
    sp.set_defaults(func=cmd_cluster)

    sp = sub.add_parser("eval", help="DB, WMPG and TAPC (plus ARI with ground truth)")
    sp.add_argument("assignments", nargs="+", help="one assignment file per subject")
    sp.add_argument("--fibers", nargs="+", required=True)
    sp.add_argument("--atlas", required=True)
    sp.add_argument("--labels", nargs="+")
    sp.add_argument("--truth", nargs="+")
    sp.add_argument("--out", help="also write the report here")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("distmat", help="pairwise MDF matrix (.npy)")
    sp.add_argument("fibers")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-points", type=int, default=geometry.DEFAULT_N_POINTS)
    sp.set_defaults(func=cmd_distmat)
    return p


def _workers(flag):
    if flag is not None:
        return flag
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
    return None


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(name)s: %(message)s", stream=sys.stderr)
        geometry.set_workers(_workers(args.workers))
        args.func(args)
        return EXIT_OK
    except UsageError as exc:
        print(f"fibercluster: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"fibercluster: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (io.FormatError, OSError, ValueError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        if isinstance(exc, OSError) and exc.filename:
            msg = f"{exc.filename}: {exc.strerror}"
        print(f"fibercluster: data error: {msg}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
