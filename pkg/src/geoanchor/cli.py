"""Command-line entry point: ``geoanchor <command> ...``.

Every command writes only under ``--out`` and is deterministic given its
arguments and ``--seed``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .align import CorrespondenceWindow, push_correspondence
from .features import (
    FeatureDirectoryProvider,
    LocalFeatureSet,
    Style,
    SyntheticTileProvider,
    load_features,
    save_features,
    synth_features,
)
from .geometry import Frame, GeoPoint, GravityVector, Trajectory, ate, read_trajectory_csv, write_trajectory_csv
from .metrics import EvalRecord, evaluate, format_table, write_report
from .pipeline import PipelineResult, make_grid, make_world, simulate, solve_anchor
from .retrieval import db_build, load_db, query_topk, save_db
from .scenario import Scenario, ScenarioError, load_scenario
from .tiles import ground_truth_neighbors, positives_within_radius, read_manifest, write_manifest
from .vlad import build_vocabulary, encode, load_vocabulary, save_vocabulary

log = logging.getLogger("geoanchor")


@dataclass
class CommandOutcome:
    exit_code: int = 0
    artifacts: list[Path] = field(default_factory=list)


class CommandError(Exception):
    pass


def _json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n", encoding="utf-8")
    return path


def _finite(x):
    return x if x is None or math.isfinite(x) else None


def _scenario(args) -> Scenario:
    return load_scenario(args.config) if args.config else Scenario()


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _feature_files(inputs) -> list[Path]:
    files = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            files += sorted(p.glob("*.flf"), key=lambda q: (len(q.stem), q.stem))
        elif p.is_file():
            files.append(p)
        else:
            raise CommandError(f"feature input not found: {p}")
    if not files:
        raise CommandError("no feature files given")
    return files


def _read_queries(path: Path) -> list[tuple[str, GeoPoint]]:
    if not path.is_file():
        raise CommandError(f"query list not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    try:
        return [(r["query_id"], GeoPoint(float(r["easting"]), float(r["northing"]))) for r in rows]
    except (KeyError, ValueError) as exc:
        raise CommandError(f"{path}: bad query row ({exc})") from None


def cmd_synth_data(args) -> CommandOutcome:
    """Materialize the synthetic world as feature files, a manifest and a query set."""
    sc = _scenario(args)
    out = _out(args)
    world, grid = make_world(sc), make_grid(sc)
    tiles_dir = out / "tiles"
    tiles_dir.mkdir(exist_ok=True)
    provider = SyntheticTileProvider(world)
    for t in grid.tiles:
        save_features(tiles_dir / f"{t.tile_id}.flf", provider(t))
    write_manifest(out / "manifest.csv", grid)
    q_dir = out / "queries"
    q_dir.mkdir(exist_ok=True)
    rng = np.random.default_rng([args.seed, 7])
    lo, hi = grid.centers.min(axis=0), grid.centers.max(axis=0)
    rows = []
    for i in range(args.queries):
        c = GeoPoint.from_array(rng.uniform(lo, hi))
        fs = synth_features(world, c, sc.vpr.query_fov, Style.CAMERA, sc.vpr.camera_noise, rng)
        save_features(q_dir / f"q{i}.flf", LocalFeatureSet(fs.features, f"q{i}"))
        rows.append((f"q{i}", repr(c.easting), repr(c.northing)))
    with (out / "queries.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["query_id", "easting", "northing"])
        w.writerows(rows)
    print(f"wrote {len(grid)} tiles and {args.queries} queries to {out}")
    return CommandOutcome(0, [out / "manifest.csv", out / "queries.csv", tiles_dir, q_dir])


def cmd_build_vocab(args) -> CommandOutcome:
    sc = _scenario(args)
    n_c = args.n_c if args.n_c is not None else sc.vpr.n_c
    sets = [load_features(p) for p in _feature_files(args.features)]
    if args.samples:
        rng = np.random.default_rng([args.seed, 13])
        sets = [
            LocalFeatureSet(s.features[np.sort(rng.choice(len(s), min(args.samples, len(s)), replace=False))], s.source_id)
            for s in sets
        ]
    vocab = build_vocabulary(sets, n_c, args.seed, sc.vpr.max_iters)
    path = _out(args) / args.name
    save_vocabulary(path, vocab)
    print(f"inertia {vocab.inertia_history[-1]:.6g} after {len(vocab.inertia_history) - 1} iterations")
    print("cluster sizes " + " ".join(str(s) for s in vocab.cluster_sizes))
    print(f"fingerprint {vocab.fingerprint:016x}")
    return CommandOutcome(0, [path])


def cmd_encode_db(args) -> CommandOutcome:
    grid = read_manifest(args.manifest)
    vocab = load_vocabulary(args.vocab)
    if args.features:
        provider = FeatureDirectoryProvider(Path(args.features))
    else:
        provider = SyntheticTileProvider(make_world(_scenario(args)))
    db = db_build(grid, vocab, provider)
    path = _out(args) / args.name
    save_db(path, db)
    print(f"encoded {len(db)} tiles into {path}")
    return CommandOutcome(0, [path])


def cmd_eval(args) -> CommandOutcome:
    if not args.k <= args.n:
        raise CommandError("k must not exceed n")
    grid = read_manifest(args.manifest)
    vocab = load_vocabulary(args.vocab)
    db = load_db(args.db)
    queries = _read_queries(Path(args.queries))
    q_dir = Path(args.query_features) if args.query_features else Path(args.queries).parent / "queries"
    records = []
    for qid, pos in queries:
        res = query_topk(db, encode(load_features(q_dir / f"{qid}.flf"), vocab), max(args.n, 1), qid)
        positives = None if args.recall_radius is None else positives_within_radius(grid, pos, args.recall_radius)
        records.append(EvalRecord(qid, res.tile_ids, ground_truth_neighbors(grid, pos, args.n), positives))
    rows = evaluate(records, args.k, args.n)
    print(format_table(rows, args.label))
    return CommandOutcome(0, write_report(_out(args), rows, records, args.k, args.n))


def _read_correspondences(path: Path) -> CorrespondenceWindow:
    if not path.is_file():
        raise CommandError(f"correspondence file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    win = CorrespondenceWindow(max(len(rows), 1))
    try:
        for r in rows:
            local = [float(r["x"]), float(r["y"]), float(r["z"])]
            push_correspondence(win, local, GeoPoint(float(r["easting"]), float(r["northing"])))
    except (KeyError, ValueError) as exc:
        raise CommandError(f"{path}: bad correspondence row ({exc})") from None
    return win


def _vector(text: str) -> np.ndarray:
    try:
        v = np.array([float(x) for x in text.split(",")])
    except ValueError:
        raise CommandError(f"bad vector {text!r}") from None
    if v.shape != (3,) or not np.linalg.norm(v) > 0:
        raise CommandError(f"bad vector {text!r}")
    return v / np.linalg.norm(v)


def cmd_align(args) -> CommandOutcome:
    sc = _scenario(args)
    cfg = sc.align if args.method is None else sc.with_updates(align={"method": args.method}).align
    win = _read_correspondences(Path(args.correspondences))
    rep = solve_anchor(win, cfg, GravityVector(_vector(args.g_local), Frame.LOCAL))
    path = _json(_out(args) / "alignment.json", {**rep.to_dict(), "method": cfg.method, "pairs": len(win)})
    print(f"yaw {math.degrees(rep.transform.yaw()):.4f} deg, rms residual {rep.rms_residual:.3f} m")
    return CommandOutcome(0, [path])


def cmd_ate(args) -> CommandOutcome:
    est = read_trajectory_csv(args.estimate)
    truth = read_trajectory_csv(args.truth)
    res = ate(est, truth, args.window)
    out = _out(args)
    path = _json(out / "ate.json", res.as_dict())
    pts = out / "ate_points.csv"
    with pts.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "error"])
        w.writerows((repr(t), repr(e)) for t, e in zip(res.timestamps, res.per_point))
    print(f"ATE mean {res.mean:.3f} m, sd {res.sd:.3f} m over {len(res.per_point)} pairs")
    return CommandOutcome(0, [path, pts])


def write_run(out: Path, result: PipelineResult) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    files = []
    est = out / "estimates.csv"
    with est.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "easting", "northing", "var_e", "var_n"])
        if result.estimates is not None:
            for t, p, v in zip(result.estimates.timestamps, result.estimates.positions, result.variances):
                w.writerow([repr(float(x)) for x in (t, p[0], p[1], v[0], v[1])])
    files.append(est)
    truth_xy = Trajectory(result.truth.timestamps, result.truth.xy)
    write_trajectory_csv(out / "truth.csv", truth_xy)
    write_trajectory_csv(out / "odometry.csv", result.odometry)
    files += [out / "truth.csv", out / "odometry.csv"]
    ate_doc = result.ate.as_dict() if result.estimates is not None else {"mean": None, "sd": None, "count": 0}
    files.append(_json(out / "ate.json", ate_doc))
    files.append(_json(out / "diagnostics.json", {k: _finite(v) if isinstance(v, float) else v for k, v in result.report.items()}))
    err = out / "error_over_time.csv"
    with err.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "error", "obs_error", "false_positives", "anchored"])
        for k in result.log:
            e = "" if k.est_e is None else repr(math.hypot(k.est_e - k.true_e, k.est_n - k.true_n))
            o = "" if k.obs_e is None else repr(math.hypot(k.obs_e - k.true_e, k.obs_n - k.true_n))
            w.writerow([repr(k.timestamp), e, o, k.false_positives, int(k.anchored)])
    files.append(err)
    al = out / "alignment.jsonl"
    with al.open("w", encoding="utf-8") as fh:
        for t, rep in result.anchors:
            fh.write(json.dumps({"timestamp": t, **rep.to_dict()}, sort_keys=True) + "\n")
    files.append(al)
    return files


def cmd_simulate(args) -> CommandOutcome:
    sc = _scenario(args)
    out = _out(args)
    if not args.ab_filtering:
        result = simulate(sc, args.seed)
        files = write_run(out, result)
        r = result.report
        print(f"ATE mean {r.get('ate_mean', float('nan')):.3f} m, sd {r.get('ate_sd', float('nan')):.3f} m, "
              f"anchors {r['anchors']}, rejected updates {r['updates_rejected']}")
        return CommandOutcome(0, files)
    files = []
    rows = []
    arms = {"filtered": sc.with_updates(vpr={"filtering": True}), "unfiltered": sc.with_updates(vpr={"filtering": False})}
    for i in range(args.runs):
        seed = args.seed + i
        row = {"seed": seed}
        for name, arm in arms.items():
            res = simulate(arm, seed)
            files += write_run(out / f"seed{seed}" / name, res)
            row[name] = res.report.get("ate_mean", math.nan)
            row[name + "_sd"] = res.report.get("ate_sd", math.nan)
        rows.append(row)
    table = out / "ab_comparison.csv"
    cols = ["seed", "filtered", "filtered_sd", "unfiltered", "unfiltered_sd"]
    with table.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols + ["filtered_better"])
        for r in rows:
            w.writerow([r["seed"]] + [repr(float(r[c])) for c in cols[1:]] + [int(r["filtered"] < r["unfiltered"])])
    wins = sum(r["filtered"] < r["unfiltered"] for r in rows)
    print(f"{'seed':>6} {'filtered':>10} {'unfiltered':>11}")
    for r in rows:
        print(f"{r['seed']:>6} {r['filtered']:>10.2f} {r['unfiltered']:>11.2f}")
    print(f"filtering better on {wins}/{len(rows)} seeds")
    return CommandOutcome(0, files + [table])


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed (default 0)")
    common.add_argument("--config", default=argparse.SUPPRESS, help="scenario file")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory (default .)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="geoanchor", description=__doc__.splitlines()[0], parents=[common])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", parents=[common], help="write synthetic tiles, manifest and queries")
    s.add_argument("--queries", type=int, default=50)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("build-vocab", parents=[common], help="cluster local features into a vocabulary")
    s.add_argument("features", nargs="+", help=".flf files or directories of them")
    s.add_argument("--n-c", type=int, default=None)
    s.add_argument("--samples", type=int, default=0, help="subsample each file to this many features")
    s.add_argument("--name", default="vocab.flvb")
    s.set_defaults(func=cmd_build_vocab)

    s = sub.add_parser("encode-db", parents=[common], help="encode one descriptor per tile")
    s.add_argument("--manifest", required=True)
    s.add_argument("--vocab", required=True)
    s.add_argument("--features", default=None, help="directory of <tile_id>.flf (default: synthetic world)")
    s.add_argument("--name", default="db.fldb")
    s.set_defaults(func=cmd_encode_db)

    s = sub.add_parser("eval", parents=[common], help="Recall@1, Recall@n and Top-k@n of a query set")
    s.add_argument("--db", required=True)
    s.add_argument("--vocab", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--queries", required=True, help="CSV query_id,easting,northing")
    s.add_argument("--query-features", default=None, help="directory of <query_id>.flf")
    s.add_argument("-k", type=int, default=3)
    s.add_argument("-n", type=int, default=5)
    s.add_argument("--label", default="vlad")
    s.add_argument(
        "--recall-radius", type=float, default=None, help="count recall hits within this distance instead of GT_n"
    )
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("align", parents=[common], help="anchor a correspondence CSV (timestamp,x,y,z,easting,northing)")
    s.add_argument("correspondences")
    s.add_argument("--method", choices=("gravity", "rigid", "soft"), default=None)
    s.add_argument("--g-local", default="0,0,-1", help="gravity in the odometry frame")
    s.set_defaults(func=cmd_align)

    s = sub.add_parser("simulate", parents=[common], help="run the closed-loop pipeline")
    s.add_argument("--ab-filtering", action="store_true", help="paired runs with filtering on and off")
    s.add_argument("--runs", type=int, default=1, help="paired seeds for --ab-filtering")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("ate", parents=[common], help="absolute trajectory error of an estimate")
    s.add_argument("estimate")
    s.add_argument("truth")
    s.add_argument("--window", type=float, default=0.5, help="timestamp association window (s)")
    s.set_defaults(func=cmd_ate)
    return p


def run(argv=None) -> CommandOutcome:
    args = build_parser().parse_args(argv)
    for name, default in (("seed", 0), ("config", None), ("out", "."), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CommandError, ScenarioError, FileNotFoundError, ValueError, RuntimeError, OSError) as exc:
        print(f"geoanchor {args.command}: error: {exc}", file=sys.stderr)
        return CommandOutcome(1, [])


def main(argv=None) -> int:
    return run(argv).exit_code


if __name__ == "__main__":
    sys.exit(main())
