import csv
import hashlib
import json
import shutil

import numpy as np
import pytest

from geoanchor.cli import main, run
from geoanchor.geometry import GeoPoint
from geoanchor.metrics import EvalRecord
from geoanchor.tiles import ground_truth_neighbors, read_manifest

from oracles import oracle_recall, oracle_topk

SMALL = """\
[world]
zones =
[grid]
extent_e = 240
extent_n = 200
[vpr]
n_c = 8
camera_noise = 0.0
"""


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def tree_digest(root):
    return {str(p.relative_to(root)): digest(p) for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.ini"
    cfg.write_text(SMALL)
    data = root / "data"
    assert main(["synth-data", "--config", str(cfg), "--out", str(data), "--queries", "4"]) == 0
    assert main(["build-vocab", str(data / "tiles"), "--config", str(cfg), "--out", str(data)]) == 0
    assert main(["encode-db", "--manifest", str(data / "manifest.csv"), "--vocab", str(data / "vocab.flvb"),
                 "--features", str(data / "tiles"), "--out", str(data)]) == 0
    return root, cfg, data


def test_build_vocab_writes_magic_and_reports(workspace, capsys, tmp_path):
    _, cfg, data = workspace
    out = run(["build-vocab", str(data / "tiles"), "--config", str(cfg), "--out", str(tmp_path), "--seed", "3"])
    assert out.exit_code == 0 and out.artifacts == [tmp_path / "vocab.flvb"]
    assert (tmp_path / "vocab.flvb").read_bytes()[:4] == b"FLVB"
    text = capsys.readouterr().out
    assert "inertia" in text and "cluster sizes" in text


def test_build_vocab_too_many_clusters(workspace, capsys, tmp_path):
    _, _, data = workspace
    code = main(["build-vocab", str(data / "tiles" / "0.flf"), "--n-c", "100000", "--out", str(tmp_path)])
    assert code != 0
    assert "build-vocab: error" in capsys.readouterr().err


def test_build_vocab_missing_input(tmp_path, capsys):
    assert main(["build-vocab", str(tmp_path / "nothing.flf"), "--out", str(tmp_path)]) == 1
    assert "not found" in capsys.readouterr().err


def test_build_vocab_deterministic(workspace, tmp_path):
    _, cfg, data = workspace
    for d in ("a", "b"):
        main(["build-vocab", str(data / "tiles"), "--config", str(cfg), "--out", str(tmp_path / d), "--seed", "5"])
    assert digest(tmp_path / "a" / "vocab.flvb") == digest(tmp_path / "b" / "vocab.flvb")


def test_encode_db(workspace, tmp_path, capsys):
    _, cfg, data = workspace
    args = ["encode-db", "--manifest", str(data / "manifest.csv"), "--vocab", str(data / "vocab.flvb"), "--config", str(cfg)]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "db.fldb").read_bytes()[:4] == b"FLDB"
    assert digest(tmp_path / "a" / "db.fldb") == digest(tmp_path / "b" / "db.fldb")
    # the synthetic provider and the materialized tile files agree
    assert digest(tmp_path / "a" / "db.fldb") == digest(data / "db.fldb")
    capsys.readouterr()
    bad = ["encode-db", "--manifest", str(tmp_path / "missing.csv"), "--vocab", str(data / "vocab.flvb"), "--out", str(tmp_path)]
    assert main(bad) == 1
    assert "encode-db: error" in capsys.readouterr().err


def write_queries(root, data, placements):
    """Query features copied from tiles; positions claimed per ``placements`` (query tile -> claimed tile)."""
    grid = read_manifest(data / "manifest.csv")
    qdir = root / "queries"
    qdir.mkdir(parents=True, exist_ok=True)
    with (root / "queries.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query_id", "easting", "northing"])
        for i, (src, claimed) in enumerate(placements):
            shutil.copy(data / "tiles" / f"{src}.flf", qdir / f"t{i}.flf")
            c = grid.by_id(claimed).center
            w.writerow([f"t{i}", c.easting, c.northing])
    return grid


def eval_args(data, root, out):
    return ["eval", "--db", str(data / "db.fldb"), "--vocab", str(data / "vocab.flvb"),
            "--manifest", str(data / "manifest.csv"), "--queries", str(root / "queries.csv"), "--out", str(out)]


def read_report(path):
    with (path / "eval_report.csv").open() as fh:
        return [float(r["value"]) for r in csv.DictReader(fh)]


def farthest(grid, tid):
    c = grid.by_id(tid).center
    d = np.hypot(grid.centers[:, 0] - c.easting, grid.centers[:, 1] - c.northing)
    return int(grid.tile_ids[np.argmax(d)])


def test_eval_perfect_and_adversarial(workspace, tmp_path, capsys):
    _, _, data = workspace
    grid = read_manifest(data / "manifest.csv")
    ids = [int(t) for t in grid.tile_ids[::3]]
    write_queries(tmp_path / "good", data, [(t, t) for t in ids])
    assert main(eval_args(data, tmp_path / "good", tmp_path / "good_out")) == 0
    assert read_report(tmp_path / "good_out") == [1.0, 1.0, 1.0]
    table = capsys.readouterr().out
    assert "R@1" in table and "Top-3@5" in table and table.count("100.00") == 3
    write_queries(tmp_path / "bad", data, [(t, farthest(grid, t)) for t in ids])
    assert main(eval_args(data, tmp_path / "bad", tmp_path / "bad_out")) == 0
    assert read_report(tmp_path / "bad_out") == [0.0, 0.0, 0.0]
    assert capsys.readouterr().out.count("0.00") >= 3


def test_eval_mixed_matches_oracle(workspace, tmp_path):
    _, _, data = workspace
    grid = read_manifest(data / "manifest.csv")
    ids = [int(t) for t in grid.tile_ids[::2]]
    placements = [(t, t if i % 3 else farthest(grid, t)) for i, t in enumerate(ids)]
    write_queries(tmp_path, data, placements)
    assert main(eval_args(data, tmp_path, tmp_path / "out")) == 0
    with (tmp_path / "queries.csv").open() as fh:
        claimed = {r["query_id"]: GeoPoint(float(r["easting"]), float(r["northing"])) for r in csv.DictReader(fh)}
    records = []
    for line in (tmp_path / "out" / "eval_queries.jsonl").read_text().splitlines():
        doc = json.loads(line)
        c = claimed[doc["query_id"]]
        # brute-force neighbours, independent of the tile module
        d = sorted((float(np.hypot(e - c.easting, n - c.northing)), int(t)) for t, (e, n) in zip(grid.tile_ids, grid.centers))
        gt = [t for _, t in d[:5]]
        records.append(EvalRecord(doc["query_id"], tuple(doc["retrieved"]), tuple(gt)))
    expected = [oracle_recall(records, 1), oracle_recall(records, 5), oracle_topk(records, 3, 5)]
    assert read_report(tmp_path / "out") == pytest.approx(expected, abs=1e-12)
    assert 0.0 < expected[0] < 1.0


def test_eval_rejects_k_above_n(workspace, tmp_path):
    root, _, data = workspace
    assert main(eval_args(data, data, tmp_path) + ["-k", "6", "-n", "5"]) == 1


def test_synth_data_deterministic(workspace, tmp_path):
    _, cfg, _ = workspace
    for d in ("a", "b"):
        main(["synth-data", "--config", str(cfg), "--out", str(tmp_path / d), "--queries", "3", "--seed", "2"])
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_simulate_writes_artifacts(tmp_path, capsys):
    out = run(["simulate", "--seed", "1", "--out", str(tmp_path)])
    assert out.exit_code == 0
    names = {p.name for p in out.artifacts}
    assert {"estimates.csv", "ate.json", "diagnostics.json", "error_over_time.csv"} <= names
    diag = json.loads((tmp_path / "diagnostics.json").read_text())
    assert diag["ate_mean"] < 20.0 and "recall_at_1" in diag
    with (tmp_path / "error_over_time.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == diag["keyframes"]
    assert "ATE mean" in capsys.readouterr().out


def test_simulate_malformed_config(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[vpr]\nbogus = 1\n")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    assert "vpr.bogus" in capsys.readouterr().err
    assert main(["simulate", "--config", str(tmp_path / "absent.ini"), "--out", str(tmp_path)]) == 1


def test_simulate_ab(tmp_path, capsys):
    cfg = tmp_path / "ab.ini"
    cfg.write_text("[vpr]\nfp_rate = 0.2\n")
    assert main(["simulate", "--ab-filtering", "--runs", "2", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    with (tmp_path / "ab_comparison.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert [r["seed"] for r in rows] == ["0", "1"]
    assert all(r["filtered_better"] == "1" for r in rows)
    assert (tmp_path / "seed1" / "unfiltered" / "estimates.csv").is_file()
    assert "filtering better on 2/2" in capsys.readouterr().out


def write_pairs(path, yaw, offset):
    c, s = np.cos(yaw), np.sin(yaw)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "x", "y", "z", "easting", "northing"])
        for i in range(8):
            x, y = 10.0 * i, 0.0
            w.writerow([i, x, y, 0.0, c * x - s * y + offset[0], s * x + c * y + offset[1]])


def test_align_command(tmp_path):
    write_pairs(tmp_path / "pairs.csv", 0.5, (100.0, 40.0))
    assert main(["align", str(tmp_path / "pairs.csv"), "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "alignment.json").read_text())
    assert doc["yaw"] == pytest.approx(0.5, abs=1e-9)
    assert doc["translation"][:2] == pytest.approx([100.0, 40.0], abs=1e-9)
    assert main(["align", str(tmp_path / "pairs.csv"), "--method", "rigid", "--out", str(tmp_path / "r")]) == 0
    assert json.loads((tmp_path / "r" / "alignment.json").read_text())["degenerate"] is True
    assert main(["align", str(tmp_path / "pairs.csv"), "--g-local", "0,0,0", "--out", str(tmp_path)]) == 1


def test_ate_command(tmp_path):
    with (tmp_path / "truth.csv").open("w") as fh:
        fh.write("timestamp,easting,northing\n0,0,0\n1,10,0\n2,20,0\n")
    with (tmp_path / "est.csv").open("w") as fh:
        fh.write("timestamp,easting,northing\n0,3,4\n1,10,0\n2,20,5\n")
    assert main(["ate", str(tmp_path / "est.csv"), str(tmp_path / "truth.csv"), "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "ate.json").read_text())
    assert doc == {"count": 3, "mean": pytest.approx(10 / 3), "sd": pytest.approx(np.std([5, 0, 5]))}
