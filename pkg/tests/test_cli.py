import csv
import json
import shutil

import numpy as np
import pytest

from cmda import adapt
from cmda.cli import main
from cmda.config import load, loads
from cmda.evaluation import EvalReport, closed_gap
from cmda.scene import Frame, load_frame, read_manifest, save_frame, write_manifest

CONFIG = """
[dataset]
source_frames = 8
target_frames = 6
eval_frames = 4
image_size = 16
[model]
grid_range = -16.0, -16.0, -2.0, 16.0, 16.0, 4.0
lidar_hidden = 16
head_features = 16
disc_hidden = 8
depth_bins = 8
image_hidden = 4
image_size = 16
[pretrain]
epochs = 100
batch_size = 1
max_steps = 50
[selftrain]
rounds = 2
max_steps = 4
t_pos = 0.3
"""


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.cfg").write_text(CONFIG)
    for cmd in ("generate", "pretrain"):
        assert main([cmd, "--config", str(root / "tiny.cfg"), "--out", str(root / "run")]) == 0
    return root


def tree_bytes(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


# ------------------------------------------------------------------- generate


def test_generate_zero_frames(tmp_path, capsys):
    (tmp_path / "c.cfg").write_text("[dataset]\nsource_frames = 0\ntarget_frames = 0\neval_frames = 0\n")
    code, out, _ = run(capsys, "generate", "--config", tmp_path / "c.cfg", "--out", tmp_path / "o")
    assert code == 0 and "source: frames=0" in out
    for split in ("source", "target", "eval"):
        assert read_manifest(tmp_path / "o" / "data" / f"{split}.manifest") == []


def test_generate_is_byte_identical_and_stats_recount(tmp_path, capsys, monkeypatch):
    (tmp_path / "c.cfg").write_text(CONFIG)
    code, out, _ = run(capsys, "generate", "--config", tmp_path / "c.cfg", "--out", tmp_path / "a")
    assert code == 0
    monkeypatch.setenv("CMDA_OUT", str(tmp_path / "b"))
    assert run(capsys, "generate", "--config", tmp_path / "c.cfg", "--workers", 2)[0] == 0
    a, b = tree_bytes(tmp_path / "a" / "data"), tree_bytes(tmp_path / "b" / "data")
    assert a == b and len(a) == 3 + 8 + 6 + 4
    # recount from the files themselves
    printed = {line.split(":")[0]: dict(kv.split("=") for kv in line.split(": ")[1].split())
               for line in out.strip().splitlines()}
    for split, n in (("source", 8), ("target", 6), ("eval", 4)):
        files = sorted((tmp_path / "a" / "data" / split).glob("*.cmda"))
        frames = [load_frame(p) for p in files]
        assert int(printed[split]["frames"]) == len(frames) == n
        assert float(printed[split]["mean_points"]) == pytest.approx(np.mean([len(f.points) for f in frames]),
                                                                     abs=0.05)
        assert float(printed[split]["mean_objects"]) == pytest.approx(np.mean([len(f.labels) for f in frames]),
                                                                      abs=0.005)
    assert all(f.camera is not None for f in map(load_frame, (tmp_path / "a/data/source").glob("*.cmda")))
    assert all(f.camera is None for f in map(load_frame, (tmp_path / "a/data/target").glob("*.cmda")))


# ------------------------------------------------------------------- training


def test_pretrain_outputs(workdir):
    run_dir = workdir / "run" / "pretrain"
    assert (run_dir / "checkpoint.ckpt").exists()
    lines = (run_dir / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 1
    row = json.loads(lines[0])
    assert row["round"] == 0 and row["label"] == "Direct Transfer" and row["steps"] == 50
    meta, _ = adapt.read_checkpoint(run_dir / "checkpoint.ckpt")
    assert meta["stage"] == "pretrain" and meta["step"] == 50


def test_selftrain_without_checkpoint_fails(tmp_path, workdir, capsys):
    shutil.copytree(workdir / "run" / "data", tmp_path / "data")
    code, _, err = run(capsys, "selftrain", "--config", workdir / "tiny.cfg", "--out", tmp_path)
    assert code == 2 and str(tmp_path / "pretrain" / "checkpoint.ckpt") in err
    code, _, err = run(capsys, "selftrain", "--config", workdir / "tiny.cfg", "--out", tmp_path, "--resume")
    assert code == 2 and "nothing to resume" in err


def test_resumed_selftrain_equals_uninterrupted(tmp_path, workdir, capsys):
    cfg = workdir / "tiny.cfg"
    for name in ("whole", "split"):
        shutil.copytree(workdir / "run", tmp_path / name)
    assert run(capsys, "selftrain", "--config", cfg, "--out", tmp_path / "whole")[0] == 0
    assert run(capsys, "selftrain", "--config", cfg, "--out", tmp_path / "split", "--rounds", 1)[0] == 0
    assert len((tmp_path / "split/selftrain/metrics.jsonl").read_text().splitlines()) == 1
    assert run(capsys, "selftrain", "--config", cfg, "--out", tmp_path / "split", "--resume")[0] == 0
    whole = (tmp_path / "whole/selftrain/metrics.jsonl").read_text()
    assert (tmp_path / "split/selftrain/metrics.jsonl").read_text() == whole
    assert len(whole.splitlines()) == 2
    a = (tmp_path / "whole/selftrain/checkpoint.ckpt").read_bytes()
    assert (tmp_path / "split/selftrain/checkpoint.ckpt").read_bytes() == a


# ----------------------------------------------------------------------- eval


def test_eval_modes(tmp_path, workdir, capsys):
    shutil.copytree(workdir / "run", tmp_path / "r")
    cfg = workdir / "tiny.cfg"
    code, out, _ = run(capsys, "eval", "--config", cfg, "--out", tmp_path / "r", "--mode", "direct")
    assert code == 0 and out.startswith("Direct Transfer:")
    rep = EvalReport.from_json(tmp_path / "r/eval/direct.json")
    assert rep.label == "Direct Transfer" and (tmp_path / "r/eval/direct.csv").exists()
    assert run(capsys, "selftrain", "--config", cfg, "--out", tmp_path / "r", "--rounds", 1)[0] == 0
    code, _, err = run(capsys, "eval", "--config", cfg, "--out", tmp_path / "r", "--mode", "direct",
                       "--checkpoint", tmp_path / "r/selftrain/checkpoint.ckpt")
    assert code == 1 and "selftrain" in err
    code, _, _ = run(capsys, "eval", "--config", cfg, "--out", tmp_path / "r",
                     "--checkpoint", tmp_path / "r/selftrain/checkpoint.ckpt")
    assert code == 0 and (tmp_path / "r/eval/standard.json").exists()


def test_eval_against_own_predictions_is_perfect(tmp_path, workdir, capsys):
    cfg = load(workdir / "tiny.cfg")
    ckpt = workdir / "run" / "pretrain" / "checkpoint.ckpt"
    model, _ = adapt.load_model(ckpt)
    data = workdir / "run" / "data"
    entries = []
    n_boxes = 0
    for domain, rel in read_manifest(data / "eval.manifest"):
        f = load_frame(data / rel)
        boxes = [d.box for d in model.detect(f.points, cfg.eval)]
        n_boxes += len(boxes)
        save_frame(Frame(f.id, f.domain, f.points, boxes), tmp_path / f"{f.id}.cmda")
        entries.append((domain, f"{f.id}.cmda"))
    write_manifest(tmp_path / "self.manifest", entries)
    assert n_boxes > 0
    code, _, _ = run(capsys, "eval", "--config", workdir / "tiny.cfg", "--out", tmp_path / "o",
                     "--checkpoint", ckpt, "--manifest", tmp_path / "self.manifest", "--name", "self")
    rep = EvalReport.from_json(tmp_path / "o/eval/self.json")
    assert code == 0 and rep.ap_3d == 1.0 and rep.bev_ap == 1.0 and rep.fp_3d == 0


def test_gap_recomputes_by_hand(tmp_path, capsys):
    vals = {"direct": (0.40, 0.20), "oracle": (0.80, 0.60), "model": (0.70, 0.35)}
    for name, (bev, ap3) in vals.items():
        EvalReport(bev, ap3, 10, 10, 5, 5, 5, 5).to_json(tmp_path / f"{name}.json")
    code, out, _ = run(capsys, "gap", *(x for k in vals for x in (f"--{k}", tmp_path / f"{k}.json")))
    assert code == 0
    assert "bev_ap: direct=40.00 model=70.00 oracle=80.00 closed_gap=75.00%" in out
    assert "ap_3d: direct=20.00 model=35.00 oracle=60.00 closed_gap=37.50%" in out
    assert closed_gap(35.0, 20.0, 60.0) == pytest.approx(37.5)
    EvalReport(0.4, 0.2, 10, 10, 5, 5, 5, 5).to_json(tmp_path / "oracle.json")
    code, _, err = run(capsys, "gap", *(x for k in vals for x in (f"--{k}", tmp_path / f"{k}.json")))
    assert code == 2 and "undefined" in err


# -------------------------------------------------------------- diagnostics


def test_dump_features(tmp_path, workdir, capsys):
    cfg = workdir / "tiny.cfg"
    outs = []
    for k in range(2):
        path = tmp_path / f"f{k}.csv"
        code, _, _ = run(capsys, "dump-features", "--config", cfg, "--out", workdir / "run", "--csv", path)
        assert code == 0
        outs.append(path.read_bytes())
    assert outs[0] == outs[1]
    rows = list(csv.reader(open(tmp_path / "f0.csv")))
    width = load(cfg).model.voxel_channels * 8
    assert rows[0][:3] == ["frame_id", "domain", "f0"]
    assert len(rows) == 1 + 4 and all(len(r) == 2 + width for r in rows)
    assert {r[1] for r in rows[1:]} == {"target"}


def test_show_config_round_trips(workdir, capsys):
    code, out, _ = run(capsys, "show-config", "--config", workdir / "tiny.cfg", "--seed", 2)
    assert code == 0 and loads(out) == load(workdir / "tiny.cfg").with_seed(2)


def test_exit_codes(tmp_path, capsys):
    (tmp_path / "bad.cfg").write_text("[dataset]\nnope = 1\n")
    code, _, err = run(capsys, "show-config", "--config", tmp_path / "bad.cfg")
    assert code == 1 and "unknown key" in err
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1
    code, _, err = run(capsys, "pretrain", "--out", tmp_path / "empty")
    assert code == 2 and "manifest not found" in err
    (tmp_path / "junk.ckpt").write_bytes(b"CMDK\x01\0\0\0garbage")
    code, _, err = run(capsys, "eval", "--out", tmp_path, "--checkpoint", tmp_path / "junk.ckpt")
    assert code == 2 and "corrupt" in err
