import argparse
import json
import subprocess
import sys

import numpy as np
import pytest

from overlapscope.cli import build_parser, main
from overlapscope.detector import load_weights
from overlapscope.phantom import load_external, read_annotations_csv
from overlapscope.pnm import read_pnm

TABLE1 = {"n": 7, "d_o": 1.2, "d_i": 30, "w": 3.7, "a_o": 0.84, "na": 0.25, "d_x": 2, "array_width": 11.1,
          "n_bit": 8, "v": 10000, "pixel_size": 1.55, "width_mm": 6.287, "pixel_count": 12.3}


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_design_table1_exit0(tmp_path, capsys):
    cfg = tmp_path / "d.json"
    cfg.write_text(json.dumps(TABLE1))
    code, out, _ = run(["design", str(cfg), "--out-dir", str(tmp_path / "r")], capsys)
    assert code == 0
    report = json.loads(out)
    assert report["violations"] == [] and report["magnification"] == pytest.approx(25)
    assert json.loads((tmp_path / "r" / "run.json").read_text())["subcommand"] == "design"


def test_design_violation_exit1(tmp_path, capsys):
    cfg = tmp_path / "d.json"
    cfg.write_text(json.dumps({**TABLE1, "a_o": 4.0}))
    code, out, _ = run(["design", str(cfg)], capsys)
    assert code == 1
    assert any("object FOVs overlap" in v for v in json.loads(out)["violations"])


def test_design_malformed_exit2(tmp_path, capsys):
    cfg = tmp_path / "d.json"
    cfg.write_text("{oops")
    code, _, err = run(["design", str(cfg)], capsys)
    assert code == 2
    assert err.startswith("error: usage: malformed design JSON") and err.count("\n") == 1


def test_usage_errors_exit2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["oracle", "--n-list", "a,b"])
    assert exc.value.code == 2


def test_every_subcommand_help_mentions_units():
    parser = build_parser()
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    assert set(sub.choices) >= {"design", "phantom", "overlap", "oracle", "train", "sweep", "heatmap", "replay"}
    for name, p in sub.choices.items():
        for action in p._actions:
            if isinstance(action, argparse._HelpAction):
                continue
            assert action.help, (name, action.dest)
            numeric = action.type in (int, float) or getattr(action.type, "__name__", "") in ("_int_list", "_float_list")
            if numeric:
                assert "(" in action.help and ")" in action.help, (name, action.dest, action.help)


def test_oracle_small(capsys):
    code, out, _ = run(["oracle", "--n-list", "2", "--lambda-list", "200", "--trials", "200000"], capsys)
    doc = json.loads(out)
    assert code == 0 and doc["pass"] is True
    assert doc["cells"][0]["lambda_total"] == 200


def test_oracle_tolerance_failure_exit1(capsys):
    code, out, _ = run(["oracle", "--n-list", "4", "--lambda-list", "50", "--trials", "50", "--var-rtol", "0"], capsys)
    assert code == 1 and json.loads(out)["pass"] is False


def test_phantom_command(tmp_path, capsys):
    out = tmp_path / "ph"
    code, _, _ = run(["phantom", "--out-dir", str(out), "--frames", "2", "--seed", "3"], capsys)
    assert code == 0
    assert read_pnm(out / "frames" / "frame0001.pgm").data.shape == (512, 512)
    anns = read_annotations_csv(out / "annotations.csv")
    assert len(anns["frame0000"]) == 10


def _overlap(tmp_path, capsys, name="ov"):
    out = tmp_path / name
    argv = ["overlap", "--out-dir", str(out), "--n", "2", "--frames", "6", "--patch-size", "32",
            "--count-per-class", "8", "--val-count-per-class", "4", "--seed", "1"]
    code, stdout, _ = run(argv, capsys)
    assert code == 0
    return out


def test_overlap_command_writes_manifests(tmp_path, capsys):
    out = _overlap(tmp_path, capsys)
    train = load_external(out / "train.json")
    val = load_external(out / "val.json")
    assert len(train) == 16 and len(val) == 8
    assert {p.pixels.data.shape for p in train} == {(32, 32)}
    assert all(len(p.contributors) == 2 for p in train)
    assert (out / "train" / "1").is_dir() and (out / "train" / "0").is_dir()


def test_train_and_heatmap_commands(tmp_path, capsys):
    data = _overlap(tmp_path, capsys)
    tr_out = tmp_path / "tr"
    code, _, _ = run(["train", "--train", str(data / "train.json"), "--val", str(data / "val.json"),
                      "--out-dir", str(tr_out), "--epochs", "2", "--channels", "2,2,2,2,2"], capsys)
    assert code == 0
    lines = (tr_out / "history.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,train_acc,val_loss,val_acc" and len(lines) == 3
    model = load_weights(tr_out / "weights.bin")
    assert model.arch.input_size == 32

    hm_out = tmp_path / "hm"
    code, _, _ = run(["heatmap", "--weights", str(tr_out / "weights.bin"), str(tr_out / "weights.bin"),
                      "--out-dir", str(hm_out), "--n", "2", "--frame-size", "256", "--targets", "2",
                      "--step", "16"], capsys)
    assert code == 0
    side = json.loads((hm_out / "heatmap.json").read_text())
    assert side["window"] == 32 and side["step"] == 16
    assert read_pnm(hm_out / "heatmap.pgm").data.shape == (side["rows"], side["cols"]) == (15, 15)


def test_train_missing_manifest_exit2(tmp_path, capsys):
    code, _, err = run(["train", "--train", str(tmp_path / "x.json"), "--val", str(tmp_path / "y.json"),
                        "--out-dir", str(tmp_path / "o")], capsys)
    assert code == 2 and err.startswith("error: LoadError")


def test_replay_is_byte_identical(tmp_path, capsys):
    first = _overlap(tmp_path, capsys, "a")
    code, _, _ = run(["replay", str(first / "run.json"), "--out-dir", str(tmp_path / "b")], capsys)
    assert code == 0
    files = sorted(p.relative_to(first) for p in first.rglob("*") if p.is_file() and p.name != "run.json")
    assert files
    for rel in files:
        assert (tmp_path / "b" / rel).read_bytes() == (first / rel).read_bytes(), rel


def test_module_entry_point_runs():
    res = subprocess.run([sys.executable, "-m", "overlapscope.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "overlapscope" in res.stdout


def test_thread_cap_env(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("OVERLAPSCOPE_THREADS", "1")
    code, out, _ = run(["oracle", "--n-list", "2", "--lambda-list", "100", "--trials", "100000"], capsys)
    assert code == 0
