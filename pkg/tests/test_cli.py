import json
import re
import subprocess
import sys

import numpy as np
import pytest

from hybridpt.cli import build_parser, run
from hybridpt.pointcloud import read_binary


def test_params_s(capsys):
    assert run(["params", "--model", "s"]) == 0
    out = capsys.readouterr().out
    assert "12,713,888" in out
    assert re.search(r"^E3\s+attn_block", out, re.M)


def test_params_json(capsys):
    assert run(["params", "--model", "l", "--format", "json"]) == 0
    d = json.loads(capsys.readouterr().out)
    assert d["total_params"] == sum(r["params"] for r in d["rows"])


def test_params_csv_file(tmp_path):
    p = tmp_path / "p.csv"
    assert run(["params", "--model", "micro", "--format", "csv", "--out", str(p)]) == 0
    assert p.read_text().startswith("schema_version,stage,module")


def test_usage_errors(capsys):
    assert run(["params", "--bogus"]) == 1
    assert run(["params", "--model", "xxl"]) == 1
    assert run([]) == 1
    assert run(["train-toy", "--rope-split", "1:2"]) == 1
    assert "error" in capsys.readouterr().err


def test_help_exits_zero(capsys):
    assert run(["--help"]) == 0
    assert run(["bench", "--help"]) == 0


def test_help_lists_every_flag(capsys):
    parser = build_parser()
    sub = next(a for a in parser._actions if a.__class__.__name__ == "_SubParsersAction")
    for name, p in sub.choices.items():
        text = p.format_help()
        for action in p._actions:
            for flag in action.option_strings:
                assert flag in text, (name, flag)


def test_forward_missing_file(tmp_path, capsys):
    missing = tmp_path / "scene.lptc"
    assert run(["forward", "--model", "s", "--input", str(missing), "--out", str(tmp_path / "o.lptc")]) == 2
    assert str(missing) in capsys.readouterr().err


def test_make_scene_then_forward(tmp_path, capsys):
    sc, out = tmp_path / "s.lptc", tmp_path / "logits.lptc"
    assert run(["make-scene", "--points", "300", "--extent", "0.5", "--out", str(sc)]) == 0
    assert run(["forward", "--model", "micro", "--input", str(sc), "--out", str(out), "--seed", "2"]) == 0
    logits = read_binary(out)
    assert logits.n_channels == 4
    first = out.read_bytes()
    assert run(["forward", "--model", "micro", "--input", str(sc), "--out", str(out), "--seed", "2"]) == 0
    assert out.read_bytes() == first


def test_forward_bad_file(tmp_path):
    bad = tmp_path / "bad.lptc"
    bad.write_bytes(b"LPTC" + b"\x01" * 10)
    assert run(["forward", "--model", "micro", "--input", str(bad), "--out", str(tmp_path / "o.lptc")]) == 2


def test_gradcheck(capsys):
    assert run(["gradcheck", "--model", "micro", "--seed", "1"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out
    err = float(re.search(r"max relative error (\S+)", out).group(1))
    assert err < 1e-3


def test_train_toy_csv(tmp_path, capsys):
    p = tmp_path / "loss.csv"
    assert run(["train-toy", "--model", "micro", "--steps", "3", "--points", "200", "--out", str(p)]) == 0
    lines = p.read_text().splitlines()
    assert lines[0] == "step,loss" and len(lines) == 4
    assert "accuracy" in capsys.readouterr().out


def test_train_toy_stdout_and_no_rope(capsys):
    assert run(["train-toy", "--steps", "2", "--points", "150", "--no-rope", "--seed", "4"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("step,loss\n0,")


def test_bench_small(capsys):
    assert run(["bench", "--model", "micro", "--points", "1500", "--reps", "3", "--warmup", "0",
                "--format", "json"]) == 0
    d = json.loads(capsys.readouterr().out)
    assert d["meta"]["reps"] == 3 and d["meta"]["threads"] == 1
    assert abs(sum(r["time_fraction"] for r in d["rows"]) - 1) < 1e-6


def test_bench_too_small_is_runtime_error(capsys):
    assert run(["bench", "--model", "micro", "--points", "1", "--reps", "3"]) == 2


def test_threads_env_override(monkeypatch, capsys):
    monkeypatch.setenv("LITEPT_THREADS", "2")
    assert run(["bench", "--model", "micro", "--points", "1500", "--reps", "3", "--warmup", "0",
                "--format", "json", "--threads", "1"]) == 0
    assert json.loads(capsys.readouterr().out)["meta"]["threads"] == 2


def test_entry_point_subprocess():
    r = subprocess.run([sys.executable, "-m", "hybridpt.cli", "params", "--model", "s-star"],
                       capture_output=True, text=True)
    assert r.returncode == 0
    assert "15,989,096" in r.stdout
    r = subprocess.run([sys.executable, "-m", "hybridpt.cli", "nope"], capture_output=True, text=True)
    assert r.returncode == 1 and r.stderr
