import json
import subprocess
import sys

import pytest

from nrnm.cli import run_cli

TINY = """\
# tiny verification model
model.num_layers = 2
model.hidden = 4
model.memory_dim = 4
model.k = 4
model.stride_set = 1 2
model.l = 2
model.win = 2
model.heads = 2
train.dropout = 0
train.zoneout = 0
data.task = copy
data.T = 12
data.vocab = 4
data.samples = 8
"""

OVERFIT = """\
model.num_layers = 2
model.hidden = 8
model.memory_dim = 8
model.k = 4
model.stride_set = 1
model.win = 2
model.heads = 2
train.dropout = 0
train.zoneout = 0
train.lr = 0.02
train.batch_size = 8
train.steps = 150
train.eval_every = 50
data.task = copy
data.T = 10
data.vocab = 4
data.samples = 8
data.eval_samples = 8
"""


def _cfg(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def _json(out):
    return json.loads(out.strip().splitlines()[-1])


def test_gradcheck_passes(tmp_path, capsys):
    code = run_cli(["gradcheck", "--config", _cfg(tmp_path, TINY), "--threshold", "1e-5"])
    out = _json(capsys.readouterr().out)
    assert code == 0
    assert out["max_relative_error"] < 1e-5


def test_gradcheck_threshold_failure(tmp_path, capsys):
    code = run_cli(["gradcheck", "--config", _cfg(tmp_path, TINY), "--threshold", "1e-30",
                    "--sample", "20"])
    err = capsys.readouterr().err
    assert code == 3
    assert err.startswith("error: numeric:") and len(err.strip().splitlines()) == 1


def test_unknown_subcommand(capsys):
    assert run_cli(["frobnicate"]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error: usage:") and "usage: nrnm" in err


def test_missing_subcommand(capsys):
    assert run_cli([]) == 1


def test_unknown_config_key(tmp_path, capsys):
    code = run_cli(["gen-data", "--config", _cfg(tmp_path, TINY + "model.hiden = 3\n"),
                    "--out", str(tmp_path / "d")])
    assert code == 2
    assert "hiden" in capsys.readouterr().err


def test_missing_config_file(tmp_path, capsys):
    assert run_cli(["gen-data", "--config", str(tmp_path / "nope.cfg"),
                    "--out", str(tmp_path)]) == 2


def test_gen_data_is_deterministic(tmp_path, capsys):
    cfg = _cfg(tmp_path, TINY)
    assert run_cli(["gen-data", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert run_cli(["gen-data", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    assert run_cli(["gen-data", "--config", cfg, "--out", str(tmp_path / "c"), "--seed", "3"]) == 0
    a = (tmp_path / "a" / "train.jsonl").read_bytes()
    assert a == (tmp_path / "b" / "train.jsonl").read_bytes()
    assert a != (tmp_path / "c" / "train.jsonl").read_bytes()
    assert len(a.splitlines()) == 8


def test_train_eval_export(tmp_path, capsys):
    cfg = _cfg(tmp_path, OVERFIT)
    data, run = tmp_path / "data", tmp_path / "run"
    assert run_cli(["gen-data", "--config", cfg, "--out", str(data)]) == 0
    assert run_cli(["train", "--config", cfg, "--out", str(run)]) == 0
    summary = _json(capsys.readouterr().out)
    assert summary["steps"] == 150
    code = run_cli(["eval", "--checkpoint", "best", "--out", str(run),
                    "--data", str(data / "train.jsonl")])
    assert code == 0
    assert _json(capsys.readouterr().out)["accuracy"] == 1.0

    assert run_cli(["export-metrics", "--out", str(run)]) == 0
    series = _json(capsys.readouterr().out)["series"]
    names = {p.split("/")[-1] for p in series}
    assert {"train_loss.csv", "eval_accuracy.csv", "eval_loss.csv"} <= names
    rows = (run / "series" / "eval_accuracy.csv").read_text().splitlines()
    assert rows[0] == "step,accuracy" and len(rows) == 4


def test_train_is_reproducible(tmp_path, capsys):
    cfg = _cfg(tmp_path, TINY + "train.steps = 3\ntrain.batch_size = 4\ntrain.eval_every = 3\n")
    assert run_cli(["train", "--config", cfg, "--out", str(tmp_path / "r1")]) == 0
    assert run_cli(["train", "--config", cfg, "--out", str(tmp_path / "r2")]) == 0
    for name in ("metrics.csv", "final.ckpt", "summary.json"):
        assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()


def test_eval_errors(tmp_path, capsys):
    assert run_cli(["eval", "--checkpoint", "best"]) == 1
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + b"\0" * 32)
    assert run_cli(["eval", "--checkpoint", str(bad), "--config", _cfg(tmp_path, TINY)]) == 2
    assert "magic" in capsys.readouterr().err


def test_export_metrics_bad_csv(tmp_path, capsys):
    (tmp_path / "metrics.csv").write_text("a,b\n1,2\n")
    assert run_cli(["export-metrics", "--out", str(tmp_path)]) == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "nrnm", "--help"], capture_output=True,
                          text=True)
    assert proc.returncode == 0
    for cmd in ("gen-data", "train", "eval", "gradcheck", "export-metrics"):
        assert cmd in proc.stdout
