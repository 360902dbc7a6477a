from __future__ import annotations

import csv
import subprocess
import sys

import numpy as np
import pytest

from sand.cli import EXIT_DATA, EXIT_DIVERGED, EXIT_OK, EXIT_USAGE, main
from sand.errors import TrainingDiverged
from sand.metrics import MetricsReport

SMALL = ["--set", "d=16", "--set", "heads=4", "--set", "r=4", "--set", "M=4", "--set", "N=1", "--batch-size", "16"]


def gen(out, task="windowed-binary", n=200, extra=()):
    return main(["gen", "--task", task, "--n", str(n), "--T", "12", "--R", "3", "--seed", "7", "--out", str(out), *extra])


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert gen(out) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory, data_dir):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--data", str(data_dir), "--out", str(out), "--epochs", "2", *SMALL]) == EXIT_OK
    return out


# -- gen ------------------------------------------------------------------------------


def test_gen_is_deterministic(tmp_path):
    assert gen(tmp_path / "a", n=1000) == EXIT_OK
    assert gen(tmp_path / "b", n=1000) == EXIT_OK
    for name in ("train.ndjson", "val.ndjson", "test.ndjson", "manifest.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_gen_prints_split_counts(tmp_path, capsys):
    gen(tmp_path / "a", n=1000)
    out = capsys.readouterr().out
    assert "train" in out and "700" in out and "150" in out
    assert "count.train = 700" in (tmp_path / "a" / "manifest.txt").read_text()


def test_gen_refuses_to_overwrite(tmp_path):
    assert gen(tmp_path) == EXIT_OK
    assert gen(tmp_path) == EXIT_USAGE
    assert gen(tmp_path, extra=["--force"]) == EXIT_OK


def test_gen_unknown_task(tmp_path, capsys):
    assert gen(tmp_path, task="nope") == EXIT_USAGE
    assert "usage" in capsys.readouterr().err


def test_gen_params_reach_the_generator(tmp_path):
    assert gen(tmp_path, task="per-step-binary", extra=["--param", "min_length=6"]) == EXIT_OK
    assert "param.min_length = 6" in (tmp_path / "manifest.txt").read_text()


def test_default_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("SAND_OUT_DIR", str(tmp_path / "env"))
    assert main(["gen", "--task", "windowed-binary", "--n", "50", "--T", "8", "--R", "2"]) == EXIT_OK
    assert (tmp_path / "env" / "data" / "train.ndjson").exists()


# -- train / eval ------------------------------------------------------------------------


def test_train_writes_outputs(trained, capsys):
    assert {p.name for p in trained.iterdir()} >= {"model.ckpt", "history.csv", "metrics.txt"}
    lines = (trained / "history.csv").read_text().splitlines()
    assert lines[0].startswith("# ") and any(l.startswith("epoch,") for l in lines)


def test_eval_report(trained, data_dir, tmp_path, capsys):
    out = tmp_path / "m.txt"
    assert main(["eval", "--checkpoint", str(trained / "model.ckpt"), "--data", str(data_dir), "--out", str(out)]) == 0
    rep = MetricsReport.from_text(out.read_text())
    assert rep.task_kind == "binary" and {"auroc", "auprc", "min_se_pplus"} <= set(rep.values)
    assert main(["eval", "--checkpoint", str(trained / "model.ckpt"), "--data", str(data_dir), "--out", str(tmp_path / "n.txt")]) == 0
    assert (tmp_path / "n.txt").read_text() == out.read_text()


def test_eval_kind_mismatch(trained, tmp_path, capsys):
    gen(tmp_path, task="per-step-binary")
    assert main(["eval", "--checkpoint", str(trained / "model.ckpt"), "--data", str(tmp_path)]) == EXIT_DATA
    assert "per-step-binary" in capsys.readouterr().err


def test_eval_missing_checkpoint(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--data", str(tmp_path)]) == EXIT_DATA


def test_lr_zero_gives_constant_history(data_dir, tmp_path):
    args = ["train", "--data", str(data_dir), "--out", str(tmp_path), "--epochs", "3", "--lr", "0",
            "--set", "dropout_residue=0", "--set", "dropout_attention=0", "--set", "dropout_input=0", *SMALL]
    assert main(args) == EXIT_OK
    rows = list(csv.DictReader(l for l in (tmp_path / "history.csv").read_text().splitlines() if not l.startswith("#")))
    assert len({r["val_loss"] for r in rows}) == 1
    train_losses = [float(r["train_loss"]) for r in rows]
    assert max(train_losses) - min(train_losses) < 1e-12


def test_unknown_config_key(data_dir, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("version = 1\nbogus = 3\n")
    assert main(["train", "--data", str(data_dir), "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_USAGE
    assert main(["train", "--data", str(data_dir), "--set", "bogus=1", "--out", str(tmp_path / "o")]) == EXIT_USAGE


def test_config_file_is_applied(data_dir, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("version = 1\nd = 16\nheads = 2\nr = 4\nM = 3\nN = 1\nepochs = 1\nbatch_size = 32\nseed = 5\n")
    assert main(["train", "--data", str(data_dir), "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
    from sand.model import SandModel

    m = SandModel.load(tmp_path / "o" / "model.ckpt")
    assert (m.cfg.d, m.cfg.heads, m.cfg.M, m.cfg.seed, m.cfg.R) == (16, 2, 3, 5, 6)


def test_bad_ndjson_is_a_data_error(tmp_path, capsys):
    (tmp_path / "train.ndjson").write_text('{"series": [[1, 2]], "label": 1}\n{"series": oops}\n')
    (tmp_path / "val.ndjson").write_text('{"series": [[1, 2]], "label": 1}\n')
    assert main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == EXIT_DATA
    assert "line 2" in capsys.readouterr().err


def test_multitask_records_weights(tmp_path):
    gen(tmp_path / "ihm")
    gen(tmp_path / "dc", task="per-step-binary")
    gen(tmp_path / "ph", task="windowed-binary", extra=["--param", "window=4"])
    gen(tmp_path / "los", task="length-buckets")
    args = ["train", "--multi-task", "--out", str(tmp_path / "o"), "--epochs", "1", *SMALL]
    for name in ("ph", "ihm", "dc", "los"):
        args += ["--task", f"{name}={tmp_path / name}"]
    assert main(args) == EXIT_OK
    text = (tmp_path / "o" / "history.csv").read_text()
    for name, value in (("ph", "0.8"), ("ihm", "0.5"), ("dc", "1.1"), ("los", "0.8")):
        assert f"# lambda.{name} = {value}\n" in text


def test_multitask_needs_weights_for_custom_names(tmp_path):
    gen(tmp_path / "a")
    base = ["train", "--multi-task", "--task", f"a={tmp_path / 'a'}", "--epochs", "1", *SMALL]
    assert main(base + ["--out", str(tmp_path / "o1")]) == EXIT_USAGE
    assert main(base + ["--lambda", "a=2.0", "--out", str(tmp_path / "o2")]) == EXIT_OK
    assert "# lambda.a = 2.0" in (tmp_path / "o2" / "history.csv").read_text()


def test_divergence_exit_code(data_dir, tmp_path, monkeypatch):
    import sand.cli as cli

    def boom(*a, **k):
        raise TrainingDiverged("non-finite loss at epoch 1")

    monkeypatch.setattr(cli, "train", boom)
    assert main(["train", "--data", str(data_dir), "--out", str(tmp_path), *SMALL]) == EXIT_DIVERGED


# -- bench / sweep -------------------------------------------------------------------------


def test_bench_csv_has_one_row_per_configuration(tmp_path):
    out = tmp_path / "b.csv"
    assert main(["bench", "--T", "16,32", "--r", "2,4", "--d", "16", "--N", "1", "--repeats", "1", "--out", str(out)]) == 0
    rows = list(csv.reader(out.read_text().splitlines()))
    assert rows[0] == ["T", "r", "d", "N", "median_ms"] and len(rows) == 5
    assert all(float(r[4]) > 0 for r in rows[1:])


def test_sweep_grid_and_budget(data_dir, tmp_path, capsys):
    out = tmp_path / "s.csv"
    args = ["sweep", "--data", str(data_dir), "--N", "1,2", "--M", "2,4", "--r", "4", "--epochs", "1",
            "--set", "d=16", "--set", "heads=4", "--out", str(out)]
    assert main(args) == EXIT_OK
    rows = list(csv.reader(out.read_text().splitlines()))
    assert rows[0] == ["N", "M", "r", "metric", "value"] and len(rows) == 5
    assert main(args + ["--max-runs", "2", "--workers", "2"]) == EXIT_OK
    assert "warning" in capsys.readouterr().err
    again = list(csv.reader(out.read_text().splitlines()))
    assert again[1:] == rows[1:3]


def test_console_script_exit_codes(tmp_path):
    res = subprocess.run([sys.executable, "-m", "sand", "gen", "--task", "nope"], capture_output=True, text=True)
    assert res.returncode == EXIT_USAGE
    res = subprocess.run([sys.executable, "-m", "sand", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "sand" in res.stdout
