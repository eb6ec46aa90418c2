from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import pytest

from conftest import mnist_config, run_asge, write_config, write_mnist

from asge.checkpoint import save_checkpoint
from asge.config import load_config
from asge.network import build_network


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory: pytest.TempPathFactory) -> tuple[Path, Path]:
    """(config path, run directory) of one finished tiny training run."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    write_mnist(data)
    run_dir = root / "run"
    config = write_config(data / "run.yaml", mnist_config(run_dir))
    proc = run_asge(["--quiet", "train", "--config", str(config)])
    assert proc.returncode == 0, proc.stderr
    return config, run_dir


def test_version() -> None:
    proc = run_asge(["--version"])
    assert proc.returncode == 0
    assert proc.stdout.startswith("asge ")


def test_missing_subcommand_is_usage_error() -> None:
    assert run_asge([]).returncode == 2


def test_train_without_config_is_usage_error() -> None:
    proc = run_asge(["train"])
    assert proc.returncode == 2
    assert proc.stderr.startswith("asge: usage-error:")


def test_train_writes_artifacts(trained_run: tuple[Path, Path]) -> None:
    _, run_dir = trained_run
    for name in ("metrics.jsonl", "best.ckpt", "resolved.json", "test-report.json"):
        assert (run_dir / name).exists(), name
    records = [json.loads(line) for line in (run_dir / "metrics.jsonl").read_text().splitlines()]
    assert len(records) == 1
    report = json.loads((run_dir / "test-report.json").read_text())
    assert report["split"] == "test" and report["count"] == 40


def test_missing_path_names_the_field(tmp_path: Path, mnist_dir: Path) -> None:
    raw = mnist_config(tmp_path / "run")
    del raw["dataset"]["paths"]["train_labels"]
    config = write_config(mnist_dir / "run.yaml", raw)
    proc = run_asge(["train", "--config", str(config)])
    assert proc.returncode == 2
    assert proc.stderr.startswith("asge: config-error:")
    assert "dataset.paths.train_labels" in proc.stderr
    assert not (tmp_path / "run" / "metrics.jsonl").exists()


def test_unknown_config_key_exits_2(tmp_path: Path, mnist_dir: Path) -> None:
    raw = mnist_config(tmp_path / "run", training={"learning_rate": 0.1})
    config = write_config(mnist_dir / "run.yaml", raw)
    proc = run_asge(["train", "--config", str(config)])
    assert proc.returncode == 2
    assert "training.learning_rate" in proc.stderr


def test_override_is_recorded_in_resolved_config(tmp_path: Path, mnist_config_path: Path) -> None:
    out = tmp_path / "seeded"
    proc = run_asge(
        ["--quiet", "train", "--config", str(mnist_config_path), "--override", "training.seed=7", "--out-dir", str(out)]
    )
    assert proc.returncode == 0, proc.stderr
    resolved = json.loads((out / "resolved.json").read_text())
    assert resolved["training"]["seed"] == 7
    assert resolved["dataset"]["val_count"] == 40


def test_train_json_summary(tmp_path: Path, mnist_config_path: Path) -> None:
    proc = run_asge(["--quiet", "train", "--config", str(mnist_config_path), "--out-dir", str(tmp_path / "j"), "--json"])
    assert proc.returncode == 0, proc.stderr
    body = json.loads(proc.stdout)
    assert body["best_epoch"] == 1
    assert body["test"]["strategy"] == "fusion"


def test_eval_uses_resolved_config(trained_run: tuple[Path, Path]) -> None:
    _, run_dir = trained_run
    proc = run_asge(["eval", str(run_dir / "best.ckpt"), "--json"])
    assert proc.returncode == 0, proc.stderr
    report = json.loads(proc.stdout)
    assert report["strategy"] == "fusion"
    assert len(report["per_layer_acc"]) == 2
    assert (run_dir / "eval-test-fusion.json").exists()


def test_eval_best_on_any_checkpoint(trained_run: tuple[Path, Path]) -> None:
    _, run_dir = trained_run
    proc = run_asge(["eval", str(run_dir / "best.ckpt"), "--strategy", "best", "--split", "val", "--json"])
    assert proc.returncode == 0, proc.stderr
    report = json.loads(proc.stdout)
    assert report["split"] == "val"
    assert report["best_layer"] == 2
    assert report["classifier_params"] == 0


def test_eval_corrupted_checkpoint_exits_3(tmp_path: Path, trained_run: tuple[Path, Path]) -> None:
    _, run_dir = trained_run
    bad = tmp_path / "bad.ckpt"
    raw = bytearray((run_dir / "best.ckpt").read_bytes())
    raw[0:4] = b"XXXX"
    bad.write_bytes(bytes(raw))
    proc = run_asge(["eval", str(bad), "--config", str(run_dir / "resolved.json")])
    assert proc.returncode == 3
    assert proc.stderr.startswith("asge: format-error:")
    assert "magic" in proc.stderr


def test_eval_missing_checkpoint_is_io_error(tmp_path: Path) -> None:
    proc = run_asge(["eval", str(tmp_path / "nope.ckpt")])
    assert proc.returncode == 1
    assert proc.stderr.startswith("asge: io-error:")


def test_eval_arch_mismatch_exits_2(trained_run: tuple[Path, Path]) -> None:
    config, run_dir = trained_run
    proc = run_asge(["eval", str(run_dir / "best.ckpt"), "--config", str(config), "--override", "arch.alpha=2.0"])
    assert proc.returncode == 2
    assert "arch hash" in proc.stderr


def test_eval_best_without_recorded_layer_exits_2(tmp_path: Path, mnist_dir: Path) -> None:
    config_path = write_config(mnist_dir / "run.yaml", mnist_config(tmp_path / "run"))
    config = load_config(config_path)
    ckpt = tmp_path / "fresh.ckpt"
    save_checkpoint(ckpt, build_network(config.arch_spec(), 0), {})
    proc = run_asge(["eval", str(ckpt), "--strategy", "best", "--config", str(config_path)])
    assert proc.returncode == 2
    assert proc.stderr.startswith("asge: usage-error:")


def test_gradcheck_passes() -> None:
    proc = run_asge(["gradcheck"])
    assert proc.returncode == 0, proc.stderr
    assert "layer 1: ok" in proc.stdout
    assert "layer 2: ok" in proc.stdout


def test_gradcheck_json_and_zero_input() -> None:
    proc = run_asge(["gradcheck", "--zero-input", "--json"])
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["passed"] is True


def test_gradcheck_rejects_wide_layers() -> None:
    proc = run_asge(["gradcheck", "--channels", "4,16"])
    assert proc.returncode == 2
    assert proc.stderr.startswith("asge: usage-error:")


def test_goodness_dump_csv(trained_run: tuple[Path, Path]) -> None:
    _, run_dir = trained_run
    proc = run_asge(["goodness-dump", str(run_dir / "best.ckpt"), "--layer", "2", "--batch-size", "4"])
    assert proc.returncode == 0, proc.stderr
    rows = list(csv.reader(io.StringIO(proc.stdout)))
    assert rows[0] == ["layer", "variant", "channel", "patch_i", "patch_j", "value"]
    assert {r[1] for r in rows[1:]} == {"origin", "rms", "avg", "max"}


def test_goodness_dump_to_file_and_bad_layer(tmp_path: Path, trained_run: tuple[Path, Path]) -> None:
    _, run_dir = trained_run
    out = tmp_path / "g.csv"
    proc = run_asge(["goodness-dump", str(run_dir / "best.ckpt"), "--layer", "2", "--out", str(out)])
    assert proc.returncode == 0, proc.stderr
    assert out.read_text().startswith("layer,variant,channel,patch_i,patch_j,value")
    assert "Goodness distributions at layer 2" in proc.stdout

    proc = run_asge(["goodness-dump", str(run_dir / "best.ckpt"), "--layer", "1"])
    assert proc.returncode == 2


def test_sweep_writes_one_row_per_value(tmp_path: Path, mnist_config_path: Path) -> None:
    out = tmp_path / "sweep"
    proc = run_asge(
        ["--quiet", "sweep", "pooling", "rms", "max", "--config", str(mnist_config_path), "--out-dir", str(out)]
    )
    assert proc.returncode == 0, proc.stderr
    rows = list(csv.DictReader(io.StringIO(proc.stdout)))
    assert [r["value"] for r in rows] == ["rms", "max"]
    assert all(r["runs"] == "1" for r in rows)
    assert (out / "sweep-pooling.csv").read_text() == proc.stdout
    assert (out / "pooling-max" / "seed-0" / "best.ckpt").exists()


def test_sweep_unknown_parameter(mnist_config_path: Path) -> None:
    proc = run_asge(["sweep", "momentum", "0.9", "--config", str(mnist_config_path)])
    assert proc.returncode == 2
    assert "momentum" in proc.stderr
