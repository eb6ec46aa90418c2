from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from conftest import synthetic_dataset, tiny_spec

from asge.config import DatasetConfig, OutputConfig, RunConfig, TrainingConfig
from asge.data import Dataset
from asge.errors import ConfigurationError, NonFiniteLossError, UsageError
from asge.network import build_network, select_best_layer
from asge.trainer import BEST_CHECKPOINT, METRICS_FILE, Splits, Trainer, evaluate, train

RECORD_KEYS = {
    "epoch",
    "lr",
    "per_layer_train_loss",
    "per_layer_train_acc",
    "per_layer_val_acc",
    "strategy_val_acc",
    "classifier_train_loss",
    "best_layer",
    "wall_seconds",
}


def _splits(n_train: int = 64) -> Splits:
    return Splits(
        synthetic_dataset(n_train, shape=(1, 8, 8)),
        replace(synthetic_dataset(20, shape=(1, 8, 8), seed=1), split="val"),
        replace(synthetic_dataset(20, shape=(1, 8, 8), seed=2), split="test"),
    )


def _training(**changes) -> TrainingConfig:
    base = TrainingConfig(batch_size=16, epochs=2, seed=0, lr_max=0.01, lr_min=0.001, deterministic=True)
    return replace(base, **changes)


def _config(out_dir: Path, **training) -> RunConfig:
    return RunConfig(
        dataset=DatasetConfig(name="mnist", val_count=20),
        training=_training(**training),
        output=OutputConfig(dir=str(out_dir), checkpoint_keep=1),
    )


def _metrics(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()]


def test_run_writes_metrics_and_checkpoints(tmp_path: Path) -> None:
    result = train(build_network(tiny_spec(), 0), _splits(), _config(tmp_path))
    records = _metrics(tmp_path / METRICS_FILE)
    assert len(records) == 2
    assert set(records[0]) == RECORD_KEYS
    assert records[0]["epoch"] == 1
    assert records[0]["lr"] == pytest.approx(0.01)
    assert records[1]["lr"] == pytest.approx(0.0055)
    assert len(records[0]["per_layer_train_loss"]) == 3
    assert records[0]["wall_seconds"] is None
    assert (tmp_path / BEST_CHECKPOINT).exists()
    assert sorted(p.name for p in tmp_path.glob("epoch-*.ckpt")) == ["epoch-0002.ckpt"]
    assert result.metrics_path == tmp_path / METRICS_FILE
    assert result.best_epoch in (1, 2)


def test_deterministic_runs_produce_identical_metrics(tmp_path: Path) -> None:
    train(build_network(tiny_spec(), 0), _splits(), _config(tmp_path / "a"))
    train(build_network(tiny_spec(), 0), _splits(), _config(tmp_path / "b"))
    assert (tmp_path / "a" / METRICS_FILE).read_text() == (tmp_path / "b" / METRICS_FILE).read_text()


def test_pipelined_training_equals_sequential(tmp_path: Path) -> None:
    seq = Trainer(build_network(tiny_spec(), 0), _splits(), _training())
    par = Trainer(build_network(tiny_spec(), 0), _splits(), _training(pipeline=True, queue_depth=1))
    seq_records = seq.run().records
    par_records = par.run().records
    assert seq_records == par_records
    for a, b in zip(seq.network.layers, par.network.layers):
        assert np.array_equal(a.params.weights, b.params.weights)
    assert np.array_equal(seq.network.classifier.weights, par.network.classifier.weights)


def test_non_deterministic_run_records_wall_time() -> None:
    trainer = Trainer(build_network(tiny_spec(), 0), _splits(), _training(epochs=1, deterministic=False))
    record = trainer.run().records[0]
    assert record["wall_seconds"] is not None and record["wall_seconds"] >= 0


def test_best_strategy_records_best_layer() -> None:
    trainer = Trainer(build_network(tiny_spec("best"), 0), _splits(), _training(epochs=1))
    record = trainer.run().records[0]
    assert record["classifier_train_loss"] is None
    assert 2 <= record["best_layer"] <= 4
    assert trainer.network.best_layer == record["best_layer"]


def test_non_finite_loss_aborts() -> None:
    splits = _splits()
    bad = splits.train.images.copy()
    bad[:] = np.nan
    splits.train = Dataset(bad, splits.train.labels, 10)
    trainer = Trainer(build_network(tiny_spec(), 0), splits, _training())
    with pytest.raises(NonFiniteLossError):
        trainer.run_steps()


def test_finish_epoch_requires_a_complete_epoch() -> None:
    trainer = Trainer(build_network(tiny_spec(), 0), _splits(), _training())
    assert trainer.run_steps(2) == 2
    with pytest.raises(UsageError):
        trainer.finish_epoch()


def test_evaluate_reports_layers_and_strategy() -> None:
    net = build_network(tiny_spec("last"), 0)
    report = evaluate(net, _splits().test, 8)
    assert report.count == 20
    assert report.strategy == "last"
    assert len(report.per_layer_acc) == 3
    assert report.top5 is None
    assert report.classifier_params == 8 * 10 + 10
    assert report.split == "test"


def test_evaluate_best_on_any_network() -> None:
    net = build_network(tiny_spec("fusion"), 0)
    report = evaluate(net, _splits().test, 8, strategy="best", best_layer=2)
    assert report.best_layer == 2
    assert report.top1 == report.per_layer_acc[1]
    assert report.classifier_params == 0


def test_evaluate_reports_the_recorded_best_layer() -> None:
    net = build_network(tiny_spec("fusion"), 0)
    test = _splits().test
    fresh = evaluate(net, test, 8, select=True)
    assert fresh.best_layer == select_best_layer(fresh.per_layer_acc)
    net.best_layer = 3 if fresh.best_layer == 2 else 2

    best = evaluate(net, test, 8, strategy="best")
    assert best.best_layer == net.best_layer
    assert best.top1 == fresh.per_layer_acc[net.best_layer - 1]
    assert evaluate(net, test, 8).best_layer == net.best_layer


def test_epoch_selects_best_layer_from_validation(tmp_path: Path) -> None:
    train(build_network(tiny_spec("best"), 0), _splits(), _config(tmp_path))
    for record in _metrics(tmp_path / METRICS_FILE):
        assert record["best_layer"] == select_best_layer(record["per_layer_val_acc"])
        assert record["strategy_val_acc"] == record["per_layer_val_acc"][record["best_layer"] - 1]


def test_evaluate_rejects_mismatched_strategy_and_empty_split() -> None:
    net = build_network(tiny_spec("fusion"), 0)
    splits = _splits()
    with pytest.raises(UsageError):
        evaluate(net, splits.test, 8, strategy="last")
    empty = splits.test.subset(np.array([], dtype=np.int64))
    with pytest.raises(UsageError):
        evaluate(net, empty, 8)


def test_evaluate_is_independent_of_threads() -> None:
    net = build_network(tiny_spec(), 0)
    test = _splits().test
    assert evaluate(net, test, 4, threads=1) == evaluate(net, test, 4, threads=3)


def test_threaded_evaluate_counts_every_execution() -> None:
    net = build_network(tiny_spec("fusion"), 0)
    evaluate(net, _splits().test, 1, threads=4)
    assert net.executions == [20, 20, 20]


def test_evaluate_reports_top5_for_many_classes() -> None:
    spec = tiny_spec("fusion", n_classes=100)
    net = build_network(spec, 0)
    data = synthetic_dataset(10, n_classes=100, shape=(1, 8, 8))
    report = evaluate(net, data, 5)
    assert report.top5 is not None
    assert report.top5 >= report.top1


def test_resume_rejects_a_different_seed(tmp_path: Path) -> None:
    trainer = Trainer(build_network(tiny_spec(), 0), _splits(), _training())
    trainer.save(tmp_path / "ckpt")
    with pytest.raises(ConfigurationError) as exc:
        Trainer.resume(tmp_path / "ckpt", _splits(), _training(seed=1))
    assert exc.value.field == "training.seed"
