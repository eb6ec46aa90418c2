from __future__ import annotations

import os
from pathlib import Path

import pytest

from conftest import IDX_FILES

from asge.checkpoint import load_checkpoint, restore_network
from asge.config import config_from_dict, resolve_paths
from asge.data import load_splits
from asge.network import build_network
from asge.trainer import Splits, evaluate, train

DATA_DIR = os.environ.get("ASGE_DATA_DIR")


def _have_mnist() -> bool:
    return bool(DATA_DIR) and all((Path(DATA_DIR) / name).exists() for name in IDX_FILES.values())


@pytest.mark.slow
@pytest.mark.skipif(not _have_mnist(), reason="ASGE_DATA_DIR does not hold the MNIST IDX files")
def test_small4_reaches_mnist_accuracy(tmp_path: Path) -> None:
    config = config_from_dict(
        {
            "dataset": {"name": "mnist", "paths": dict(IDX_FILES)},
            "arch": {"preset": "small4", "strategy": "fusion"},
            "training": {"epochs": 5, "batch_size": 64, "lr_max": 0.002, "lr_min": 0.0001, "threads": 4},
            "output": {"dir": str(tmp_path), "checkpoint_keep": 0},
        }
    ).materialized()
    config = resolve_paths(config, Path(DATA_DIR))
    ds = config.dataset
    splits = Splits(*load_splits(ds.name, ds.paths, val_count=ds.val_count, seed=0))
    t = config.training
    network = build_network(config.arch_spec(), t.seed, weight_decay=t.weight_decay)
    result = train(network, splits, config)
    assert result.best_val_acc is not None

    best = restore_network(load_checkpoint(result.best_checkpoint))
    report = evaluate(best, splits.test, 256, threads=4)
    assert report.top1 >= 0.975
