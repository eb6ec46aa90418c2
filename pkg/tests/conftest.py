from __future__ import annotations

import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import yaml

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT))

from asge.data import Dataset, save_cifar, save_idx  # noqa: E402
from asge.network import ArchSpec, LayerSpec  # noqa: E402
from asge.layers import PoolSpec  # noqa: E402

IDX_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}

# Two small conv layers on 28x28: 4 channels (2x2 patches), then 8 channels pooled with arch.pooling.
TINY_ARCH = {
    "preset": "custom",
    "layers": [{"out_channels": 4}, {"out_channels": 8, "pool": True}],
}


def run_asge(args: list[str], *, cwd: Path | None = None, env: dict[str, str] | None = None) -> subprocess.CompletedProcess[str]:
    """Run ``python -m asge`` and return the CompletedProcess (never raises on exit code)."""
    full_env = {k: v for k, v in os.environ.items() if k != "ASGE_DATA_DIR"}
    full_env.update({"PYTHONPATH": str(ROOT), **(env or {})})
    return subprocess.run(
        [sys.executable, "-m", "asge", *args],
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE,
        text=True,
        cwd=cwd or ROOT,
        env=full_env,
        check=False,
    )


def synthetic_images(labels: np.ndarray, shape: tuple[int, int, int], seed: int) -> np.ndarray:
    """Noise plus a bright horizontal band whose row depends on the label."""
    gen = np.random.default_rng(seed)
    c, h, w = shape
    images = gen.uniform(0.0, 0.3, size=(len(labels), c, h, w))
    band = max(1, h // 10)
    for i, y in enumerate(labels):
        top = int(y) * h // 10
        images[i, :, top : top + band, :] = 1.0
    return np.rint(images * 255.0) / 255.0


def synthetic_dataset(n: int, *, n_classes: int = 10, shape: tuple[int, int, int] = (1, 28, 28), seed: int = 0) -> Dataset:
    labels = np.arange(n, dtype=np.int64) % n_classes
    return Dataset(synthetic_images(labels, shape, seed).astype(np.float32), labels, n_classes)


def write_mnist(root: Path, *, n_train: int = 120, n_test: int = 40, seed: int = 0) -> dict[str, Path]:
    root.mkdir(parents=True, exist_ok=True)
    paths = {key: root / name for key, name in IDX_FILES.items()}
    save_idx(synthetic_dataset(n_train, seed=seed), paths["train_images"], paths["train_labels"])
    save_idx(synthetic_dataset(n_test, seed=seed + 1), paths["test_images"], paths["test_labels"])
    return paths


def write_cifar(root: Path, *, n_train: int = 60, n_test: int = 20, n_classes: int = 10) -> dict[str, list[Path]]:
    root.mkdir(parents=True, exist_ok=True)
    train = [root / "data_batch_1.bin", root / "data_batch_2.bin"]
    half = n_train // 2
    save_cifar(synthetic_dataset(half, n_classes=n_classes, shape=(3, 32, 32), seed=0), train[0])
    save_cifar(synthetic_dataset(n_train - half, n_classes=n_classes, shape=(3, 32, 32), seed=1), train[1])
    test = [root / "test_batch.bin"]
    save_cifar(synthetic_dataset(n_test, n_classes=n_classes, shape=(3, 32, 32), seed=2), test[0])
    return {"train_batches": train, "test_batches": test}


def mnist_config(out_dir: Path, **sections: dict) -> dict:
    """Config for the synthetic MNIST files; paths are relative, so the config
    must sit in the data directory (or be given --data-dir)."""
    config = {
        "dataset": {
            "name": "mnist",
            "paths": {key: name for key, name in IDX_FILES.items()},
            "val_count": 40,
        },
        "arch": dict(TINY_ARCH),
        "training": {"epochs": 1, "batch_size": 32, "lr_max": 0.002, "lr_min": 0.0001, "deterministic": True},
        "output": {"dir": str(out_dir), "checkpoint_keep": 1},
    }
    for name, values in sections.items():
        config[name] = {**config.get(name, {}), **values}
    return config


def write_config(path: Path, config: dict) -> Path:
    path.write_text(yaml.safe_dump(config, sort_keys=False), encoding="utf-8")
    return path


def tiny_spec(strategy: str = "fusion", *, n_classes: int = 10, input_shape: tuple[int, int, int] = (1, 8, 8)) -> ArchSpec:
    """Three small layers on 8x8 maps, pooling after the second."""
    layers = (LayerSpec(4), LayerSpec(8, pool=PoolSpec()), LayerSpec(8))
    return ArchSpec(layers, n_classes, input_shape, alpha=1.0, strategy="fusion").with_strategy(strategy)


@pytest.fixture
def mnist_dir(tmp_path: Path) -> Path:
    data = tmp_path / "data"
    write_mnist(data)
    return data


@pytest.fixture
def mnist_config_path(tmp_path: Path, mnist_dir: Path) -> Path:
    return write_config(mnist_dir / "run.yaml", mnist_config(tmp_path / "run"))
