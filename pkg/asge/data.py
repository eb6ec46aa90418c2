"""Dataset ingestion (IDX, CIFAR binary), splitting, normalization, augmentation.

Datasets are read from local disk only; ``scripts/fetch_datasets.py`` is the
separate tool that downloads them.
"""

from __future__ import annotations

import gzip
import json
import logging
import queue
import struct
import threading
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from . import rng
from .errors import ConfigurationError, FormatError, InputError
from .tensor import Tensor

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_PIXELS = 3 * 32 * 32


@dataclass(frozen=True)
class DatasetInfo:
    format: str  # "idx" | "cifar"
    n_classes: int
    input_shape: tuple[int, int, int]
    val_count: int
    pad_crop: int
    flip: float


DATASETS: dict[str, DatasetInfo] = {
    "mnist": DatasetInfo("idx", 10, (1, 28, 28), 10_000, 0, 0.0),
    "fashion_mnist": DatasetInfo("idx", 10, (1, 28, 28), 10_000, 0, 0.0),
    "cifar10": DatasetInfo("cifar", 10, (3, 32, 32), 5_000, 4, 0.5),
    "cifar100": DatasetInfo("cifar", 100, (3, 32, 32), 5_000, 4, 0.5),
}

IDX_PATH_FIELDS = ("train_images", "train_labels", "test_images", "test_labels")
CIFAR_PATH_FIELDS = ("train_batches", "test_batches")


@dataclass(frozen=True, eq=False)
class Dataset:
    images: Tensor  # [N, C, H, W]
    labels: np.ndarray  # int64 [N]
    n_classes: int
    split: str = "train"

    def __post_init__(self) -> None:
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ConfigurationError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise InputError(f"labels outside [0, {self.n_classes})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, indices: np.ndarray, split: str | None = None) -> Dataset:
        return replace(self, images=self.images[indices], labels=self.labels[indices], split=split or self.split)


def _read(path: Path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def _write(path: Path, payload: bytes) -> None:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "wb") as fh:
            fh.write(payload)
    else:
        path.write_bytes(payload)


def _idx_header(raw: bytes, path: Path, magic: int, ndim: int) -> tuple[int, ...]:
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise FormatError(f"expected at least {header_len} header bytes, got {len(raw)}", field="header", path=path)
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"expected 0x{magic:08x}, got 0x{found:08x}", field="magic", path=path)
    return struct.unpack(f">{ndim}I", raw[4:header_len])


def load_idx(images_path: Path, labels_path: Path, *, n_classes: int = 10, split: str = "train") -> Dataset:
    """MNIST-style IDX pair; pixel bytes are scaled to [0, 1]."""
    raw_images = _read(images_path)
    count, rows, cols = _idx_header(raw_images, images_path, IDX_IMAGES_MAGIC, 3)
    expected = count * rows * cols
    pixels = raw_images[16:]
    if len(pixels) != expected:
        raise FormatError(f"expected {expected} pixel bytes, got {len(pixels)}", field="pixels", path=images_path)

    raw_labels = _read(labels_path)
    (label_count,) = _idx_header(raw_labels, labels_path, IDX_LABELS_MAGIC, 1)
    if label_count != count:
        raise FormatError(f"label count {label_count} != image count {count}", field="count", path=labels_path)
    label_bytes = raw_labels[8:]
    if len(label_bytes) != label_count:
        raise FormatError(f"expected {label_count} label bytes, got {len(label_bytes)}", field="labels", path=labels_path)

    labels = np.frombuffer(label_bytes, dtype=np.uint8).astype(np.int64)
    if labels.size and labels.max() >= n_classes:
        raise FormatError(f"label {labels.max()} outside [0, {n_classes})", field="labels", path=labels_path)
    images = np.frombuffer(pixels, dtype=np.uint8).reshape(count, 1, rows, cols).astype(np.float32) / np.float32(255)
    logger.debug("loaded %d IDX samples from %s", count, images_path)
    return Dataset(images, labels, n_classes, split)


def _to_bytes(images: Tensor) -> bytes:
    quantized = np.rint(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)
    return quantized.tobytes()


def save_idx(dataset: Dataset, images_path: Path, labels_path: Path) -> None:
    """Write a single-channel dataset (values in [0, 1]) as an IDX pair."""
    n, c, h, w = dataset.images.shape
    if c != 1:
        raise ConfigurationError(f"IDX holds single-channel images, got {c} channels")
    _write(images_path, struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + _to_bytes(dataset.images))
    _write(labels_path, struct.pack(">II", IDX_LABELS_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes())


def _cifar_label_bytes(n_classes: int) -> int:
    # CIFAR-100 records carry (coarse, fine); the fine label is the target.
    return 1 if n_classes == 10 else 2


def load_cifar(paths: Sequence[Path], n_classes: int, *, split: str = "train") -> Dataset:
    label_bytes = _cifar_label_bytes(n_classes)
    record = label_bytes + CIFAR_PIXELS
    images, labels = [], []
    for path in paths:
        raw = _read(path)
        if len(raw) % record:
            raise FormatError(f"size {len(raw)} is not a multiple of the {record}-byte record", field="records", path=path)
        recs = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
        lab = recs[:, label_bytes - 1].astype(np.int64)
        if lab.size and lab.max() >= n_classes:
            raise FormatError(f"label {lab.max()} outside [0, {n_classes})", field="labels", path=path)
        labels.append(lab)
        images.append(recs[:, label_bytes:].reshape(-1, 3, 32, 32))
    if not images:
        raise ConfigurationError("no CIFAR batch files given")
    pixels = np.concatenate(images).astype(np.float32) / np.float32(255)
    logger.debug("loaded %d CIFAR samples from %d files", pixels.shape[0], len(images))
    return Dataset(pixels, np.concatenate(labels), n_classes, split)


def save_cifar(dataset: Dataset, path: Path) -> None:
    n, c, h, w = dataset.images.shape
    if (c, h, w) != (3, 32, 32):
        raise ConfigurationError(f"CIFAR records hold 3x32x32 images, got {c}x{h}x{w}")
    label_bytes = _cifar_label_bytes(dataset.n_classes)
    recs = np.zeros((n, label_bytes + CIFAR_PIXELS), dtype=np.uint8)
    recs[:, label_bytes - 1] = dataset.labels
    recs[:, label_bytes:] = np.frombuffer(_to_bytes(dataset.images), dtype=np.uint8).reshape(n, CIFAR_PIXELS)
    _write(path, recs.tobytes())


def split_indices(total: int, val_count: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if not 0 <= val_count < total:
        raise ConfigurationError(f"val_count {val_count} must be in [0, {total})", field="dataset.val_count")
    perm = rng.generator(seed, rng.SPLIT).permutation(total)
    return np.sort(perm[val_count:]), np.sort(perm[:val_count])


def split(dataset: Dataset, val_count: int, seed: int) -> tuple[Dataset, Dataset]:
    train_idx, val_idx = split_indices(len(dataset), val_count, seed)
    return dataset.subset(train_idx, "train"), dataset.subset(val_idx, "val")


def channel_stats(dataset: Dataset) -> tuple[list[float], list[float]]:
    images = dataset.images.astype(np.float64)
    return images.mean(axis=(0, 2, 3)).tolist(), images.std(axis=(0, 2, 3)).tolist()


def cached_stats(dataset: Dataset, cache_path: Path | None) -> tuple[list[float], list[float]]:
    """Channel mean/std from the JSON sidecar, computing and writing it on first use."""
    if cache_path is not None and Path(cache_path).exists():
        data = json.loads(Path(cache_path).read_text(encoding="utf-8"))
        return list(data["mean"]), list(data["std"])
    mean, std = channel_stats(dataset)
    if cache_path is not None:
        try:
            Path(cache_path).write_text(json.dumps({"mean": mean, "std": std}, indent=2) + "\n", encoding="utf-8")
        except OSError as exc:
            logger.warning("could not cache normalization stats at %s: %s", cache_path, exc)
    return mean, std


def normalize(dataset: Dataset, mean: Sequence[float], std: Sequence[float]) -> Dataset:
    c = dataset.images.shape[1]
    if len(mean) != c or len(std) != c:
        raise ConfigurationError(f"need {c} channel statistics, got mean={len(mean)} std={len(std)}")
    if min(std) <= 0:
        raise ConfigurationError(f"std must be > 0 (got {list(std)})")
    m = np.asarray(mean, dtype=dataset.images.dtype)[None, :, None, None]
    s = np.asarray(std, dtype=dataset.images.dtype)[None, :, None, None]
    return replace(dataset, images=(dataset.images - m) / s)


@dataclass(frozen=True)
class AugmentationPolicy:
    pad_crop: int = 0
    flip: float = 0.0

    def __post_init__(self) -> None:
        if self.pad_crop < 0:
            raise ConfigurationError(f"pad_crop must be >= 0 (got {self.pad_crop})", field="dataset.augmentation.pad_crop")
        if not 0.0 <= self.flip <= 1.0:
            raise ConfigurationError(f"flip probability {self.flip} outside [0, 1]", field="dataset.augmentation.flip")

    @property
    def enabled(self) -> bool:
        return self.pad_crop > 0 or self.flip > 0


def augment(batch: Tensor, policy: AugmentationPolicy, gen: np.random.Generator) -> Tensor:
    """Reflect-pad random crop, then horizontal flip, per sample."""
    if not policy.enabled:
        return batch
    out = batch
    b, _, h, w = batch.shape
    if policy.pad_crop:
        p = policy.pad_crop
        padded = np.pad(batch, ((0, 0), (0, 0), (p, p), (p, p)), mode="reflect")
        offsets = gen.integers(0, 2 * p + 1, size=(b, 2))
        out = np.stack([padded[i, :, dy : dy + h, dx : dx + w] for i, (dy, dx) in enumerate(offsets)])
    if policy.flip:
        flips = gen.random(b) < policy.flip
        out = out.copy() if out is batch else out
        out[flips] = out[flips][..., ::-1]
    return out


@dataclass
class Batch:
    index: int
    images: Tensor
    labels: np.ndarray


def batch_count(size: int, batch_size: int) -> int:
    return -(-size // batch_size)


def iterate_batches(
    dataset: Dataset,
    batch_size: int,
    *,
    seed: int,
    epoch: int,
    policy: AugmentationPolicy | None = None,
    shuffle: bool = True,
    start: int = 0,
) -> Iterator[Batch]:
    """Batches ``start..`` of one epoch.

    Order comes from the batch-order stream keyed by epoch, augmentation from
    the augment stream keyed by (epoch, batch), so any batch can be rebuilt
    without replaying the ones before it.
    """
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1 (got {batch_size})", field="training.batch_size")
    n = len(dataset)
    order = rng.generator(seed, rng.BATCH_ORDER, epoch).permutation(n) if shuffle else np.arange(n)
    for b in range(start, batch_count(n, batch_size)):
        idx = order[b * batch_size : (b + 1) * batch_size]
        images = dataset.images[idx]
        if policy is not None and policy.enabled:
            images = augment(images, policy, rng.generator(seed, rng.AUGMENT, epoch, b))
        yield Batch(b, images, dataset.labels[idx])


_DONE = object()


class Prefetcher:
    """Iterates ``source`` on a background thread, at most ``depth`` items ahead.

    Items arrive in source order; an exception in the source is re-raised in
    the consumer.
    """

    def __init__(self, source: Iterable, depth: int = 2) -> None:
        if depth < 1:
            raise ConfigurationError(f"prefetch depth must be >= 1 (got {depth})")
        self._queue: queue.Queue = queue.Queue(maxsize=depth)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, args=(iter(source),), name="asge-prefetch", daemon=True)
        self._thread.start()

    def _put(self, item: object) -> bool:
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _run(self, source: Iterator) -> None:
        try:
            for item in source:
                if not self._put(item):
                    return
        except BaseException as exc:  # handed to the consumer
            self._put(exc)
            return
        self._put(_DONE)

    def __iter__(self) -> Prefetcher:
        return self

    def __next__(self):
        item = self._queue.get()
        if item is _DONE:
            raise StopIteration
        if isinstance(item, BaseException):
            raise item
        return item

    def close(self) -> None:
        self._stop.set()
        self._thread.join(timeout=1.0)


def _resolve(paths: Mapping[str, object], key: str) -> object:
    if key not in paths or paths[key] in (None, "", []):
        raise ConfigurationError("path is required", field=f"dataset.paths.{key}")
    return paths[key]


def load_splits(
    name: str,
    paths: Mapping[str, object],
    *,
    val_count: int,
    seed: int,
    stats_path: Path | None = None,
) -> tuple[Dataset, Dataset, Dataset]:
    """(train, val, test), normalized with statistics of the train split."""
    try:
        info = DATASETS[name]
    except KeyError:
        raise ConfigurationError(f"unknown dataset {name!r}", field="dataset.name") from None
    if info.format == "idx":
        full = load_idx(_resolve(paths, "train_images"), _resolve(paths, "train_labels"), n_classes=info.n_classes)
        test = load_idx(
            _resolve(paths, "test_images"), _resolve(paths, "test_labels"), n_classes=info.n_classes, split="test"
        )
    else:
        full = load_cifar(_resolve(paths, "train_batches"), info.n_classes)
        test = load_cifar(_resolve(paths, "test_batches"), info.n_classes, split="test")
    train, val = split(full, val_count, seed)
    mean, std = cached_stats(train, stats_path)
    logger.info("%s: %d train / %d val / %d test samples", name, len(train), len(val), len(test))
    return normalize(train, mean, std), normalize(val, mean, std), normalize(test, mean, std)
