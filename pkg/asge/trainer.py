"""Epoch loop, validation, metrics and checkpoint retention."""

from __future__ import annotations

import itertools
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import rng
from .checkpoint import load_checkpoint, restore_network, save_checkpoint
from .config import RunConfig, TrainingConfig
from .data import AugmentationPolicy, Batch, Dataset, Prefetcher, batch_count, iterate_batches
from .errors import ConfigurationError, UsageError
from .network import BatchMessage, Network, infer, select_best_layer, training_stages
from .optim import Schedule, cosine_lr
from .pipeline import pipeline_execute, sequential_execute
from .supervision import check_targets

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
BEST_CHECKPOINT = "best.ckpt"


@dataclass
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset


# ── Evaluation ───────────────────────────────────────────────


@dataclass
class EvalReport:
    split: str
    count: int
    strategy: str
    per_layer_acc: list[float]
    top1: float
    top5: float | None
    best_layer: int | None
    classifier_params: int

    def to_dict(self) -> dict:
        return asdict(self)


def _count_batch(
    network: Network, images: np.ndarray, labels: np.ndarray, strategy: str, best_layer: int | None
) -> dict:
    features, logits = infer(network, images)
    per_layer = [int(np.sum(a.argmax(axis=1) == labels)) for a in logits]
    scores = None
    if strategy != "best":
        scores = network.classifier.logits(network.classifier_features(features))
    elif best_layer is not None:
        scores = logits[best_layer - 1]
    top1 = top5 = 0
    if scores is not None:
        top1 = int(np.sum(scores.argmax(axis=1) == labels))
        if scores.shape[1] >= 100:
            top = np.argpartition(scores, -5, axis=1)[:, -5:]
            top5 = int(np.sum(np.any(top == labels[:, None], axis=1)))
    return {"per_layer": per_layer, "top1": top1, "top5": top5}


def evaluate(
    network: Network,
    dataset: Dataset,
    batch_size: int,
    *,
    threads: int = 1,
    strategy: str | None = None,
    best_layer: int | None = None,
    select: bool = False,
) -> EvalReport:
    """Per-layer projection accuracy plus one strategy's accuracy.

    ``strategy`` defaults to the network's own. Any network can be scored with
    ``best``. The reported layer is ``best_layer``, else the one recorded on the
    network at validation; ``select`` (or no recorded layer) picks it from these
    very accuracies instead. Batches may be sharded across ``threads`` workers;
    counts are integers, so the result does not depend on it.
    """
    n = len(dataset)
    if n == 0:
        raise UsageError(f"{dataset.split} split is empty")
    strategy = strategy or network.spec.strategy
    if strategy != "best" and (strategy != network.spec.strategy or network.classifier is None):
        raise UsageError(f"network was trained for strategy {network.spec.strategy!r}, cannot score {strategy!r}")
    recorded = best_layer if best_layer is not None else (None if select else network.best_layer)
    if recorded is not None and not 1 <= recorded <= len(network.layers):
        raise UsageError(f"best layer {recorded} outside 1..{len(network.layers)}")
    chunks = [
        (dataset.images[i : i + batch_size], dataset.labels[i : i + batch_size]) for i in range(0, n, batch_size)
    ]

    def run(chunk: tuple[np.ndarray, np.ndarray]) -> dict:
        return _count_batch(network, chunk[0], chunk[1], strategy, recorded)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads, thread_name_prefix="asge-eval") as pool:
            counts = list(pool.map(run, chunks))
    else:
        counts = [run(c) for c in chunks]

    per_layer_acc = [sum(c["per_layer"][k] for c in counts) / n for k in range(len(network.layers))]
    chosen = recorded if recorded is not None else select_best_layer(per_layer_acc)
    top5 = None
    if strategy == "best":
        top1 = per_layer_acc[chosen - 1]
        if network.spec.n_classes >= 100:
            top5 = _best_layer_top5(network, chunks, chosen) / n
        params = 0
    else:
        top1 = sum(c["top1"] for c in counts) / n
        if network.spec.n_classes >= 100:
            top5 = sum(c["top5"] for c in counts) / n
        params = network.classifier.parameter_count
    return EvalReport(dataset.split, n, strategy, per_layer_acc, top1, top5, chosen, params)


def _best_layer_top5(network: Network, chunks: list[tuple[np.ndarray, np.ndarray]], layer: int) -> int:
    hits = 0
    for images, labels in chunks:
        _, logits = infer(network, images, upto=layer)
        top = np.argpartition(logits[-1], -5, axis=1)[:, -5:]
        hits += int(np.sum(np.any(top == labels[:, None], axis=1)))
    return hits


# ── Training ─────────────────────────────────────────────────


@dataclass
class EpochStats:
    """Running sums over the batches of the current epoch."""

    seen: int = 0
    loss_sums: list[float] = field(default_factory=list)
    correct: list[int] = field(default_factory=list)
    classifier_loss_sum: float = 0.0

    def add(self, msg: BatchMessage) -> None:
        b = len(msg.targets)
        if not self.loss_sums:
            self.loss_sums = [0.0] * len(msg.losses)
            self.correct = [0] * len(msg.correct)
        self.seen += b
        for k, (loss, correct) in enumerate(zip(msg.losses, msg.correct)):
            self.loss_sums[k] += loss * b
            self.correct[k] += correct
        if msg.classifier_loss is not None:
            self.classifier_loss_sum += msg.classifier_loss * b

    def losses(self) -> list[float]:
        return [s / self.seen for s in self.loss_sums] if self.seen else []

    def accuracies(self) -> list[float]:
        return [c / self.seen for c in self.correct] if self.seen else []


def _compact(msg: BatchMessage) -> BatchMessage:
    msg.activations = None
    msg.logits = []
    msg.features = []
    return msg


@dataclass
class RunResult:
    epochs: int
    best_epoch: int | None
    best_val_acc: float | None
    best_checkpoint: Path | None
    metrics_path: Path | None
    records: list[dict] = field(default_factory=list)
    wall_seconds: float = 0.0


class Trainer:
    """Owns the network and the schedule position of one run.

    ``epoch`` is the 0-based epoch in progress and ``step`` the number of its
    batches already trained; both are restored from checkpoints, so training
    can stop and resume at any batch boundary.
    """

    def __init__(
        self,
        network: Network,
        splits: Splits,
        training: TrainingConfig,
        *,
        policy: AugmentationPolicy | None = None,
        out_dir: Path | None = None,
        checkpoint_keep: int = 2,
    ) -> None:
        if training.precision != network.dtype.name:
            raise ConfigurationError(
                f"network is {network.dtype.name} but training asks for {training.precision}",
                field="training.precision",
            )
        self.network = network
        self.splits = splits
        self.training = training
        self.policy = policy or AugmentationPolicy()
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.checkpoint_keep = checkpoint_keep
        self.schedule = Schedule(training.lr_max, training.lr_min, training.epochs)
        self.epoch = 0
        self.step = 0
        self.stats = EpochStats()
        self.best_val_acc: float | None = None
        self.best_epoch: int | None = None

    @property
    def steps_per_epoch(self) -> int:
        return batch_count(len(self.splits.train), self.training.batch_size)

    @property
    def finished(self) -> bool:
        return self.epoch >= self.training.epochs

    @property
    def eval_threads(self) -> int:
        return 1 if self.training.deterministic else self.training.threads

    def lr(self) -> float:
        return cosine_lr(self.schedule, self.epoch)

    def _messages(self, batches: Iterator[Batch]) -> Iterator[BatchMessage]:
        n_classes = self.network.spec.n_classes
        for b in batches:
            targets = check_targets(b.labels, len(b.labels), n_classes)
            yield BatchMessage(b.index, b.images.astype(self.network.dtype, copy=False), targets)

    def run_steps(self, n: int | None = None) -> int:
        """Train the next ``n`` batches of the current epoch (the rest of it when
        ``n`` is None). Returns the number of batches trained."""
        if self.finished:
            return 0
        stop = self.steps_per_epoch if n is None else min(self.steps_per_epoch, self.step + n)
        if stop <= self.step:
            return 0
        t = self.training
        batches = iterate_batches(
            self.splits.train, t.batch_size, seed=self.network.seed, epoch=self.epoch, policy=self.policy, start=self.step
        )
        source = Prefetcher(self._messages(itertools.islice(batches, stop - self.step)), depth=t.queue_depth)
        stages = training_stages(self.network, self.lr())
        last = stages[-1]
        stages[-1] = lambda msg: _compact(last(msg))
        try:
            if t.pipeline:
                results = pipeline_execute(stages, source, depth=t.queue_depth)
            else:
                results = sequential_execute(stages, source)
        finally:
            source.close()
        for msg in results:
            self.stats.add(msg)
        self.step = stop
        return len(results)

    def finish_epoch(self, wall_seconds: float | None = None) -> dict:
        """Validate, record metrics, write checkpoints and move to the next epoch."""
        if self.step < self.steps_per_epoch:
            raise UsageError(f"epoch {self.epoch + 1} has {self.steps_per_epoch - self.step} untrained batches")
        t = self.training
        report = evaluate(self.network, self.splits.val, t.batch_size, threads=self.eval_threads, select=True)
        self.network.best_layer = report.best_layer
        record = {
            "epoch": self.epoch + 1,
            "lr": self.lr(),
            "per_layer_train_loss": self.stats.losses(),
            "per_layer_train_acc": self.stats.accuracies(),
            "per_layer_val_acc": report.per_layer_acc,
            "strategy_val_acc": report.top1,
            "classifier_train_loss": (
                self.stats.classifier_loss_sum / self.stats.seen if self.network.classifier is not None else None
            ),
            "best_layer": self.network.best_layer,
            "wall_seconds": None if t.deterministic else wall_seconds,
        }
        logger.info(
            "epoch %d/%d lr=%.3g mean layer loss=%.4f val acc=%.4f (best layer %d)",
            self.epoch + 1,
            t.epochs,
            record["lr"],
            float(np.mean(record["per_layer_train_loss"])),
            report.top1,
            self.network.best_layer,
        )
        if wall_seconds is not None:
            logger.debug("epoch %d took %.2fs", self.epoch + 1, wall_seconds)

        improved = self.best_val_acc is None or report.top1 > self.best_val_acc
        if improved:
            self.best_val_acc = report.top1
            self.best_epoch = self.epoch + 1
        self.epoch += 1
        self.step = 0
        self.stats = EpochStats()

        if self.out_dir is not None:
            with open(self.out_dir / METRICS_FILE, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
            meta = {"val_acc": report.top1}
            if improved:
                self.save(self.out_dir / BEST_CHECKPOINT, **meta)
            if self.checkpoint_keep > 0:
                self.save(self.out_dir / f"epoch-{self.epoch:04d}.ckpt", **meta)
                self._prune()
        return record

    def _prune(self) -> None:
        kept = sorted(self.out_dir.glob("epoch-*.ckpt"))
        for old in kept[: -self.checkpoint_keep]:
            old.unlink()
            logger.debug("removed old checkpoint %s", old)

    def run(self) -> RunResult:
        records = []
        start = time.perf_counter()
        while not self.finished:
            epoch_start = time.perf_counter()
            self.run_steps()
            records.append(self.finish_epoch(time.perf_counter() - epoch_start))
        best = self.out_dir / BEST_CHECKPOINT if self.out_dir is not None else None
        metrics = self.out_dir / METRICS_FILE if self.out_dir is not None else None
        return RunResult(
            self.training.epochs, self.best_epoch, self.best_val_acc, best, metrics, records, time.perf_counter() - start
        )

    # ── Checkpoints ──────────────────────────────────────────

    def save(self, path: Path, **extra: object) -> None:
        meta = {
            "epoch": self.epoch,
            "step_in_epoch": self.step,
            "stats": asdict(self.stats),
            "best_val_acc": self.best_val_acc,
            "best_epoch": self.best_epoch,
            "training": asdict(self.training),
            "rng": {"seed": self.network.seed, "streams": rng.STREAMS},
            **extra,
        }
        save_checkpoint(path, self.network, meta)

    @classmethod
    def resume(
        cls,
        path: Path,
        splits: Splits,
        training: TrainingConfig,
        *,
        policy: AugmentationPolicy | None = None,
        out_dir: Path | None = None,
        checkpoint_keep: int = 2,
    ) -> Trainer:
        data = load_checkpoint(path)
        network = restore_network(data)
        if network.seed != training.seed:
            raise ConfigurationError(
                f"checkpoint was trained with seed {network.seed}, config asks for {training.seed}",
                field="training.seed",
            )
        trainer = cls(network, splits, training, policy=policy, out_dir=out_dir, checkpoint_keep=checkpoint_keep)
        meta = data.meta
        trainer.epoch = int(meta["epoch"])
        trainer.step = int(meta["step_in_epoch"])
        trainer.stats = EpochStats(**meta["stats"])
        trainer.best_val_acc = meta.get("best_val_acc")
        trainer.best_epoch = meta.get("best_epoch")
        logger.info("resumed %s at epoch %d, batch %d", path, trainer.epoch + 1, trainer.step)
        return trainer


def train(network: Network | None, splits: Splits, config: RunConfig, *, resume: Path | None = None) -> RunResult:
    """Full run from a ``RunConfig``; artifacts land in ``config.output.dir``.

    With ``resume`` the network comes from that checkpoint and ``network`` is ignored.
    """
    out_dir = Path(config.output.dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    kwargs = {
        "policy": config.augmentation_policy(),
        "out_dir": out_dir,
        "checkpoint_keep": config.output.checkpoint_keep,
    }
    if resume is not None:
        trainer = Trainer.resume(resume, splits, config.training, **kwargs)
    else:
        (out_dir / METRICS_FILE).unlink(missing_ok=True)
        trainer = Trainer(network, splits, config.training, **kwargs)
    return trainer.run()
