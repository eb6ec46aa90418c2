"""Run configuration: YAML file -> frozen dataclasses, overrides, path resolution.

Sections map one-to-one onto the dataclasses below. Unknown keys are errors
that name their dotted path; ``resolved.json`` written next to a run holds every
default materialized and is itself loadable here (JSON is valid YAML).
"""

from __future__ import annotations

import json
import logging
import os
import types
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import yaml

from .data import CIFAR_PATH_FIELDS, DATASETS, IDX_PATH_FIELDS, AugmentationPolicy
from .errors import ConfigurationError
from .layers import POOL_KINDS, PoolSpec
from .network import PRESETS, STRATEGIES, ArchSpec, LayerSpec
from .optim import OPTIMIZERS, Schedule
from .tensor import PRECISIONS

logger = logging.getLogger(__name__)

DATA_DIR_ENV = "ASGE_DATA_DIR"
ARCH_PRESETS = (*PRESETS, "custom")


@dataclass(frozen=True)
class AugmentationConfig:
    # None: the dataset's default recipe
    pad_crop: int | None = None
    flip: float | None = None


@dataclass(frozen=True)
class DatasetConfig:
    name: str = "cifar10"
    paths: dict[str, Any] = field(default_factory=dict)
    val_count: int | None = None
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)


@dataclass(frozen=True)
class LayerConfig:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    # true: pool with arch.pooling; a kind name pins that layer
    pool: bool | str | None = None


def _layer_pool(pool: bool | str | None, default_kind: str) -> PoolSpec | None:
    if pool is None or pool is False:
        return None
    return PoolSpec(kind=default_kind if pool is True else pool)


@dataclass(frozen=True)
class ArchConfig:
    preset: str = "vgg8"
    alpha: float = 1.0
    strategy: str = "fusion"
    pooling: str = "rms"
    layers: list[LayerConfig] = field(default_factory=list)


@dataclass(frozen=True)
class TrainingConfig:
    optimizer: str = "adamw"
    lr_max: float = 0.0002
    lr_min: float = 0.00001
    weight_decay: float = 0.001
    schedule: str = "cosine"
    batch_size: int = 128
    epochs: int = 5
    seed: int = 0
    deterministic: bool = False
    pipeline: bool = False
    queue_depth: int = 2
    threads: int = 1
    precision: str = "float32"


@dataclass(frozen=True)
class OutputConfig:
    dir: str = "runs/asge"
    checkpoint_keep: int = 2


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def arch_spec(self) -> ArchSpec:
        info = DATASETS[self.dataset.name]
        arch = self.arch
        if arch.preset != "custom":
            return PRESETS[arch.preset](
                info.n_classes, info.input_shape, alpha=arch.alpha, strategy=arch.strategy, pool_kind=arch.pooling
            )
        if not arch.layers:
            raise ConfigurationError("custom preset needs at least 2 layers", field="arch.layers")
        layers = tuple(
            LayerSpec(lc.out_channels, lc.kernel, lc.stride, lc.padding, _layer_pool(lc.pool, arch.pooling))
            for lc in arch.layers
        )
        return ArchSpec(layers, info.n_classes, info.input_shape, arch.alpha, "fusion").with_strategy(arch.strategy)

    def augmentation_policy(self) -> AugmentationPolicy:
        info = DATASETS[self.dataset.name]
        aug = self.dataset.augmentation
        return AugmentationPolicy(
            info.pad_crop if aug.pad_crop is None else aug.pad_crop,
            info.flip if aug.flip is None else aug.flip,
        )

    def materialized(self) -> RunConfig:
        """Same run with dataset-dependent defaults written out."""
        info = DATASETS[self.dataset.name]
        policy = self.augmentation_policy()
        dataset = replace(
            self.dataset,
            val_count=info.val_count if self.dataset.val_count is None else self.dataset.val_count,
            augmentation=AugmentationConfig(policy.pad_crop, policy.flip),
        )
        return replace(self, dataset=dataset)

    def to_dict(self) -> dict:
        return asdict(self)


# ── Parsing ──────────────────────────────────────────────────


def _type_name(hint: object) -> str:
    return getattr(hint, "__name__", str(hint))


def _coerce(value: Any, hint: Any, path: str) -> Any:
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(hint)
        if value is None and type(None) in args:
            return None
        options = [a for a in args if a is not type(None)]
        for inner in options[:-1]:
            try:
                return _coerce(value, inner, path)
            except ConfigurationError:
                continue
        return _coerce(value, options[-1], path)
    if is_dataclass(hint):
        if not isinstance(value, Mapping):
            raise ConfigurationError(f"expected a mapping, got {type(value).__name__}", field=path)
        return _build(hint, value, path)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigurationError(f"expected a list, got {type(value).__name__}", field=path)
        (item,) = typing.get_args(hint)
        return [_coerce(v, item, f"{path}[{i}]") for i, v in enumerate(value)]
    if origin is dict:
        if not isinstance(value, Mapping):
            raise ConfigurationError(f"expected a mapping, got {type(value).__name__}", field=path)
        return dict(value)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"expected true/false, got {value!r}", field=path)
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"expected an integer, got {value!r}", field=path)
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"expected a number, got {value!r}", field=path)
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"expected a string, got {value!r}", field=path)
        return value
    raise ConfigurationError(f"unsupported field type {_type_name(hint)}", field=path)


def _build(cls: type, data: Mapping[str, Any], prefix: str = "") -> Any:
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            dotted = f"{prefix}.{key}" if prefix else str(key)
            raise ConfigurationError(f"unknown key (expected one of {', '.join(sorted(known))})", field=dotted)
    kwargs = {}
    for f in fields(cls):
        path = f"{prefix}.{f.name}" if prefix else f.name
        if f.name in data:
            kwargs[f.name] = _coerce(data[f.name], hints[f.name], path)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(f"missing required key: {exc}", field=prefix or None) from None


def _choice(value: str, allowed: Sequence[str], path: str) -> None:
    if value not in allowed:
        raise ConfigurationError(f"{value!r} is not one of {', '.join(allowed)}", field=path)


def _positive(value: float, path: str, *, minimum: float = 1) -> None:
    if value < minimum:
        raise ConfigurationError(f"must be >= {minimum} (got {value})", field=path)


def validate(config: RunConfig) -> RunConfig:
    """Field-level checks that don't need the filesystem."""
    _choice(config.dataset.name, tuple(DATASETS), "dataset.name")
    _choice(config.arch.preset, ARCH_PRESETS, "arch.preset")
    _choice(config.arch.strategy, STRATEGIES, "arch.strategy")
    _choice(config.arch.pooling, POOL_KINDS, "arch.pooling")
    for i, lc in enumerate(config.arch.layers):
        if isinstance(lc.pool, str):
            _choice(lc.pool, POOL_KINDS, f"arch.layers[{i}].pool")
        _positive(lc.out_channels, f"arch.layers[{i}].out_channels")
    if config.arch.alpha < 0:
        raise ConfigurationError(f"must be >= 0 (got {config.arch.alpha})", field="arch.alpha")
    t = config.training
    _choice(t.optimizer, OPTIMIZERS, "training.optimizer")
    _choice(t.schedule, ("cosine",), "training.schedule")
    _choice(t.precision, tuple(PRECISIONS), "training.precision")
    _positive(t.batch_size, "training.batch_size")
    _positive(t.epochs, "training.epochs")
    _positive(t.queue_depth, "training.queue_depth")
    _positive(t.threads, "training.threads")
    _positive(t.seed, "training.seed", minimum=0)
    _positive(t.weight_decay, "training.weight_decay", minimum=0)
    if config.dataset.val_count is not None:
        _positive(config.dataset.val_count, "dataset.val_count")
    _positive(config.output.checkpoint_keep, "output.checkpoint_keep", minimum=0)
    Schedule(t.lr_max, t.lr_min, t.epochs)
    config.augmentation_policy()
    try:
        config.arch_spec()
    except ConfigurationError as exc:
        if exc.field is not None or exc.layer is not None:
            raise
        raise ConfigurationError(str(exc), field="arch") from None
    return config


def parse_override(text: str) -> tuple[list[str], Any]:
    """``section.key=value``; the value is typed by YAML (``7`` -> int, ``true`` -> bool)."""
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigurationError(f"expected section.key=value, got {text!r}", field="--override")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"cannot parse value {raw!r}: {exc}", field=key.strip()) from None
    return key.strip().split("."), value


def apply_overrides(data: dict, overrides: Sequence[str]) -> dict:
    for text in overrides:
        keys, value = parse_override(text)
        node = data
        for i, k in enumerate(keys[:-1]):
            child = node.setdefault(k, {})
            if not isinstance(child, dict):
                raise ConfigurationError("cannot descend into a non-mapping value", field=".".join(keys[: i + 1]))
            node = child
        node[keys[-1]] = value
        logger.debug("override %s = %r", ".".join(keys), value)
    return data


def data_root(config_dir: Path, data_dir: Path | str | None = None) -> Path:
    if data_dir:
        return Path(data_dir)
    if os.environ.get(DATA_DIR_ENV):
        return Path(os.environ[DATA_DIR_ENV])
    return config_dir


def resolve_paths(config: RunConfig, root: Path, *, check: bool = True) -> RunConfig:
    """Make dataset paths absolute against ``root`` and check that they exist."""
    info = DATASETS[config.dataset.name]
    required = IDX_PATH_FIELDS if info.format == "idx" else CIFAR_PATH_FIELDS
    for key in config.dataset.paths:
        if key not in required:
            raise ConfigurationError(f"unknown path key (expected {', '.join(required)})", field=f"dataset.paths.{key}")
    resolved: dict[str, Any] = {}
    for key in required:
        value = config.dataset.paths.get(key)
        if value in (None, "", []):
            raise ConfigurationError("path is required", field=f"dataset.paths.{key}")
        items = value if isinstance(value, list) else [value]
        absolute = []
        for item in items:
            p = Path(item).expanduser()
            p = p if p.is_absolute() else (root / p)
            p = p.resolve()
            if check and not p.exists():
                raise ConfigurationError(f"file not found: {p}", field=f"dataset.paths.{key}")
            absolute.append(str(p))
        resolved[key] = absolute if isinstance(value, list) else absolute[0]
    return replace(config, dataset=replace(config.dataset, paths=resolved))


def config_from_dict(data: Mapping[str, Any]) -> RunConfig:
    if not isinstance(data, Mapping):
        raise ConfigurationError("top level must be a mapping of sections")
    return validate(_build(RunConfig, data))


def load_config(
    path: Path | str | None,
    overrides: Sequence[str] = (),
    *,
    seed: int | None = None,
    deterministic: bool | None = None,
    pipeline: bool | None = None,
    threads: int | None = None,
    data_dir: Path | str | None = None,
    out_dir: Path | str | None = None,
    check_paths: bool = True,
) -> RunConfig:
    """Read a config file, then apply overrides, then CLI flags; returns it materialized."""
    data: dict = {}
    config_dir = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            loaded = yaml.safe_load(path.read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"{path}: invalid YAML: {exc}") from None
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigurationError(f"{path}: top level must be a mapping of sections")
        data = loaded or {}
        config_dir = path.resolve().parent
    data = apply_overrides(data, overrides)

    flags = {"seed": seed, "deterministic": deterministic, "pipeline": pipeline, "threads": threads}
    training = data.setdefault("training", {})
    if not isinstance(training, dict):
        raise ConfigurationError("expected a mapping", field="training")
    training.update({k: v for k, v in flags.items() if v is not None})
    if out_dir is not None:
        data.setdefault("output", {})["dir"] = str(out_dir)

    config = config_from_dict(data).materialized()
    config = resolve_paths(config, data_root(config_dir, data_dir), check=check_paths)
    out = Path(config.output.dir)
    if not out.is_absolute():
        config = replace(config, output=replace(config.output, dir=str((Path.cwd() / out).resolve())))
    return config


def write_resolved(config: RunConfig, out_dir: Path) -> Path:
    path = Path(out_dir) / "resolved.json"
    path.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
