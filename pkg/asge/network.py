"""Architecture specs, the detached layer stack, and the prediction strategies."""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import rng
from .errors import ConfigurationError, NonFiniteLossError, UsageError
from .goodness import make_plan
from .layers import LayerState, NormSpec, PoolSpec, asge_layer_step, layer_infer
from .optim import OptimizerState, optimizer_step
from .supervision import check_targets, head_seed, local_ce_loss, make_projection
from .tensor import ConvParams, Tensor, dtype_for, global_avg_pool

STRATEGIES = ("last", "fusion", "best")


@dataclass(frozen=True)
class LayerSpec:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    pool: PoolSpec | None = None
    norm: NormSpec = field(default_factory=NormSpec)


@dataclass(frozen=True)
class ArchSpec:
    layers: tuple[LayerSpec, ...]
    n_classes: int
    input_shape: tuple[int, int, int]  # (C, H, W)
    alpha: float = 1.0
    strategy: str = "fusion"

    def __post_init__(self) -> None:
        if len(self.layers) < 2:
            raise ConfigurationError(f"need at least 2 conv layers (got {len(self.layers)})", field="arch.layers")
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown strategy {self.strategy!r}", field="arch.strategy")
        if self.n_classes < 2:
            raise ConfigurationError(f"n_classes must be >= 2 (got {self.n_classes})", field="arch.n_classes")
        if self.alpha < 0:
            raise ConfigurationError(f"alpha must be >= 0 (got {self.alpha})", field="arch.alpha")

    @property
    def final_channels(self) -> int:
        return self.layers[-1].out_channels

    @property
    def has_classifier(self) -> bool:
        return self.strategy != "best"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> ArchSpec:
        layers = []
        for item in data["layers"]:
            pool = PoolSpec(**item["pool"]) if item.get("pool") else None
            norm = NormSpec(**item.get("norm", {}))
            layers.append(LayerSpec(**{**item, "pool": pool, "norm": norm}))
        return cls(
            layers=tuple(layers),
            n_classes=int(data["n_classes"]),
            input_shape=tuple(data["input_shape"]),
            alpha=float(data["alpha"]),
            strategy=data["strategy"],
        )

    def geometry_hash(self) -> bytes:
        """SHA-256 over everything that shapes the parameters (not the strategy)."""
        body = self.to_dict()
        body.pop("strategy")
        canonical = json.dumps(body, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).digest()

    def with_strategy(self, strategy: str) -> ArchSpec:
        """Switch strategy; moving to ``best`` replaces the classifier with a copy
        of the last conv layer (without its pooling)."""
        if strategy == self.strategy:
            return self
        layers = self.layers
        if strategy == "best":
            layers = layers + (replace(layers[-1], pool=None),)
        elif self.strategy == "best":
            layers = layers[:-1]
        return replace(self, layers=layers, strategy=strategy)

    def with_pooling(self, kind: str) -> ArchSpec:
        layers = tuple(replace(ls, pool=replace(ls.pool, kind=kind)) if ls.pool else ls for ls in self.layers)
        return replace(self, layers=layers)


def _stack(channels: Sequence[int], pool_after: Sequence[int], pool_kind: str) -> tuple[LayerSpec, ...]:
    return tuple(
        LayerSpec(out_channels=c, pool=PoolSpec(kind=pool_kind) if i + 1 in pool_after else None)
        for i, c in enumerate(channels)
    )


def vgg8_spec(
    n_classes: int = 10, input_shape: tuple[int, int, int] = (3, 32, 32), *, alpha: float = 1.0,
    strategy: str = "fusion", pool_kind: str = "rms",
) -> ArchSpec:
    """Seven 3x3 conv layers (128,128,256,256,512,512,512), pooling after 2, 4 and 7."""
    layers = _stack([128, 128, 256, 256, 512, 512, 512], (2, 4, 7), pool_kind)
    return ArchSpec(layers, n_classes, input_shape, alpha, "fusion").with_strategy(strategy)


def small4_spec(
    n_classes: int = 10, input_shape: tuple[int, int, int] = (1, 28, 28), *, alpha: float = 1.0,
    strategy: str = "fusion", pool_kind: str = "rms",
) -> ArchSpec:
    """Desk-scale stack: 32, 32, 64, 64 channels, pooling after 2 and 4."""
    layers = _stack([32, 32, 64, 64], (2, 4), pool_kind)
    return ArchSpec(layers, n_classes, input_shape, alpha, "fusion").with_strategy(strategy)


PRESETS: dict[str, Callable[..., ArchSpec]] = {"vgg8": vgg8_spec, "small4": small4_spec}


@dataclass
class LinearClassifier:
    weights: Tensor  # [D, N]
    bias: Tensor  # [N]
    optimizer: OptimizerState

    @property
    def parameter_count(self) -> int:
        return int(self.weights.size + self.bias.size)

    def arrays(self) -> dict[str, Tensor]:
        return {"weights": self.weights, "bias": self.bias}

    def logits(self, feats: Tensor) -> Tensor:
        if feats.shape[1] != self.weights.shape[0]:
            raise ConfigurationError(f"classifier expects {self.weights.shape[0]} features, got {feats.shape[1]}")
        return feats @ self.weights + self.bias

    def step(self, feats: Tensor, targets: np.ndarray, lr: float) -> tuple[float, int]:
        logits = self.logits(feats)
        loss, d_logits = local_ce_loss(logits, targets)
        grads = {"weights": feats.T @ d_logits, "bias": d_logits.sum(axis=0)}
        optimizer_step(self.arrays(), grads, self.optimizer, lr)
        return loss, int(np.sum(logits.argmax(axis=1) == targets))


@dataclass
class Network:
    spec: ArchSpec
    seed: int
    layers: list[LayerState]
    classifier: LinearClassifier | None
    dtype: np.dtype
    best_layer: int | None = None
    executions: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.executions:
            self.executions = [0] * len(self.layers)

    def classifier_dim(self) -> int:
        if self.spec.strategy == "last":
            return self.spec.final_channels
        return sum(ls.out_channels for ls in self.spec.layers[1:])

    def classifier_features(self, features: Sequence[Tensor]) -> Tensor:
        """GAP of post-ReLU, pre-norm maps: the last layer (last) or layers 2..L (fusion)."""
        if self.spec.strategy == "last":
            return global_avg_pool(features[-1])
        if self.spec.strategy == "fusion":
            return np.concatenate([global_avg_pool(f) for f in features[1:]], axis=1)
        raise UsageError("strategy 'best' has no classifier features")


def _he_init(gen: np.random.Generator, shape: tuple[int, int, int, int], dtype: np.dtype) -> Tensor:
    fan_in = shape[1] * shape[2] * shape[3]
    return (gen.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def build_network(
    spec: ArchSpec,
    global_seed: int,
    *,
    optimizer: str = "adamw",
    weight_decay: float = 0.001,
    precision: str = "float32",
) -> Network:
    dtype = dtype_for(precision)
    c_in, h, w = spec.input_shape
    layers: list[LayerState] = []
    for i, ls in enumerate(spec.layers, start=1):
        try:
            weights = _he_init(rng.generator(global_seed, rng.INIT, i), (ls.out_channels, c_in, ls.kernel, ls.kernel), dtype)
            params = ConvParams(weights, np.zeros(ls.out_channels, dtype=dtype), ls.stride, ls.padding)
            h, w = params.output_hw(h, w)
            plan = make_plan(spec.alpha, ls.out_channels, spec.final_channels, h, w)
            head = make_projection(head_seed(global_seed, i), plan.goodness_dim, spec.n_classes)
            if ls.pool is not None:
                h, w = ls.pool.output_hw(h, w)
        except ConfigurationError as exc:
            raise ConfigurationError(str(exc), layer=i) from None
        layers.append(
            LayerState(i, params, head, plan, ls.pool, ls.norm, OptimizerState(optimizer, weight_decay))
        )
        c_in = ls.out_channels

    net = Network(spec, global_seed, layers, None, dtype)
    if spec.has_classifier:
        dim = net.classifier_dim()
        net.classifier = LinearClassifier(
            np.zeros((dim, spec.n_classes), dtype=dtype),
            np.zeros(spec.n_classes, dtype=dtype),
            OptimizerState(optimizer, weight_decay),
        )
    return net


# ── Training ─────────────────────────────────────────────────


@dataclass
class BatchMessage:
    """One batch travelling down the stack; each stage appends its own results."""

    index: int
    activations: Tensor
    targets: np.ndarray
    features: list[Tensor] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    correct: list[int] = field(default_factory=list)
    logits: list[Tensor] = field(default_factory=list)
    classifier_loss: float | None = None
    classifier_correct: int | None = None


Stage = Callable[[BatchMessage], BatchMessage]

_EXECUTIONS_LOCK = threading.Lock()


def _count_execution(network: Network, position: int) -> None:
    # eval shards run infer from several threads
    with _EXECUTIONS_LOCK:
        network.executions[position] += 1


def layer_stage(network: Network, position: int, lr: float) -> Stage:
    state = network.layers[position]
    keep_features = (network.spec.strategy == "fusion" and position > 0) or (
        network.spec.strategy == "last" and position == len(network.layers) - 1
    )

    def run(msg: BatchMessage) -> BatchMessage:
        result = asge_layer_step(msg.activations, state, msg.targets, lr)
        _count_execution(network, position)
        msg.activations = result.output
        msg.features.append(result.features if keep_features else None)
        msg.losses.append(result.loss)
        msg.correct.append(result.correct)
        msg.logits.append(result.logits)
        return msg

    return run


def classifier_stage(network: Network, lr: float) -> Stage:
    def run(msg: BatchMessage) -> BatchMessage:
        feats = network.classifier_features(msg.features)
        msg.classifier_loss, msg.classifier_correct = network.classifier.step(feats, msg.targets, lr)
        if not np.isfinite(msg.classifier_loss):
            raise NonFiniteLossError("classifier", msg.classifier_loss)
        msg.features = []
        return msg

    return run


def training_stages(network: Network, lr: float) -> list[Stage]:
    stages = [layer_stage(network, k, lr) for k in range(len(network.layers))]
    if network.classifier is not None:
        stages.append(classifier_stage(network, lr))
    return stages


def forward_train(network: Network, batch: Tensor, targets: np.ndarray, lr: float, index: int = 0) -> BatchMessage:
    """Sequential reference: every layer trains on ``batch`` with detach between layers."""
    targets = check_targets(targets, batch.shape[0], network.spec.n_classes)
    msg = BatchMessage(index, batch.astype(network.dtype, copy=False), targets)
    for stage in training_stages(network, lr):
        msg = stage(msg)
    return msg


# ── Inference ────────────────────────────────────────────────


def infer(network: Network, batch: Tensor, upto: int | None = None) -> tuple[list[Tensor], list[Tensor]]:
    """Run layers ``1..upto`` (1-based, default all); returns features and projection logits."""
    upto = len(network.layers) if upto is None else upto
    x = batch.astype(network.dtype, copy=False)
    features: list[Tensor] = []
    logits: list[Tensor] = []
    for position in range(upto):
        f, a, x = layer_infer(x, network.layers[position])
        _count_execution(network, position)
        features.append(f)
        logits.append(a)
    return features, logits


def _require_strategy(network: Network, strategy: str) -> None:
    if network.spec.strategy != strategy or network.classifier is None:
        raise UsageError(f"network was built for strategy {network.spec.strategy!r}, not {strategy!r}")


def predict_last(network: Network, batch: Tensor) -> np.ndarray:
    _require_strategy(network, "last")
    features, _ = infer(network, batch)
    return network.classifier.logits(network.classifier_features(features)).argmax(axis=1)


def predict_fusion(network: Network, batch: Tensor) -> np.ndarray:
    _require_strategy(network, "fusion")
    features, _ = infer(network, batch)
    return network.classifier.logits(network.classifier_features(features)).argmax(axis=1)


def predict_best(network: Network, batch: Tensor, best_layer: int | None = None) -> np.ndarray:
    """Argmax of the frozen projection at ``best_layer``; deeper layers never run."""
    best_layer = network.best_layer if best_layer is None else best_layer
    if best_layer is None:
        raise UsageError("no best layer recorded; run validation first")
    if not 1 <= best_layer <= len(network.layers):
        raise UsageError(f"best layer {best_layer} outside 1..{len(network.layers)}")
    _, logits = infer(network, batch, upto=best_layer)
    return logits[-1].argmax(axis=1)


def select_best_layer(accuracies: Sequence[float], *, exclude_first: bool = True) -> int:
    """1-based layer with the highest accuracy; ties go to the shallower layer.

    Layer 1 is not a candidate when deeper layers were evaluated.
    """
    if not accuracies:
        raise UsageError("no per-layer accuracies to select from")
    start = 1 if exclude_first and len(accuracies) > 1 else 0
    best = start
    for i in range(start + 1, len(accuracies)):
        if accuracies[i] > accuracies[best]:
            best = i
    return best + 1
