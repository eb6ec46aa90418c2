"""Untrained transforms between supervised layers, and the per-layer train step.

Pooling and layer norm sit after the goodness tap and before the detach
boundary, so neither needs a backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ConfigurationError, NonFiniteLossError
from .goodness import PartitionPlan, spatial_goodness
from .optim import OptimizerState, optimizer_step
from .supervision import ProjectionHead, check_targets, local_pass, project
from .tensor import ConvParams, Tensor, conv2d_forward, relu

POOL_KINDS = ("rms", "avg", "max")


@dataclass(frozen=True)
class PoolSpec:
    kind: str = "rms"
    window: int = 2
    stride: int = 2
    strict: bool = True

    def __post_init__(self) -> None:
        if self.kind not in POOL_KINDS:
            raise ConfigurationError(f"unknown pooling kind {self.kind!r} (expected one of {', '.join(POOL_KINDS)})")
        if self.window < 1 or self.stride < 1:
            raise ConfigurationError(f"pool window/stride must be >= 1 (got {self.window}/{self.stride})")

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        if h < self.window or w < self.window:
            raise ConfigurationError(f"{h}x{w} map is smaller than pool window {self.window}")
        if self.strict and ((h - self.window) % self.stride or (w - self.window) % self.stride):
            raise ConfigurationError(
                f"{h}x{w} map does not tile with pool window {self.window} stride {self.stride}"
            )
        return (h - self.window) // self.stride + 1, (w - self.window) // self.stride + 1


@dataclass(frozen=True)
class NormSpec:
    epsilon: float = 1e-5
    affine: bool = False

    def __post_init__(self) -> None:
        if not self.epsilon > 0:
            raise ConfigurationError(f"layer norm epsilon must be > 0 (got {self.epsilon})")
        if self.affine:
            raise ConfigurationError("learnable layer-norm affine is not supported: it would never receive gradient")


def _pool_windows(x: Tensor, spec: PoolSpec) -> Tensor:
    if x.ndim != 4:
        raise ConfigurationError(f"pooling expects [B, C, H, W], got {x.shape}")
    out_h, out_w = spec.output_hw(x.shape[2], x.shape[3])
    x = np.ascontiguousarray(x)
    sb, sc, sh, sw = x.strides
    return as_strided(
        x,
        shape=(x.shape[0], x.shape[1], out_h, out_w, spec.window, spec.window),
        strides=(sb, sc, spec.stride * sh, spec.stride * sw, sh, sw),
        writeable=False,
    )


def rms_pool(x: Tensor, spec: PoolSpec) -> Tensor:
    """Root of the mean square over each window; keeps regional energy."""
    return np.sqrt(np.square(_pool_windows(x, spec)).mean(axis=(4, 5)))


def avg_pool(x: Tensor, spec: PoolSpec) -> Tensor:
    return _pool_windows(x, spec).mean(axis=(4, 5))


def max_pool(x: Tensor, spec: PoolSpec) -> Tensor:
    return _pool_windows(x, spec).max(axis=(4, 5))


_POOLS = {"rms": rms_pool, "avg": avg_pool, "max": max_pool}


def pool(x: Tensor, spec: PoolSpec) -> Tensor:
    return _POOLS[spec.kind](x, spec)


def layer_norm(x: Tensor, spec: NormSpec) -> Tensor:
    """Per-sample normalization over all of (C, H, W), no affine."""
    axes = tuple(range(1, x.ndim))
    mean = x.mean(axis=axes, keepdims=True)
    var = x.var(axis=axes, keepdims=True)
    return ((x - mean) / np.sqrt(var + spec.epsilon)).astype(x.dtype, copy=False)


@dataclass
class LayerState:
    """Everything one supervised layer owns. ``index`` is 1-based."""

    index: int
    params: ConvParams
    head: ProjectionHead
    plan: PartitionPlan
    pool: PoolSpec | None
    norm: NormSpec
    optimizer: OptimizerState


@dataclass
class LayerStepResult:
    output: Tensor  # pooled + normalized, detached
    features: Tensor  # post-ReLU, pre-pool
    loss: float
    logits: Tensor
    correct: int


def forward_output(features: Tensor, state: LayerState) -> Tensor:
    out = pool(features, state.pool) if state.pool is not None else features
    # Copy so the forwarded tensor shares no memory with anything this layer keeps.
    return np.array(layer_norm(out, state.norm), copy=True)


def layer_infer(x: Tensor, state: LayerState) -> tuple[Tensor, Tensor, Tensor]:
    """Inference pass: ``(features, logits, output)``, no parameter change."""
    features, _ = relu(conv2d_forward(x, state.params))
    logits = project(state.head, spatial_goodness(features, state.plan))
    return features, logits, forward_output(features, state)


def asge_layer_step(x: Tensor, state: LayerState, targets: np.ndarray, lr: float) -> LayerStepResult:
    """Train one layer on one batch and forward its detached output.

    The forwarded output is computed from the parameters as they were before
    this step's update.
    """
    targets = check_targets(targets, x.shape[0], state.head.n_classes)
    result = local_pass(x, state.params, state.head, state.plan, targets)
    if not np.isfinite(result.loss):
        raise NonFiniteLossError(state.index, result.loss)
    output = forward_output(result.features, state)
    optimizer_step(
        state.params.arrays(),
        {"weights": result.d_weights, "bias": result.d_bias},
        state.optimizer,
        lr,
    )
    correct = int(np.sum(result.logits.argmax(axis=1) == targets))
    return LayerStepResult(output, result.features, result.loss, result.logits, correct)
