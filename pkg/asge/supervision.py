"""Frozen random projection heads and the layer-local loss/gradient chain."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import rng
from .errors import ConfigurationError, InputError
from .goodness import PartitionPlan, goodness_jacobian_apply, spatial_goodness
from .tensor import ConvParams, Tensor, conv2d_forward, conv2d_weight_grad, relu

JacobianFn = Callable[[Tensor, PartitionPlan, Tensor], Tensor]


@dataclass(frozen=True)
class ProjectionHead:
    """Fixed map from goodness space to class logits, stored as its seed.

    ``weights`` (``[in_dim, N]``) and ``bias`` (``[1, N]``) are drawn from
    N(0, std=1/sqrt(N)) by a PCG64 stream seeded with ``seed``: weights first,
    then bias. The arrays are read-only.
    """

    seed: int
    in_dim: int
    n_classes: int
    weights: Tensor = field(init=False, repr=False, compare=False)
    bias: Tensor = field(init=False, repr=False, compare=False)
    _cast: dict = field(init=False, repr=False, compare=False, default_factory=dict)

    def __post_init__(self) -> None:
        if self.in_dim < 1 or self.n_classes < 1:
            raise ConfigurationError(f"projection dims must be positive (in_dim={self.in_dim}, N={self.n_classes})")
        if not 0 <= self.seed < 2**64:
            raise ConfigurationError(f"projection seed {self.seed} is not a u64")
        gen = np.random.Generator(np.random.PCG64(self.seed))
        std = 1.0 / np.sqrt(self.n_classes)
        weights = gen.standard_normal((self.in_dim, self.n_classes)) * std
        bias = gen.standard_normal((1, self.n_classes)) * std
        weights.flags.writeable = False
        bias.flags.writeable = False
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "bias", bias)

    def arrays(self, dtype: np.dtype) -> tuple[Tensor, Tensor]:
        """Weights and bias cast to ``dtype`` (cached, read-only)."""
        key = np.dtype(dtype).str
        if key not in self._cast:
            w = self.weights.astype(dtype)
            b = self.bias.astype(dtype)
            w.flags.writeable = False
            b.flags.writeable = False
            self._cast[key] = (w, b)
        return self._cast[key]


def make_projection(seed: int, in_dim: int, n_classes: int) -> ProjectionHead:
    return ProjectionHead(seed=seed, in_dim=in_dim, n_classes=n_classes)


def head_seed(global_seed: int, layer_index: int) -> int:
    return rng.derive_seed(global_seed, rng.PROJECTION, layer_index)


def project(head: ProjectionHead, g: Tensor) -> Tensor:
    """``a = g W + b``, bias broadcast per sample."""
    if g.ndim != 2 or g.shape[1] != head.in_dim:
        raise ConfigurationError(f"goodness shape {g.shape} does not match projection in_dim {head.in_dim}")
    w, b = head.arrays(g.dtype)
    return g @ w + b


def check_targets(targets: np.ndarray, batch: int, n_classes: int) -> np.ndarray:
    targets = np.asarray(targets)
    if targets.shape != (batch,):
        raise InputError(f"targets shape {targets.shape} does not match batch size {batch}")
    if not np.issubdtype(targets.dtype, np.integer):
        raise InputError(f"targets must be integer class indices (got {targets.dtype})")
    if batch and (targets.min() < 0 or targets.max() >= n_classes):
        raise InputError(f"target out of range [0, {n_classes}): min={targets.min()} max={targets.max()}")
    return targets


def local_ce_loss(logits: Tensor, targets: np.ndarray) -> tuple[float, Tensor]:
    """Batch-mean softmax cross-entropy and its gradient w.r.t. the logits."""
    b, n = logits.shape
    targets = check_targets(targets, b, n)
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    log_z = np.log(total)
    rows = np.arange(b)
    loss = float(np.mean(log_z[:, 0] - shifted[rows, targets]))
    grad = exp / total
    grad[rows, targets] -= 1.0
    grad /= b
    return loss, grad


@dataclass
class LocalPass:
    """Everything one layer computes for one batch."""

    features: Tensor  # post-ReLU, pre-pool
    goodness: Tensor
    logits: Tensor
    loss: float
    d_weights: Tensor
    d_bias: Tensor


def local_pass(
    x: Tensor,
    params: ConvParams,
    head: ProjectionHead,
    plan: PartitionPlan,
    targets: np.ndarray,
    *,
    jacobian: JacobianFn = goodness_jacobian_apply,
) -> LocalPass:
    pre = conv2d_forward(x, params)
    features, mask = relu(pre)
    g = spatial_goodness(features, plan)
    logits = project(head, g)
    loss, d_logits = local_ce_loss(logits, targets)
    w, _ = head.arrays(d_logits.dtype)
    d_goodness = d_logits @ w.T
    d_pre = jacobian(features, plan, d_goodness) * mask
    d_weights, d_bias = conv2d_weight_grad(x, d_pre, params)
    return LocalPass(features, g, logits, loss, d_weights, d_bias)


def layer_local_gradient(
    x: Tensor,
    params: ConvParams,
    head: ProjectionHead,
    plan: PartitionPlan,
    targets: np.ndarray,
    *,
    jacobian: JacobianFn = goodness_jacobian_apply,
) -> tuple[float, Tensor, Tensor]:
    """Loss and conv-parameter gradients of one layer; nothing leaves the layer."""
    result = local_pass(x, params, head, plan, targets, jacobian=jacobian)
    return result.loss, result.d_weights, result.d_bias
