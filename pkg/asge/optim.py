"""AdamW, SGD with momentum, and the cosine learning-rate schedule.

Parameters are dicts of named arrays updated in place; moment buffers live in
an ``OptimizerState`` keyed by the same names.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, UsageError
from .tensor import Tensor

OPTIMIZERS = ("adamw", "sgd_momentum")


@dataclass
class OptimizerState:
    kind: str
    weight_decay: float
    betas: tuple[float, float] = (0.9, 0.999)
    momentum: float = 0.9
    eps: float = 1e-8
    step: int = 0
    moments: dict[str, dict[str, Tensor]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in OPTIMIZERS:
            raise ConfigurationError(f"unknown optimizer {self.kind!r}", field="training.optimizer")

    def hyperparameters(self) -> dict:
        return {
            "kind": self.kind,
            "weight_decay": self.weight_decay,
            "betas": list(self.betas),
            "momentum": self.momentum,
            "eps": self.eps,
            "step": self.step,
        }


def _check(params: dict[str, Tensor], grads: dict[str, Tensor]) -> None:
    if params.keys() != grads.keys():
        raise ConfigurationError(f"parameter names {sorted(params)} do not match gradients {sorted(grads)}")
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ConfigurationError(f"{name}: gradient shape {grads[name].shape} != parameter shape {p.shape}")


def adamw_step(params: dict[str, Tensor], grads: dict[str, Tensor], state: OptimizerState, lr: float) -> OptimizerState:
    """Decoupled weight decay, then the bias-corrected Adam update."""
    _check(params, grads)
    beta1, beta2 = state.betas
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for name, p in params.items():
        g = grads[name]
        slot = state.moments.setdefault(name, {"m": np.zeros_like(p), "v": np.zeros_like(p)})
        m, v = slot["m"], slot["v"]
        if state.weight_decay:
            p *= p.dtype.type(1.0 - lr * state.weight_decay)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        denom = np.sqrt(v / bc2) + state.eps
        p -= ((lr / bc1) * m / denom).astype(p.dtype, copy=False)
    return state


def sgd_momentum_step(
    params: dict[str, Tensor], grads: dict[str, Tensor], state: OptimizerState, lr: float
) -> OptimizerState:
    """``v <- mu v + (g + wd * theta)``; ``theta <- theta - lr v``."""
    _check(params, grads)
    state.step += 1
    for name, p in params.items():
        slot = state.moments.setdefault(name, {"v": np.zeros_like(p)})
        v = slot["v"]
        v *= state.momentum
        v += grads[name]
        if state.weight_decay:
            v += state.weight_decay * p
        p -= (lr * v).astype(p.dtype, copy=False)
    return state


def optimizer_step(
    params: dict[str, Tensor], grads: dict[str, Tensor], state: OptimizerState, lr: float
) -> OptimizerState:
    if state.kind == "adamw":
        return adamw_step(params, grads, state, lr)
    return sgd_momentum_step(params, grads, state, lr)


@dataclass(frozen=True)
class Schedule:
    lr_max: float
    lr_min: float
    total_steps: int
    kind: str = "cosine"

    def __post_init__(self) -> None:
        if self.kind != "cosine":
            raise ConfigurationError(f"unknown schedule {self.kind!r}", field="training.schedule")
        if not (0 < self.lr_min <= self.lr_max):
            raise ConfigurationError(
                f"need 0 < lr_min <= lr_max (got {self.lr_min}, {self.lr_max})", field="training.lr_min"
            )
        if self.total_steps < 1:
            raise ConfigurationError(f"total_steps must be >= 1 (got {self.total_steps})")


def cosine_lr(schedule: Schedule, step: int) -> float:
    if not 0 <= step <= schedule.total_steps:
        raise UsageError(f"schedule step {step} outside [0, {schedule.total_steps}]")
    span = schedule.lr_max - schedule.lr_min
    return schedule.lr_min + 0.5 * span * (1.0 + math.cos(math.pi * step / schedule.total_steps))
