"""Spatial goodness: per-patch mean squared activation and its Jacobian.

Goodness vectors are laid out channel-major, then patch row, then patch
column. The projection heads' row semantics depend on this order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .tensor import Tensor


@dataclass(frozen=True)
class PartitionPlan:
    channels: int
    height: int
    width: int
    patches: int  # P_l, patches per axis

    def __post_init__(self) -> None:
        if self.patches < 1 or self.patches > min(self.height, self.width):
            raise ConfigurationError(f"partition factor {self.patches} outside [1, {min(self.height, self.width)}]")
        if self.height % self.patches or self.width % self.patches:
            raise ConfigurationError(
                f"{self.height}x{self.width} map does not tile evenly into {self.patches}x{self.patches} patches"
            )

    @property
    def patch_h(self) -> int:
        return self.height // self.patches

    @property
    def patch_w(self) -> int:
        return self.width // self.patches

    @property
    def goodness_dim(self) -> int:
        return self.channels * self.patches * self.patches


def _largest_common_divisor_at_most(limit: int, h: int, w: int) -> int:
    p = limit
    while p > 1 and (h % p or w % p):
        p -= 1
    return p


def partition_factor(alpha: float, c_l: int, c_last: int, h: int, w: int) -> int:
    """Patches per axis for a layer with ``c_l`` channels on an ``h x w`` map.

    ``min(max(1, floor(alpha * C_L / C_l)), H, W)``, then lowered to the largest
    value that still divides both ``h`` and ``w``.
    """
    if min(c_l, c_last, h, w) < 1:
        raise ConfigurationError(f"partition_factor needs positive dims (C_l={c_l}, C_L={c_last}, H={h}, W={w})")
    if alpha < 0:
        raise ConfigurationError(f"alpha must be >= 0 (got {alpha})", field="arch.alpha")
    p = min(max(1, math.floor(alpha * c_last / c_l)), h, w)
    return _largest_common_divisor_at_most(p, h, w)


def make_plan(alpha: float, c_l: int, c_last: int, h: int, w: int) -> PartitionPlan:
    return PartitionPlan(channels=c_l, height=h, width=w, patches=partition_factor(alpha, c_l, c_last, h, w))


def plan_with_patches(patches: int, channels: int, h: int, w: int) -> PartitionPlan:
    """Plan using at most ``patches`` per axis, reduced until it tiles ``h x w``."""
    p = _largest_common_divisor_at_most(max(1, min(patches, h, w)), h, w)
    return PartitionPlan(channels=channels, height=h, width=w, patches=p)


def _check(features: Tensor, plan: PartitionPlan) -> None:
    if features.ndim != 4 or features.shape[1:] != (plan.channels, plan.height, plan.width):
        raise ConfigurationError(
            f"features {features.shape} do not match plan C={plan.channels} H={plan.height} W={plan.width}"
        )


def _patch_view(x: Tensor, plan: PartitionPlan) -> Tensor:
    p = plan.patches
    return x.reshape(x.shape[0], plan.channels, p, plan.patch_h, p, plan.patch_w)


def spatial_goodness(features: Tensor, plan: PartitionPlan) -> Tensor:
    """``[B, C, H, W]`` post-ReLU maps to ``[B, C * P * P]`` patch energies."""
    _check(features, plan)
    energy = np.square(_patch_view(features, plan)).mean(axis=(3, 5))  # [B, C, P, P]
    return energy.reshape(features.shape[0], plan.goodness_dim)


def goodness_jacobian_apply(features: Tensor, plan: PartitionPlan, upstream: Tensor) -> Tensor:
    """Pull ``upstream`` (``[B, C * P * P]``) back through ``spatial_goodness``."""
    _check(features, plan)
    if upstream.shape != (features.shape[0], plan.goodness_dim):
        raise ConfigurationError(
            f"upstream {upstream.shape} does not match goodness shape {(features.shape[0], plan.goodness_dim)}"
        )
    p = plan.patches
    scale = 2.0 / (plan.patch_h * plan.patch_w)
    up = upstream.reshape(features.shape[0], plan.channels, p, 1, p, 1)
    grad = _patch_view(features, plan) * (up * scale)
    return grad.reshape(features.shape).astype(features.dtype, copy=False)
