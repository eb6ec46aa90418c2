"""Finite-difference check of every layer's local gradient, in float64.

Each layer's analytic ``(dW, db)`` is compared with central differences of the
same layer-local loss, perturbing one parameter at a time. Coordinates whose
perturbation flips a ReLU unit are skipped, since the loss is not
differentiable there.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import rng
from .errors import GradcheckFailure, UsageError
from .goodness import PartitionPlan, goodness_jacobian_apply, spatial_goodness
from .layers import LayerState, layer_infer
from .network import ArchSpec, LayerSpec, build_network
from .supervision import JacobianFn, ProjectionHead, layer_local_gradient, local_ce_loss, project
from .tensor import ConvParams, Tensor, conv2d_forward, relu

logger = logging.getLogger(__name__)

MAX_CHANNELS = 8
DEFAULT_THRESHOLD = 1e-4
DEFAULT_STEP = 1e-4
# Absolute floor on the error denominator; below it errors are measured absolutely.
ERROR_FLOOR = 1e-5


def default_spec(n_classes: int = 10) -> ArchSpec:
    """Two layers with 4 and 8 channels on 3x8x8 inputs, no pooling."""
    return ArchSpec((LayerSpec(4), LayerSpec(8)), n_classes, (3, 8, 8), alpha=1.0, strategy="last")


def relative_error(analytic: Tensor, numeric: Tensor) -> Tensor:
    """``|a - n| / max(|a|, |n|, floor)``; both zero gives 0."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), ERROR_FLOOR)
    return np.abs(analytic - numeric) / denom


@dataclass
class LayerGradcheck:
    layer: int
    max_rel_error: float
    worst_param: str | None
    worst_index: list[int] | None
    checked: int
    skipped: int
    threshold: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.threshold


@dataclass
class GradcheckReport:
    threshold: float
    layers: list[LayerGradcheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.layers)

    def failures(self) -> list[LayerGradcheck]:
        return [r for r in self.layers if not r.passed]

    def raise_for_failure(self) -> None:
        bad = self.failures()
        if bad:
            parts = [
                f"layer {r.layer} max rel error {r.max_rel_error:.3e} at {r.worst_param}{r.worst_index}" for r in bad
            ]
            raise GradcheckFailure("; ".join(parts) + f" (threshold {self.threshold:g})")

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "threshold": self.threshold,
            "layers": [{**asdict(r), "passed": r.passed} for r in self.layers],
        }


def _loss(x: Tensor, params: ConvParams, head: ProjectionHead, plan: PartitionPlan, targets: np.ndarray) -> float:
    features, _ = relu(conv2d_forward(x, params))
    loss, _ = local_ce_loss(project(head, spatial_goodness(features, plan)), targets)
    return loss


def check_layer(
    x: Tensor,
    state: LayerState,
    targets: np.ndarray,
    *,
    step: float = DEFAULT_STEP,
    threshold: float = DEFAULT_THRESHOLD,
    jacobian: JacobianFn = goodness_jacobian_apply,
) -> LayerGradcheck:
    params = state.params
    _, d_weights, d_bias = layer_local_gradient(x, params, state.head, state.plan, targets, jacobian=jacobian)
    analytic = {"weights": d_weights, "bias": d_bias}
    base_mask = conv2d_forward(x, params) > 0

    worst = (0.0, None, None)
    checked = skipped = 0
    for name, array in params.arrays().items():
        for index in np.ndindex(array.shape):
            original = array[index]
            array[index] = original + step
            plus = _loss(x, params, state.head, state.plan, targets)
            flipped = not np.array_equal(conv2d_forward(x, params) > 0, base_mask)
            array[index] = original - step
            minus = _loss(x, params, state.head, state.plan, targets)
            flipped = flipped or not np.array_equal(conv2d_forward(x, params) > 0, base_mask)
            array[index] = original
            if flipped:
                skipped += 1
                continue
            checked += 1
            numeric = (plus - minus) / (2.0 * step)
            err = float(relative_error(np.asarray(analytic[name][index]), np.asarray(numeric)))
            if err > worst[0]:
                worst = (err, name, list(index))
    logger.debug("layer %d: max rel error %.3e over %d coordinates (%d skipped)", state.index, worst[0], checked, skipped)
    return LayerGradcheck(state.index, worst[0], worst[1], worst[2], checked, skipped, threshold)


def run_gradcheck(
    spec: ArchSpec | None = None,
    seed: int = 0,
    *,
    batch: int = 4,
    zero_input: bool = False,
    step: float = DEFAULT_STEP,
    threshold: float = DEFAULT_THRESHOLD,
    jacobian: JacobianFn = goodness_jacobian_apply,
) -> GradcheckReport:
    """Check every layer of ``spec`` on one random batch; layer ``l`` sees the
    detached output of layer ``l - 1``."""
    spec = spec or default_spec()
    too_wide = [i for i, ls in enumerate(spec.layers, start=1) if ls.out_channels > MAX_CHANNELS]
    if too_wide:
        raise UsageError(f"gradcheck is limited to <= {MAX_CHANNELS} channels per layer (layers {too_wide} exceed it)")
    network = build_network(spec, seed, precision="float64")
    gen = rng.generator(seed, rng.INIT, 0)
    x = np.zeros((batch, *spec.input_shape)) if zero_input else gen.standard_normal((batch, *spec.input_shape))
    targets = gen.integers(0, spec.n_classes, size=batch)

    report = GradcheckReport(threshold)
    for state in network.layers:
        report.layers.append(check_layer(x, state, targets, step=step, threshold=threshold, jacobian=jacobian))
        _, _, x = layer_infer(x, state)
    return report
