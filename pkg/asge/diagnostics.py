"""Goodness distributions before and after each pooling kind."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import TextIO

import numpy as np

from .errors import UsageError
from .goodness import PartitionPlan, plan_with_patches, spatial_goodness
from .layers import POOL_KINDS, PoolSpec, pool
from .network import Network, infer
from .tensor import Tensor

VARIANTS = ("origin", *POOL_KINDS)
CSV_COLUMNS = ("layer", "variant", "channel", "patch_i", "patch_j", "value")
QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


@dataclass
class GoodnessDump:
    layer: int
    values: dict[str, Tensor]  # variant -> [B, C, P, P]


def feature_variants(features: Tensor, plan: PartitionPlan, pool_spec: PoolSpec) -> dict[str, Tensor]:
    """Patch energies of ``features`` as-is and after rms/avg/max pooling.

    Pooled maps keep the layer's patch count where it still tiles the smaller map.
    """
    b, c = features.shape[:2]
    out = {"origin": spatial_goodness(features, plan).reshape(b, c, plan.patches, plan.patches)}
    for kind in POOL_KINDS:
        pooled = pool(features, replace(pool_spec, kind=kind))
        pplan = plan_with_patches(plan.patches, c, pooled.shape[2], pooled.shape[3])
        out[kind] = spatial_goodness(pooled, pplan).reshape(b, c, pplan.patches, pplan.patches)
    return out


def goodness_dump(network: Network, batch: Tensor, layer: int) -> GoodnessDump:
    if not 1 <= layer <= len(network.layers):
        raise UsageError(f"layer {layer} outside 1..{len(network.layers)}")
    state = network.layers[layer - 1]
    if state.pool is None:
        raise UsageError(f"layer {layer} has no pooling; pick a layer followed by a pool")
    features, _ = infer(network, batch, upto=layer)
    return GoodnessDump(layer, feature_variants(features[-1], state.plan, state.pool))


def write_csv(dump: GoodnessDump, stream: TextIO) -> int:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    rows = 0
    for variant in VARIANTS:
        values = dump.values[variant]
        for sample in values:
            for (ch, i, j), v in np.ndenumerate(sample):
                writer.writerow((dump.layer, variant, ch, i, j, repr(float(v))))
                rows += 1
    return rows


def summarize(dump: GoodnessDump) -> dict:
    summary = {}
    for variant in VARIANTS:
        flat = dump.values[variant].ravel().astype(np.float64)
        qs = np.quantile(flat, QUANTILES)
        summary[variant] = {
            "count": int(flat.size),
            "mean": float(flat.mean()),
            "std": float(flat.std()),
            "quantiles": {f"q{int(q * 100):02d}": float(v) for q, v in zip(QUANTILES, qs)},
        }
    return {"layer": dump.layer, "variants": summary}
