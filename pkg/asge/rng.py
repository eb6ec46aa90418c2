"""Named random streams derived from one run seed.

All randomness in a run flows from the config seed through ``SeedSequence``
entropy tuples ``(seed, stream, *keys)``. Changing the seed changes every
stream; changing nothing else keeps every stream bit-identical.
"""

from __future__ import annotations

import numpy as np

INIT = 1
PROJECTION = 2
SPLIT = 3
AUGMENT = 4
BATCH_ORDER = 5

STREAMS = {
    "init": INIT,
    "projection": PROJECTION,
    "split": SPLIT,
    "augment": AUGMENT,
    "batch-order": BATCH_ORDER,
}


def _entropy(seed: int, stream: int, keys: tuple[int, ...]) -> list[int]:
    if seed < 0:
        raise ValueError(f"seed must be non-negative (got {seed})")
    return [int(seed), int(stream), *(int(k) for k in keys)]


def generator(seed: int, stream: int, *keys: int) -> np.random.Generator:
    """PCG64 generator for the named sub-stream."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(_entropy(seed, stream, keys))))


def derive_seed(seed: int, stream: int, *keys: int) -> int:
    """A 64-bit seed for the sub-stream, for objects that store only their seed."""
    state = np.random.SeedSequence(_entropy(seed, stream, keys)).generate_state(1, dtype=np.uint64)
    return int(state[0])
