"""
Seeded random streams

All randomness flows through numpy's counter-based Philox generator keyed by a
SeedSequence of non-negative integers: (seed, stream, *counters). Each purpose
gets its own stream id so that adding draws in one place never shifts another.
"""

import numpy as np

DATA = 1
INIT = 2
TRAIN = 3
PROBE = 4
ATTACK = 5
PATCH_MASK = 6
ATTN_DROP = 7
POOL_SWITCH = 8
NOISE = 9
PCA = 10
SPLIT = 11
GRAD_CHECK = 12


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent generator for (seed, *stream)."""
    key = [int(seed)] + [int(s) for s in stream]
    if any(k < 0 for k in key):
        raise ValueError(f"seed and stream ids must be non-negative, got {key}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))
