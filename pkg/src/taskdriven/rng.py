"""Seeded random streams.

Every stream is derived from a master seed plus an integer key path, so a
rollout's draws depend only on (seed, epoch, rollout index) and never on how
many rollouts run or on which thread.
"""

from __future__ import annotations

import numpy as np

SEED_MASK = (1 << 64) - 1


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed) & SEED_MASK, spawn_key=tuple(int(s) for s in stream))))


# stream tags keep independent uses of one seed from colliding
INIT = 0
ROLLOUT = 1
MINE = 2
EVAL = 3
MARGINAL = 4
