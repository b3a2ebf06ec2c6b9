"""Keyed, counter-based random streams.

Every stream is a Philox generator whose key is derived from the master seed
and an integer path such as ``(purpose, replicate, order)``. Streams are
therefore independent of evaluation order and of how work is scheduled.
"""

from __future__ import annotations

import numpy as np

# path prefixes; SAMPLES is shared by both estimators so that their
# depth-one runs consume identical points for the same seed
SAMPLES = 1
GAUSS = 3
TRIAL = 4
PILOT = 5

MASK64 = (1 << 64) - 1


def stream(seed: int, *path: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed) & MASK64, spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *path: int) -> int:
    """A new 64-bit master seed for a sub-experiment (e.g. an outer trial)."""
    ss = np.random.SeedSequence(int(seed) & MASK64, spawn_key=tuple(int(p) for p in path))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def fresh_seed() -> int:
    """Entropy-backed seed, for configs that leave the seed unset."""
    return int(np.random.SeedSequence().generate_state(1, dtype=np.uint64)[0])
