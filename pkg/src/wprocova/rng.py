"""Reproducible random streams for Monte Carlo work.

Streams are counter-based (Philox) and keyed by an integer path such as
``(seed, cell, replication)``.  The same key always yields the same stream,
independent of execution order, thread count, or how many other streams were
consumed in between.
"""

from __future__ import annotations

import numpy as np

_U64 = (1 << 64) - 1


def _key(seed: int, path: tuple[int, ...]) -> list[int]:
    # SeedSequence entropy must be non-negative; fold signed ints into u64.
    return [int(seed) & _U64, *(int(p) & _U64 for p in path)]


def substream(seed: int, *path: int) -> np.random.Generator:
    """Return a generator uniquely determined by ``(seed, *path)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(_key(seed, path))))


def derive_seed(seed: int, index: int) -> int:
    """Stable 63-bit child seed for grid cell ``index`` under ``seed``."""
    state = np.random.SeedSequence(_key(seed, (index,))).generate_state(1, np.uint64)[0]
    return int(state >> np.uint64(1))
