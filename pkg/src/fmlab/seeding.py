"""Deterministic RNG substreams.

Every stochastic component gets its own child stream keyed by integers, so
results do not depend on execution order or on how work is sharded across
processes.
"""

from __future__ import annotations

import numpy as np


def substream(root_seed: int, *key: int) -> np.random.Generator:
    """Independent generator for (root_seed, key).

    Distinct keys give statistically independent streams; the same key always
    reproduces the same stream.
    """
    ss = np.random.SeedSequence(entropy=root_seed, spawn_key=tuple(key))
    return np.random.default_rng(ss)


def child_seeds(root_seed: int, *key: int, count: int) -> list[int]:
    """Derive `count` integer seeds below (root_seed, key), for pickling."""
    ss = np.random.SeedSequence(entropy=root_seed, spawn_key=tuple(key))
    return [int(s) for s in ss.generate_state(count, dtype=np.uint64)]
