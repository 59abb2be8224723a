"""Deterministic RNG derivation.

Every random draw in the package flows from one user-facing seed through
numpy SeedSequence keyed with small integer tags, so that restarts, grid
cells, and replicates get independent streams while the whole pipeline
stays bit-reproducible (including under process-level parallelism, where
each unit derives its stream from its key rather than from scheduling
order).  Plain seed XOR key would collide (seed ^ 0 == seed); SeedSequence
keying does not.
"""

from __future__ import annotations

import numpy as np

TAG_INIT = 1  # fit initialization, keyed by restart index
TAG_CELL = 2  # model-selection grid cell, keyed by (mode, G, K)
TAG_SIM = 3  # dataset simulation
TAG_REPLICATE = 4  # replicate datasets, keyed by replicate index


def seed_sequence(seed: int, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence((int(seed),) + tuple(int(k) for k in key))


def derive_rng(seed: int, *key: int) -> np.random.Generator:
    """Generator for the stream identified by (seed, *key)."""
    return np.random.default_rng(seed_sequence(seed, *key))


def derive_seed(seed: int, *key: int) -> int:
    """A plain integer sub-seed for handing to a nested component."""
    return int(seed_sequence(seed, *key).generate_state(1, np.uint64)[0])
