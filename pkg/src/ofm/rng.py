"""Seeded, splittable random streams (Philox counter-based generator)."""

from __future__ import annotations

import numpy as np


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(ss))


def split(seed, n: int) -> list[np.random.Generator]:
    """Independent child streams, reproducible from the parent seed."""
    if isinstance(seed, np.random.Generator):
        return [np.random.Generator(np.random.Philox(s)) for s in seed.bit_generator.seed_seq.spawn(n)]
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [np.random.Generator(np.random.Philox(s)) for s in ss.spawn(n)]
