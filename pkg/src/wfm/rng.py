"""Seedable, splittable random streams.

Every stream is a Philox (counter-based) generator keyed by a root seed and an
integer path, e.g. ``stream(seed, member, step, scale)``. Streams for distinct
paths are statistically independent, and a stream's contents do not depend on
which other streams were drawn first, so results are unchanged by the order or
degree of parallel execution.
"""
from __future__ import annotations

import os

import numpy as np

DEFAULT_SEED = 0


def stream(seed: int, *path: int) -> np.random.Generator:
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(seq))


def default_seed() -> int:
    """Seed from ``WFM_SEED`` if set, else 0."""
    value = os.environ.get("WFM_SEED")
    return int(value) if value else DEFAULT_SEED
