"""Seeded, splittable random streams; nothing here touches numpy's global state."""

from __future__ import annotations

import numpy as np


def stream(seed: int, *keys: int) -> np.random.Generator:
    """A generator identified by ``seed`` and a path of integer stream keys.

    Distinct key paths give statistically independent streams, so callers
    can derive per-purpose or per-step generators without sharing state.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, keys)])))


# stream identifiers
INIT = 1
DATA = 2
DROPOUT = 3
HELDOUT = 4
