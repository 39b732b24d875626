"""Every random stream is derived from one root seed plus a purpose tag."""
from __future__ import annotations

import numpy as np

PURPOSES = {"data": 0, "mask": 1, "init": 2, "shuffle": 3, "split": 4, "head": 5}


def rng_for(seed: int, purpose: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), PURPOSES[purpose], *map(int, extra)]))
