"""Named random streams.

Every stochastic component draws from a Philox (counter-based) generator whose
key is derived from ``(seed, *path)`` through :class:`numpy.random.SeedSequence`
with ``spawn_key=path``. Two streams with different paths are independent, and
the same path always reproduces the same numbers, regardless of the order in
which streams are created. Path components used in this package:

    (seed, 0, r)   dataset simulation, trajectory r
    (seed, 1)      dataset subsampling
    (seed, 2, r)   random-box initial state of trajectory r
    (seed, 10, k)  score training (k = 0 init, 1 shuffle, 2 noise)
    (seed, 20, k)  velocity training (k = 0 init, 1 shuffle, 2 collocation)
    (seed, 30, k)  Langevin sampling
    (seed, 40, r)  evaluation simulations
"""
from __future__ import annotations

import numpy as np


def stream(seed: int, *path: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))
