"""Named, independent PRNG streams derived from one experiment seed.

Every consumer of randomness (weight init for a node, the server's epsilon
draws, data shuffling, elections, attacker target choice) gets its own
``numpy.random.Generator`` keyed by ``(seed, stream, index)``.  Adding or
removing one consumer therefore never shifts the draws seen by another.
"""

from __future__ import annotations

import numpy as np

STREAMS = {
    "init": 1,
    "eps": 2,
    "shuffle": 3,
    "election": 4,
    "attack": 5,
    "data": 6,
    "test_eps": 7,
    "shard": 8,
}


def stream(seed: int, name: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), STREAMS[name], int(index)]))
