"""Deterministic random streams keyed by integer tuples.

Every consumer of randomness in the simulator asks for a generator keyed by
``(seed, *key)``.  Keys are integers (a tag from the constants below plus
step / probe / batch indices), so the draws made for one piece of work never
depend on how many other pieces ran before it or on how many worker threads
were used.
"""

from __future__ import annotations

import numpy as np

# stream tags
POPULATION = 1
TCL_STEP = 2
LOAD_TRUTH = 3
UTILITY = 4
CURVE = 5
ACCEPTANCE_STUDY = 6
FEEDER = 7
REFERENCE = 8


class Streams:
    """Factory of independent generators under a fixed seed and key prefix."""

    __slots__ = ("seed", "prefix")

    def __init__(self, seed: int, prefix: tuple[int, ...] = ()):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)
        self.prefix = tuple(int(k) for k in prefix)

    def child(self, *key: int) -> "Streams":
        return Streams(self.seed, self.prefix + tuple(int(k) for k in key))

    def generator(self, *key: int) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=self.prefix + tuple(int(k) for k in key))
        return np.random.Generator(np.random.PCG64(ss))

    def __repr__(self) -> str:
        return f"Streams(seed={self.seed}, prefix={self.prefix})"


def as_streams(source: "Streams | int") -> Streams:
    if isinstance(source, Streams):
        return source
    return Streams(int(source))
