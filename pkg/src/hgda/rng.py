"""Counter-based, splittable random streams.

Every random draw in the package comes from a Philox generator whose key is
derived from ``(seed, path)``. A stream never depends on how many numbers
another stream consumed, so work can be split across workers (or reordered)
without changing results.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Stream purposes; the first element of a key path.
INIT = 1
SAMPLE = 2
DROPOUT = 3
DEV = 4
EPISODE = 5
ADAPT = 6
SYNTH = 7


@dataclass(frozen=True)
class RngKey:
    seed: int
    path: tuple[int, ...] = ()

    def child(self, *idx: int) -> "RngKey":
        return RngKey(self.seed, self.path + tuple(int(i) for i in idx))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed & (2**64 - 1), spawn_key=self.path)
        return np.random.Generator(np.random.Philox(ss))

    def to_json(self) -> dict:
        return {"seed": self.seed, "path": list(self.path)}


def as_generator(rng) -> np.random.Generator:
    """Accept an RngKey, a Generator, an int seed or None."""
    if isinstance(rng, RngKey):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    return RngKey(0 if rng is None else int(rng)).generator()
