"""Counter-based random substreams.

Every random draw in a chain comes from a Philox stream whose 256-bit counter
is positioned at ``(0, index, update, iteration)`` under a key derived from the
root seed.  A stream is therefore a pure function of (seed, iteration, update,
index), so the order in which rows or observations are processed never
changes the result.
"""

from __future__ import annotations

from enum import IntEnum

import numpy as np


class Update(IntEnum):
    INIT = 0
    LOADINGS = 1
    ERROR_PRECISIONS = 2
    FACTORS = 3
    GAMMA = 4
    LOCAL_SHRINKAGE = 5
    DELTA = 6
    HYPER = 7
    ADAPT = 8


class StreamFactory:
    def __init__(self, seed: int):
        self.seed = int(seed)
        self._key = np.random.SeedSequence(self.seed).generate_state(2, np.uint64)

    def stream(self, iteration: int, update: int, index: int = 0) -> np.random.Generator:
        counter = np.array([0, index, int(update), iteration], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=self._key, counter=counter))


def gamma_draw(rng: np.random.Generator, shape, rate):
    """Gamma draws under the shape/rate convention used throughout the package.

    numpy parameterizes by scale; this is the single conversion point.
    """
    return rng.gamma(shape, 1.0 / np.asarray(rate, dtype=float))
