"""Named random sub-streams derived from one seed.

Every consumer (data, init, dropout, mixing, ...) draws from its own stream so
that toggling one source of randomness never shifts another.
"""

import zlib

import numpy as np


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng([int(seed), key, *map(int, extra)])
