"""Named sub-seeds so each component draws from its own random stream."""

import zlib

import numpy as np


def _token(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def rng_for(seed: int, *names) -> np.random.Generator:
    """Generator keyed by ``(seed, *names)``; e.g. ``rng_for(7, "mask")``."""
    return np.random.default_rng([_token(seed)] + [_token(n) for n in names])


def subseed(seed: int, *names) -> int:
    return int(rng_for(seed, *names).integers(0, 2**31 - 1))
