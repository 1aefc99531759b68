"""Counter-based random streams keyed by (seed, purpose, node id).

Each tree node draws from its own Philox stream, so results do not depend
on the order in which subtrees are processed.
"""
import zlib

import numpy as np


def stream(seed: int, tag: str, key: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed) & (2**64 - 1), zlib.crc32(tag.encode()), int(key)])
    return np.random.Generator(np.random.Philox(ss))
