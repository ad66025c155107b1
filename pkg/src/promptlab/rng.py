"""Seeded, splittable random streams.

Every consumer asks for a stream by (seed, *keys); streams are Philox
generators keyed through SeedSequence so results do not depend on the
order in which streams are requested.
"""
import zlib

import numpy as np


def _key(k):
    if isinstance(k, (int, np.integer)):
        return int(k) & 0xFFFFFFFF
    return zlib.crc32(str(k).encode())


def stream(seed, *keys):
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))
