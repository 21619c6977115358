"""Seed splitting.

Every random stream is derived from one 64-bit root seed plus a tuple of
integer keys, so per-seed work can run in any order (or concurrently) and
still draw the same numbers.
"""

import zlib

import numpy as np


def _key(part):
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def rng_for(seed, *keys):
    seq = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=tuple(_key(k) for k in keys))
    return np.random.default_rng(seq)
