"""Seedable, splittable random streams.

Algorithm: numpy's PCG64 bit generator seeded through ``SeedSequence``.
A stream is identified by an integer root seed plus a path of names; each
name is hashed with CRC-32 into the sequence's ``spawn_key``. The same
(seed, path) therefore always yields the same stream, and distinct paths
give statistically independent streams.
"""

import zlib

import numpy as np


def _key(parts):
    out = []
    for p in parts:
        if isinstance(p, (int, np.integer)):
            out.append(int(p) & 0xFFFFFFFF)
        else:
            out.append(zlib.crc32(str(p).encode("utf-8")))
    return tuple(out)


def make_rng(seed, *path):
    """Return a ``numpy.random.Generator`` for stream ``path`` under ``seed``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=_key(path))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed, *path):
    """A 32-bit integer seed for a named child stream."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=_key(path))
    return int(ss.generate_state(1, dtype=np.uint32)[0])
