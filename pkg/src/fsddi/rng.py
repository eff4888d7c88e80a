"""Named random sub-streams derived from one root seed.

Every consumer asks for ``stream(seed, "name", *counters)``. The name is
hashed into the spawn key of a :class:`numpy.random.SeedSequence` that
keys a Philox counter-based generator, so adding a new consumer never
shifts the draws of an existing one.
"""
import zlib

import numpy as np


def _key(name):
    return zlib.crc32(name.encode("utf-8"))


def seed_sequence(seed, name, *counters):
    key = (_key(name),) + tuple(int(c) for c in counters)
    return np.random.SeedSequence(int(seed), spawn_key=key)


def stream(seed, name, *counters):
    return np.random.Generator(np.random.Philox(seed_sequence(seed, name, *counters)))


def derive_seed(seed, name, *counters):
    """A plain integer seed for APIs that only accept ints (e.g. sklearn)."""
    return int(seed_sequence(seed, name, *counters).generate_state(1, dtype=np.uint32)[0])
