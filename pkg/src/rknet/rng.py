"""Counter-based random number generation keyed by (seed, purpose, indices).

Every stochastic operation receives its generator explicitly, and generators
are derived from stable integer keys, so runs are bit-reproducible and
independent of prefetch or evaluation order.
"""

import zlib

import numpy as np


def _key_part(part):
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def make_rng(seed, *tags):
    """Philox generator for a (seed, *tags) key; tags are ints or short strings."""
    entropy = (int(seed),) + tuple(_key_part(t) for t in tags)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
