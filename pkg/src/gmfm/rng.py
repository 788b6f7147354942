"""Named random streams derived from a single integer seed.

``stream(seed, "restart/3")`` always yields the same generator, independent
of how many other streams were created before it.
"""

import zlib

import numpy as np


def _key(name) -> int:
    return zlib.crc32(str(name).encode("utf-8"))


def stream(seed: int, *names) -> np.random.Generator:
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(n) for n in names))
    return np.random.default_rng(seq)


def derive_seed(seed: int, *names) -> int:
    """A 63-bit integer seed for a named child stream (for passing across processes or into CLI calls)."""
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(n) for n in names))
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> 1)
