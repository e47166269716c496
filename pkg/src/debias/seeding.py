"""Seeded random streams.

All randomness goes through PCG64 generators derived from a root seed and an
integer key path with :class:`numpy.random.SeedSequence`.  A stream for key
``(k,)`` does not depend on how many other keys exist, so adding a source
never perturbs the draws of earlier sources.
"""

import numpy as np


def stream(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed: int, *key: int) -> int:
    """A 64-bit integer seed for a sub-task, e.g. one trial of a study."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
