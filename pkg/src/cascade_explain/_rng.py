"""Seed-stream derivation.

Every random decision is keyed by ``(seed, *stream)`` so results do not
depend on the order in which trees, forests or runs are executed.
"""

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_seed(seed: int, *stream: int) -> int:
    """Return a 64-bit integer seed for the child stream ``stream`` of ``seed``."""
    ss = np.random.SeedSequence(entropy=int(seed) & _MASK64,
                                spawn_key=tuple(int(s) for s in stream))
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return (int(hi) << 32) | int(lo)


def stream_rng(seed: int, *stream: int) -> np.random.Generator:
    """A PCG64 generator for the child stream ``stream`` of ``seed``."""
    return np.random.default_rng(derive_seed(seed, *stream))
