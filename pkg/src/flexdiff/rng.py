"""Counter-based random streams keyed by ``(seed, *stream_ids)``.

Two streams with different keys are independent, and a stream's output never
depends on how many other streams were drawn from before it.
"""
import numpy as np


def stream(seed, *keys):
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def as_generator(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None:
        return np.random.default_rng()
    return stream(rng)


def child_seed(rng):
    """Draw a fresh integer seed from ``rng`` for keying sub-streams."""
    return int(as_generator(rng).integers(0, 2**63 - 1))
