"""Deterministic, splittable random streams.

Every consumer derives its generator from ``(seed, *keys)`` so that a task's
draws depend only on its index, never on which worker runs it or in what
order.
"""
import numpy as np


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based Philox generator for the substream ``keys`` of ``seed``."""
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(seq))


def torch_seed(seed: int, *keys: int) -> int:
    """A 63-bit integer seed for torch derived from the same key space."""
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
