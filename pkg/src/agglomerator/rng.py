"""Seeded random streams, one per purpose, so runs replay bit-identically.

Every stochastic component (parameter init, dropout, augmentation, shuffling)
draws from its own named stream derived from the master seed. Streams are
backed by numpy's Philox counter-based generator keyed on
(seed, stream id, *extra keys), so consuming one stream never perturbs
another, and per-batch substreams can be derived from (epoch, batch) without
tracking generator state across the run.
"""

from __future__ import annotations

import numpy as np

# Stable stream ids. Appending is fine, reordering is not: ids are part of
# the reproducibility contract.
_STREAM_IDS = {
    "init": 1,
    "dropout": 2,
    "augment": 3,
    "shuffle": 4,
    "state": 5,
}


class RngStreams:
    """Splittable deterministic RNG: same seed, same stream key, same bits."""

    def __init__(self, seed: int):
        if not (0 <= int(seed) < 2**64):
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed!r}")
        self.seed = int(seed)

    def derive(self, stream: str, *keys: int) -> np.random.Generator:
        """Return a fresh generator for `stream`, optionally sub-keyed.

        Calling twice with the same arguments yields generators that produce
        identical sample sequences.
        """
        if stream not in _STREAM_IDS:
            raise KeyError(f"unknown rng stream {stream!r}; known: {sorted(_STREAM_IDS)}")
        entropy = [self.seed, _STREAM_IDS[stream], *[int(k) for k in keys]]
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def __repr__(self):
        return f"RngStreams(seed={self.seed})"
