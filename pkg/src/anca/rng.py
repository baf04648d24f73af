"""Counter-based, splittable random streams.

Every draw comes from a Philox generator keyed by a hash of
``(seed, *stream)``, so a stream id like ``("delta", epoch, batch, sample,
step)`` yields the same numbers no matter how work is ordered or threaded.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np


class Rng:
    __slots__ = ("seed", "stream")

    def __init__(self, seed: int, stream: tuple = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must fit in 64 bits, got {seed}")
        self.seed = int(seed)
        self.stream = tuple(stream)

    def derive(self, *tags) -> Rng:
        """Child stream; tags must be str/int/float/bool."""
        return Rng(self.seed, self.stream + tags)

    def key(self) -> int:
        payload = json.dumps([self.seed, *self.stream], separators=(",", ":")).encode()
        return int.from_bytes(hashlib.blake2b(payload, digest_size=16).digest(), "little")

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=self.key()))

    def uniform(self, shape, low=0.0, high=1.0, dtype=np.float32) -> np.ndarray:
        return self.generator().uniform(low, high, size=shape).astype(dtype)

    def normal(self, shape, scale=1.0, dtype=np.float32) -> np.ndarray:
        return (self.generator().standard_normal(size=shape) * scale).astype(dtype)

    def permutation(self, n_or_array):
        return self.generator().permutation(n_or_array)

    def integers(self, low, high=None, size=None):
        return self.generator().integers(low, high, size=size)

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream={self.stream!r})"


def bernoulli_mask(rng: Rng, shape, rate: float, dtype=np.float32) -> np.ndarray:
    """iid {0, 1} draws with P(1) = rate. Never differentiated."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must be in [0, 1], got {rate}")
    return (rng.generator().random(size=shape) < rate).astype(dtype)
