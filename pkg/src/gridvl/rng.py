"""Deterministic random streams.

Streams are numpy PCG64 generators keyed by an explicit 64-bit seed; the
same seed yields the same sequence on every platform and run. Child
streams are derived from the parent seed plus string/int tags hashed with
BLAKE2, so a stream's identity depends only on its path, never on call
order elsewhere in the program.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag)
    digest = hashlib.blake2b(str(tag).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


_MASK64 = (1 << 64) - 1


class Rng:
    """A seeded PCG64 stream with path-derived children."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed))
        )

    def child(self, *tags) -> "Rng":
        """Derive an independent stream identified by (seed, *tags)."""
        mixed = hashlib.blake2b(digest_size=8)
        mixed.update(self.seed.to_bytes(8, "little"))
        for tag in tags:
            mixed.update((_tag_to_int(tag) & _MASK64).to_bytes(8, "little"))
        return Rng(int.from_bytes(mixed.digest(), "little"))

    def normal(self, shape=(), std: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(size=shape) * std

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def random(self) -> float:
        return float(self._gen.random())

    def integers(self, low: int, high: int, shape=None):
        out = self._gen.integers(low, high, size=shape)
        return int(out) if shape is None else out

    def choice(self, options, size=None, replace: bool = True):
        return self._gen.choice(options, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def shuffle(self, items: list) -> None:
        self._gen.shuffle(items)
