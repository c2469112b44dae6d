"""Deterministic random streams.

A stream is identified by its seed; a given (seed, call sequence) produces
identical values on every run and platform. Independent sub-streams are
derived by hashing the parent seed with a label, so the values drawn for one
component never depend on the order other components are initialized in.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_seed(seed: int, label: str) -> int:
    """Hash (seed, label) into a new 64-bit seed."""
    digest = hashlib.sha256(f"{seed & _MASK64}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class RngStream:
    """A seeded PCG64 generator that counts its draws."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.counter = 0
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, label: str) -> "RngStream":
        """Derive an independent stream for a named component."""
        return RngStream(derive_seed(self.seed, label))

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        self.counter += 1
        return self._gen.normal(0.0, scale, size=shape).astype(np.float64)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        self.counter += 1
        return self._gen.uniform(low, high, size=shape).astype(np.float64)

    def integers(self, low: int, high: int, size=None):
        self.counter += 1
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        self.counter += 1
        return self._gen.permutation(n)
