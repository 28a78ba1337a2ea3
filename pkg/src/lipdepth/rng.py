"""Seeded random streams. Every stochastic code path takes an explicit ``Rng``."""

from __future__ import annotations

import numpy as np


class Rng:
    """Thin wrapper around a PCG64 generator with the samplers the toolkit needs."""

    def __init__(self, seed: int | np.random.SeedSequence):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
        else:
            self._seq = np.random.SeedSequence(int(seed))
        self._gen = np.random.Generator(np.random.PCG64(self._seq))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def gaussian(self, shape, mean=0.0, std=1.0, dtype=np.float64) -> np.ndarray:
        return (mean + std * self._gen.standard_normal(shape)).astype(dtype, copy=False)

    def uniform(self, shape, low=0.0, high=1.0, dtype=np.float64) -> np.ndarray:
        return self._gen.uniform(low, high, shape).astype(dtype, copy=False)

    def bernoulli(self, p, shape=None) -> np.ndarray:
        """0/1 draws with success probability ``p`` (scalar or broadcastable array)."""
        p = np.asarray(p, dtype=np.float64)
        if np.any(p < 0) or np.any(p > 1):
            raise ValueError("bernoulli probability outside [0, 1]")
        if shape is None:
            shape = p.shape
        # u in [0, 1): p=0 never fires, p=1 always fires
        return (self._gen.random(shape) < p).astype(np.int8)

    def truncated_normal(self, shape, std=0.02, dtype=np.float64) -> np.ndarray:
        """Normal(0, std) resampled until every value lies within two std."""
        out = self._gen.standard_normal(shape)
        bad = np.abs(out) > 2.0
        while bad.any():
            out[bad] = self._gen.standard_normal(int(bad.sum()))
            bad = np.abs(out) > 2.0
        return (out * std).astype(dtype, copy=False)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def spawn(self, n: int) -> list[Rng]:
        """Independent child streams, e.g. one per Monte-Carlo worker."""
        return [Rng(s) for s in self._seq.spawn(n)]


def seed_rng(seed: int) -> Rng:
    return Rng(seed)
