"""Deterministic random streams.

Every source of randomness in the package flows through `Rng`, a thin wrapper
around numpy's counter-based Philox generator. Philox is keyed by
(seed, spawn path), so the same seed reproduces the same stream on every
platform, and independent sub-streams can be derived without consuming state
from the parent.
"""

from __future__ import annotations

import numpy as np

ALGORITHM = "philox4x64-10"


class Rng:
    """Seeded counter-based generator with derivable child streams."""

    algorithm = ALGORITHM

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._path = _path
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=_path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def spawn(self, index: int) -> "Rng":
        """Independent child stream; deterministic in (seed, index)."""
        return Rng(self.seed, self._path + (int(index),))

    def uniform(self, low: float, high: float, shape=None) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def normal(self, shape=None, std: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, std, size=shape)

    def random(self, shape=None) -> np.ndarray:
        return self._gen.random(size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self._path}, algorithm={self.algorithm})"
