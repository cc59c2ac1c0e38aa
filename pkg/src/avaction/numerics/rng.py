from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class RngState:
    """Counter-based random stream.

    Each draw uses a generator keyed on ``(seed, position)`` and then advances
    ``position`` by one, so any state can be saved and replayed exactly.
    """

    seed: int
    position: int = 0

    def _gen(self) -> np.random.Generator:
        g = np.random.default_rng([self.seed & 0xFFFFFFFFFFFFFFFF, self.position])
        self.position += 1
        return g

    def uniform(self, shape) -> np.ndarray:
        """Uniform draws strictly inside (0, 1)."""
        u = self._gen().random(shape)
        return np.clip(u, np.finfo(np.float64).tiny, 1.0 - np.finfo(np.float64).epsneg)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self._gen().normal(0.0, scale, shape)

    def integers(self, low: int, high: int, size=None):
        return self._gen().integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen().permutation(n)

    def generator(self) -> np.random.Generator:
        """A one-off numpy generator for bulk draws; advances the stream once."""
        return self._gen()

    def to_dict(self) -> dict:
        return {"seed": self.seed, "position": self.position}

    @classmethod
    def from_dict(cls, d: dict) -> "RngState":
        return cls(int(d["seed"]), int(d["position"]))
