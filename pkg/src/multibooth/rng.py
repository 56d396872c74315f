"""Named, splittable random streams on top of a counter-based generator.

Every stochastic draw in the pipeline goes through an `Rng`. Streams are
addressed by a path of names derived from a root seed, so two components
can draw independently without coordinating, and the same (seed, path)
always yields the same values.
"""

from __future__ import annotations

import hashlib

import numpy as np


class Rng:
    """One random stream, identified by (seed, path).

    `child(name)` derives an independent stream; drawing from a parent
    never affects its children. Backed by Philox, so the stream is
    counter-based and reproducible across runs.
    """

    def __init__(self, seed: int, _path: tuple[str, ...] = ()):
        self.seed = int(seed)
        self.path = _path
        digest = hashlib.sha256(repr((self.seed,) + self.path).encode()).digest()
        key = int.from_bytes(digest[:16], "little")
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, name: str) -> "Rng":
        return Rng(self.seed, self.path + (str(name),))

    def normal(self, shape, dtype=np.float32) -> np.ndarray:
        return self._gen.standard_normal(shape).astype(dtype)

    def uniform(self, low: float, high: float, shape=None, dtype=np.float32):
        out = self._gen.uniform(low, high, size=shape)
        if shape is None:
            return float(out)
        return out.astype(dtype)

    def integer(self, low: int, high: int) -> int:
        """One integer in [low, high)."""
        return int(self._gen.integers(low, high))

    def choice(self, items):
        return items[self.integer(0, len(items))]

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={'/'.join(self.path) or '.'})"
