"""Deterministic, splittable random streams.

Every stochastic component in the toolkit draws from a ``SeededRng``. Streams
are keyed by ``(seed, stream_id)`` on a counter-based generator (Philox), so a
replicate's draws depend only on its key, never on scheduling order. That is
what makes parallel Monte Carlo runs bit-reproducible across worker counts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1
# splitmix64 constants, used to disperse child indices into fresh stream ids
_GOLDEN = 0x9E3779B97F4A7C15


def _mix64(z: int) -> int:
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


@dataclass(frozen=True)
class SeededRng:
    """A reproducible random stream identified by (seed, stream_id)."""

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        """Fresh generator for this stream; equal keys give equal sequences."""
        key = np.array([self.seed & _MASK64, self.stream_id & _MASK64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def stream(self, *indices: int) -> "SeededRng":
        """Derive an independent child stream from one or more indices."""
        sid = self.stream_id & _MASK64
        for ix in indices:
            sid = _mix64(sid ^ _mix64((int(ix) + _GOLDEN) & _MASK64))
        return SeededRng(self.seed, sid)
