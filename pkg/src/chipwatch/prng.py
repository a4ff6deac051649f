"""Portable, tagged pseudorandom streams for regenerable training runs.

Every stream is Philox4x64-10 keyed by ``(seed, tag_id)`` where ``tag_id`` is
the first 8 bytes (little-endian) of ``SHA-256(tag)``, starting at counter 0.
Only the raw 64-bit outputs of the bit generator are consumed; the mapping to
floats is done here so that it does not depend on numpy's distribution
algorithms (which are allowed to change between releases):

* uniform: ``(x >> 11) * 2**-53``, in ``[0, 1)``
* normal: Box-Muller on consecutive uniform pairs ``(u1, u2)``,
  ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``; one normal per pair.

Anyone re-implementing the generator from this description reproduces the
same initial weights and data batches bit for bit.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def tag_id(tag: str) -> int:
    return int.from_bytes(hashlib.sha256(tag.encode("utf-8")).digest()[:8], "little")


class Stream:
    """A sub-stream derived from ``(seed, tag)``."""

    def __init__(self, seed: int, tag: str):
        self.seed = int(seed) & _MASK64
        self.tag = tag
        key = np.array([self.seed, tag_id(tag)], dtype=np.uint64)
        self._bitgen = np.random.Philox(key=key)

    def raw(self, n: int) -> np.ndarray:
        return self._bitgen.random_raw(n).astype(np.uint64)

    def uniform(self, n: int) -> np.ndarray:
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)

    def normal(self, n: int) -> np.ndarray:
        u = self.uniform(2 * n)
        u1, u2 = u[0::2], u[1::2]
        return np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)
