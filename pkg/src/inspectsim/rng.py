"""Named, independent random streams derived from one root seed.

Each stream is a Philox (counter-based) generator keyed by the root seed and
a stable hash of its name, so a stream's draws never depend on how many
numbers other streams consumed.  Draws are buffered in blocks because scalar
calls into numpy dominate the simulator's cost otherwise.
"""

from __future__ import annotations

import hashlib
from bisect import bisect_right

import numpy as np

BLOCK = 1024


def _name_key(name: str) -> tuple[int, ...]:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return tuple(int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4))


def derive_seed(root: int, *keys: int) -> int:
    """Deterministic 64-bit child seed of ``root`` for integer ``keys``."""
    ss = np.random.SeedSequence(entropy=int(root) & (2**64 - 1), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def generator(root: int, name: str) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(root) & (2**64 - 1), spawn_key=_name_key(name))
    return np.random.Generator(np.random.Philox(ss))


class Stream:
    """Buffered uniform and exponential draws from one named stream."""

    __slots__ = ("_gen", "_u", "_ui", "_e", "_ei")

    def __init__(self, root: int, name: str):
        self._gen = generator(root, name)
        self._u = []
        self._ui = 0
        self._e = []
        self._ei = 0

    def uniform(self) -> float:
        if self._ui >= len(self._u):
            self._u = self._gen.random(BLOCK).tolist()
            self._ui = 0
        u = self._u[self._ui]
        self._ui += 1
        return u

    def exponential(self, mean: float) -> float:
        if self._ei >= len(self._e):
            self._e = self._gen.standard_exponential(BLOCK).tolist()
            self._ei = 0
        e = self._e[self._ei]
        self._ei += 1
        return e * mean

    def categorical(self, cdf: list[float]) -> int:
        """Inverse-CDF draw; ``cdf`` is cumulative with last entry 1."""
        i = bisect_right(cdf, self.uniform())
        return min(i, len(cdf) - 1)

    def integers(self, n: int) -> int:
        return min(int(self.uniform() * n), n - 1)


class Streams:
    """Lazily created named streams sharing a root seed."""

    def __init__(self, root: int):
        self.root = int(root)
        self._streams: dict[str, Stream] = {}

    def __getitem__(self, name: str) -> Stream:
        s = self._streams.get(name)
        if s is None:
            s = self._streams[name] = Stream(self.root, name)
        return s
