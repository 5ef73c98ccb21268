"""Seedable, counter-based random streams.

Every consumer of randomness asks for a stream keyed by ``(seed, purpose,
*key)``.  Streams are Philox generators seeded through ``SeedSequence``
spawn keys, so two streams with different keys never overlap and results do
not depend on the order in which streams are created.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass

import numpy as np

PURPOSES = {
    "draft": 0,
    "group": 1,
    "accept": 2,
    "residual": 3,
    "bonus": 4,
    "target": 5,
    "projection": 6,
    "instance": 7,
    "model": 8,
}

_BLOCK = 4096


class Stream:
    """Buffered scalar draws from a numpy ``Generator``.

    Scalar ``Generator.random()`` calls are slow, so uniforms are drawn in
    blocks and handed out one at a time.
    """

    def __init__(self, generator: np.random.Generator, block: int = _BLOCK):
        self.generator = generator
        self._block = block
        self._buf: list[float] = []
        self._pos = 0

    def random(self) -> float:
        """One uniform draw on [0, 1)."""
        pos = self._pos
        if pos == len(self._buf):
            self._buf = self.generator.random(self._block).tolist()
            pos = 0
        self._pos = pos + 1
        return self._buf[pos]

    def below(self, k: int) -> int:
        """Uniform integer in ``range(k)``."""
        if k == 1:
            return 0
        i = int(self.random() * k)
        return i if i < k else k - 1

    def categorical(self, cdf: list[float]) -> int:
        """Index drawn from the distribution with cumulative sums ``cdf``.

        Zero-probability entries are never returned, and a final cumulative
        sum slightly below one is handled by re-scaling the uniform.
        """
        u = self.random() * cdf[-1]
        i = bisect_right(cdf, u)
        return i if i < len(cdf) else len(cdf) - 1


def make_stream(seed: int, purpose: str, *key: int) -> Stream:
    """Stream for ``purpose`` under ``seed``; ``key`` adds further sub-keys."""
    if purpose not in PURPOSES:
        raise KeyError(f"unknown stream purpose {purpose!r}")
    ss = np.random.SeedSequence(int(seed), spawn_key=(PURPOSES[purpose], *map(int, key)))
    return Stream(np.random.Generator(np.random.Philox(ss)))


@dataclass
class DecodeStreams:
    """The disjoint streams one decoded sequence consumes."""

    draft: Stream
    group: Stream
    accept: Stream
    residual: Stream
    bonus: Stream
    target: Stream

    @classmethod
    def for_sequence(cls, seed: int, sequence: int = 0) -> "DecodeStreams":
        return cls(**{
            name: make_stream(seed, name, sequence)
            for name in ("draft", "group", "accept", "residual", "bonus", "target")
        })
