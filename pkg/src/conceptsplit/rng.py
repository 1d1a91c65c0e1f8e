"""SplitMix64 stream used wherever data must be bit-reproducible.

Algorithm (all arithmetic mod 2**64)::

    state += 0x9E3779B97F4A7C15
    z = state
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    return z ^ (z >> 31)

``below(n)`` maps a draw to ``[0, n)`` with the multiply-high reduction
``(z * n) >> 64``; ``uniform()`` uses the top 53 bits.  Streams for
sub-tasks are derived with :func:`derive`, which hashes ``(seed, index)``
through one SplitMix64 round so different indices never share a stream.
"""
from __future__ import annotations

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * MIX1) & MASK64
    z = ((z ^ (z >> 27)) * MIX2) & MASK64
    return z ^ (z >> 31)


def derive(seed: int, index: int) -> int:
    """Seed of the ``index``-th child stream of ``seed``."""
    return _mix((seed * GOLDEN + index + 1) & MASK64)


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN) & MASK64
        return _mix(self.state)

    def below(self, n: int) -> int:
        if n <= 0:
            raise ValueError(f"below() needs n > 0, got {n}")
        return (self.next_u64() * n) >> 64

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def choice(self, seq):
        return seq[self.below(len(seq))]
