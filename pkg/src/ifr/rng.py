"""Counter-based deterministic random number generation.

Every random draw in this package (dataset synthesis, parameter
initialization, solver probes) comes from a SplitMix64 stream so that a
(seed, counter) pair fully determines every value, independent of platform
and of how many draws other components have made.

Constants are the standard SplitMix64 ones (Steele, Lea & Flood 2014):
increment 0x9E3779B97F4A7C15, mix multipliers 0xBF58476D1CE4E5B9 and
0x94D049BB133111EB.
"""

from __future__ import annotations

import math

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_SPLIT_SALT = np.uint64(0x5851F42D4C957F2D)

_INV_2_53 = float(2.0**-53)


def _mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer over uint64 arrays (wraps modulo 2^64)."""
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def raw_stream(seed: int, start: int, count: int) -> np.ndarray:
    """uint64 outputs number start..start+count-1 of the stream keyed by seed."""
    key = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    counters = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return _mix64(key + counters * _GOLDEN)


class CounterRng:
    """A stateful cursor over one SplitMix64 stream.

    The cursor only ever moves forward; `split` derives an independent
    stream whose key mixes the parent key with a tag, so substreams never
    collide regardless of draw order.
    """

    def __init__(self, seed: int):
        self._seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._cursor = 0

    def split(self, tag: int) -> "CounterRng":
        key = _mix64(np.uint64(self._seed) ^ _mix64(np.uint64(tag) ^ _SPLIT_SALT))
        return CounterRng(int(key))

    def _raw(self, count: int) -> np.ndarray:
        out = raw_stream(self._seed, self._cursor, count)
        self._cursor += count
        return out

    def uniform(self, shape=()) -> np.ndarray:
        """Uniforms in [0, 1), float64."""
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        vals = (self._raw(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        return vals.reshape(shape) if shape else float(vals[0])

    def normal(self, shape=()) -> np.ndarray:
        """Standard normals via Box-Muller on stream pairs."""
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        pairs = (n + 1) // 2
        raw = self._raw(2 * pairs)
        # u1 in (0, 1] so log() is finite
        u1 = ((raw[:pairs] >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53
        u2 = (raw[pairs:] >> np.uint64(11)).astype(np.float64) * _INV_2_53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * math.pi) * u2
        vals = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return vals.reshape(shape) if shape else float(vals[0])

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Integers in [low, high). Modulo reduction; span must be < 2^32."""
        span = int(high) - int(low)
        if span <= 0:
            raise ValueError(f"empty integer range [{low}, {high})")
        if span >= 1 << 32:
            raise ValueError("integer span too large for modulo draw")
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        vals = low + (self._raw(n) % np.uint64(span)).astype(np.int64)
        return vals.reshape(shape) if shape else int(vals[0])
