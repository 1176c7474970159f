"""Deterministic SplitMix64 random streams.

Dataset generation, weight init, training shuffles and impression
transforms all draw from these streams, so every artifact is
bit-reproducible for a given seed regardless of platform or numpy
version. The generator is counter-based: output i is a pure function
of (state, i), which lets us vectorize bulk draws with uint64 numpy
arithmetic.
"""

import numpy as np

_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_MASK = (1 << 64) - 1


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


def derive(seed: int, *keys: int) -> int:
    """Fold integer keys into a seed, giving independent named substreams."""
    s = seed & _MASK
    for k in keys:
        s = _mix((s + (k + 1) * _GAMMA) & _MASK)
    return s


class SplitMix64:
    """SplitMix64 stream with scalar and vectorized draws."""

    def __init__(self, seed: int):
        self._state = seed & _MASK

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK
        return _mix(self._state)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return lo + (hi - lo) * ((self.next_u64() >> 11) * 2.0**-53)

    def randint(self, n: int) -> int:
        """Uniform int in [0, n). Modulo bias is negligible at desk-scale n."""
        if n <= 0:
            raise ValueError("randint needs n >= 1")
        return self.next_u64() % n

    def choice(self, seq):
        return seq[self.randint(len(seq))]

    def shuffle(self, seq) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(seq) - 1, 0, -1):
            j = self.randint(i + 1)
            seq[i], seq[j] = seq[j], seq[i]

    def permutation(self, n: int) -> np.ndarray:
        idx = list(range(n))
        self.shuffle(idx)
        return np.asarray(idx, dtype=np.int64)

    def uniform_array(self, shape, lo: float = 0.0, hi: float = 1.0,
                      dtype=np.float32) -> np.ndarray:
        """Vectorized uniform draws; advances the stream by prod(shape)."""
        n = int(np.prod(shape)) if shape else 1
        with np.errstate(over="ignore"):
            ctr = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(_GAMMA)
            z = np.uint64(self._state) + ctr
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
            z = z ^ (z >> np.uint64(31))
        self._state = (self._state + n * _GAMMA) & _MASK
        u = (z >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return (lo + (hi - lo) * u).astype(dtype).reshape(shape)

    def spawn(self, key: int) -> "SplitMix64":
        """Independent child stream; does not advance this stream."""
        return SplitMix64(derive(self._state, key))
