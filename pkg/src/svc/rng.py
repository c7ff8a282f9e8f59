"""Counter-based splitmix64 generator.

Output ``i`` of a stream depends only on (state, i), so a chunked consumer can
draw the noise for samples [a, b) without generating [0, a) first.
"""

from __future__ import annotations

import numpy as np

GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def splitmix_at(state: int, positions: np.ndarray) -> np.ndarray:
    """Raw u64 outputs at the given 0-based counter positions."""
    pos = np.asarray(positions, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(state & _MASK) + (pos + np.uint64(1)) * GAMMA
    return _mix(z)


def to_unit(u: np.ndarray) -> np.ndarray:
    # top 53 bits -> [0, 1)
    return (u >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


class SplitMix64:
    def __init__(self, seed: int):
        self.state = int(seed) & _MASK

    def _take(self, n: int) -> np.ndarray:
        out = splitmix_at(self.state, np.arange(n, dtype=np.uint64))
        self.state = (self.state + n * int(GAMMA)) & _MASK
        return out

    def next_u64(self) -> int:
        return int(self._take(1)[0])

    def uniform(self, size) -> np.ndarray:
        n = int(np.prod(size))
        return to_unit(self._take(n)).reshape(size)

    def normal(self, size) -> np.ndarray:
        n = int(np.prod(size))
        u = self.uniform((2, (n + 1) // 2))
        r = np.sqrt(-2.0 * np.log1p(-u[0]))
        z = np.concatenate([r * np.cos(2 * np.pi * u[1]), r * np.sin(2 * np.pi * u[1])])
        return z[:n].reshape(size)

    def integers(self, high: int, size=None):
        """Uniform ints in [0, high)."""
        if size is None:
            return int(self.uniform(1)[0] * high)
        return (self.uniform(size) * high).astype(np.int64)

    def fork(self) -> "SplitMix64":
        return SplitMix64(self.next_u64())


def noise_at(seed: int, start: int, length: int) -> np.ndarray:
    """U(0,1) noise for absolute sample positions [start, start+length)."""
    return to_unit(splitmix_at(seed, np.arange(start, start + length, dtype=np.uint64)))
