"""Counter-based deterministic random streams.

Every random draw in this package is a pure function of (seed, tag, index),
built on the splitmix64 finalizer. That makes datasets, training runs, and
sampling bit-reproducible across processes and platforms without carrying
mutable generator state: resuming a run only needs the integers that key the
streams, never a serialized RNG.

Stream layout: a Stream is splitmix64 with its state pinned to a key derived
from (seed, tag); draw i returns mix64(key + (i+1)*GOLDEN), which is exactly
the reference splitmix64 output sequence for that key.
"""

from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    """splitmix64 finalizer on a 64-bit integer."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    # uint64 lane-wise finalizer; overflow wraps by design
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
        return z ^ (z >> np.uint64(31))


def splitmix64(seed: int, n: int) -> list[int]:
    """First n outputs of reference splitmix64 seeded with `seed`."""
    return [mix64(seed + (i + 1) * GOLDEN) for i in range(n)]


def _tag_hash(tag: str) -> int:
    # sha256 keeps tags collision-safe and stable across platforms
    return int.from_bytes(hashlib.sha256(tag.encode("utf-8")).digest()[:8], "little")


class Stream:
    """Sequential view over the counter-based generator for one (seed, tag)."""

    def __init__(self, seed: int, tag: str):
        self.seed = int(seed)
        self.tag = tag
        self.key = mix64(mix64(self.seed + GOLDEN) ^ _tag_hash(tag))
        self.counter = 0

    def derive(self, subtag: str) -> "Stream":
        """Independent child stream; does not consume this stream's counter."""
        return Stream(self.key, f"{self.tag}/{subtag}")

    # ---- raw draws ----

    def _next_u64_block(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            state = np.uint64(self.key) + idx * np.uint64(GOLDEN)
        return _mix64_array(state)

    def u64(self, n: int | None = None):
        """Next raw 64-bit value(s)."""
        block = self._next_u64_block(1 if n is None else n)
        return int(block[0]) if n is None else block

    # ---- distributions ----

    def u01(self, n: int | None = None):
        """Uniform draw(s) in (0, 1] with 53-bit resolution."""
        block = self._next_u64_block(1 if n is None else n)
        vals = ((block >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        return float(vals[0]) if n is None else vals

    def normal(self, shape=None) -> np.ndarray | float:
        """Standard normal draw(s) via Box-Muller (cosine branch)."""
        if shape is None:
            count, out_shape = 1, None
        elif isinstance(shape, int):
            count, out_shape = shape, (shape,)
        else:
            out_shape = tuple(shape)
            count = int(np.prod(out_shape)) if out_shape else 1
        u = self.u01(2 * count)
        r = np.sqrt(-2.0 * np.log(u[0::2]))
        z = r * np.cos(2.0 * np.pi * u[1::2])
        if shape is None:
            return float(z[0])
        return z.reshape(out_shape)

    def below(self, n: int) -> int:
        """Uniform integer in [0, n) by 64-bit rejection (unbiased)."""
        if n <= 0:
            raise ValueError(f"below() needs n >= 1, got {n}")
        limit = MASK64 - (MASK64 % n) - 1  # accept values <= limit
        while True:
            v = self.u64()
            if v <= limit:
                return v % n

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi] inclusive."""
        return lo + self.below(hi - lo + 1)

    def choice(self, seq):
        """Uniform choice from a non-empty sequence."""
        return seq[self.below(len(seq))]

    def shuffle(self, seq: list) -> list:
        """Return a new Fisher-Yates shuffle of seq; input unchanged."""
        out = list(seq)
        for i in range(len(out) - 1, 0, -1):
            j = self.below(i + 1)
            out[i], out[j] = out[j], out[i]
        return out
