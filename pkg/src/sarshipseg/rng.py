"""Portable counter-based PRNG used by the synthetic scene generator.

Golden datasets must be byte-stable across platforms and library versions,
so sampling never goes through numpy's Generator distributions. Instead we
pin Philox-4x32 with 10 rounds and build the few needed distributions on
top of it.

Pinned constants (32-bit):
    multipliers  M0 = 0xD2511F53, M1 = 0xCD9E8D57
    key schedule W0 = 0x9E3779B9, W1 = 0xBB67AE85

A 64-bit seed forms the key (k0 = low word, k1 = high word). The block
counter starts at zero and increases by one per 4-word output block; each
distribution call consumes whole blocks and discards leftover words, so
the stream depends only on the seed and the sequence of call sizes.

Distribution recipes (documented so streams are reproducible from scratch):
    uniform  u = ((hi32 << 32 | lo32) >> 11) * 2**-53           in [0, 1)
    normal   Box-Muller on pairs (u1, u2), u1 mapped to (0, 1]
    gamma    Marsaglia-Tsang squeeze for shape >= 1;
             shape < 1 via gamma(shape+1) * u**(1/shape)
"""

from __future__ import annotations

import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = 0x9E3779B9
_W1 = 0xBB67AE85
_MASK32 = 0xFFFFFFFF
_ROUNDS = 10


def philox_block(counter: np.ndarray, key0: int, key1: int) -> np.ndarray:
    """Apply Philox-4x32-10 to counter blocks [n, 4] uint32; returns [n, 4]."""
    c0 = counter[:, 0].astype(np.uint64)
    c1 = counter[:, 1].astype(np.uint64)
    c2 = counter[:, 2].astype(np.uint64)
    c3 = counter[:, 3].astype(np.uint64)
    for r in range(_ROUNDS):
        k0 = np.uint64((key0 + r * _W0) & _MASK32)
        k1 = np.uint64((key1 + r * _W1) & _MASK32)
        p0 = _M0 * c0
        p1 = _M1 * c2
        lo0, hi0 = p0 & np.uint64(_MASK32), p0 >> np.uint64(32)
        lo1, hi1 = p1 & np.uint64(_MASK32), p1 >> np.uint64(32)
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    out = np.empty((counter.shape[0], 4), dtype=np.uint32)
    out[:, 0] = c0.astype(np.uint32)
    out[:, 1] = c1.astype(np.uint32)
    out[:, 2] = c2.astype(np.uint32)
    out[:, 3] = c3.astype(np.uint32)
    return out


class PortableRng:
    """Stateful stream over the Philox block function."""

    def __init__(self, seed: int):
        seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.key0 = seed & _MASK32
        self.key1 = (seed >> 32) & _MASK32
        self._block_index = 0

    def _raw32(self, n: int) -> np.ndarray:
        """n uint32 words; consumes ceil(n/4) whole blocks."""
        if n == 0:
            return np.empty(0, dtype=np.uint32)
        n_blocks = (n + 3) // 4
        idx = self._block_index + np.arange(n_blocks, dtype=np.uint64)
        counter = np.zeros((n_blocks, 4), dtype=np.uint32)
        counter[:, 0] = (idx & np.uint64(_MASK32)).astype(np.uint32)
        counter[:, 1] = (idx >> np.uint64(32)).astype(np.uint32)
        self._block_index += n_blocks
        return philox_block(counter, self.key0, self.key1).reshape(-1)[:n]

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        """float64 in [low, high); scalar when size is None."""
        n = 1 if size is None else int(np.prod(size))
        w = self._raw32(2 * n).astype(np.uint64)
        bits = (w[0::2] << np.uint64(32)) | w[1::2]
        u = (bits >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        u = low + (high - low) * u
        if size is None:
            return float(u[0])
        return u.reshape(size)

    def randint(self, low: int, high: int, size=None):
        """Integers in [low, high), via 64-bit modulo (documented bias < 2**-32)."""
        if high <= low:
            raise ValueError(f"empty range [{low}, {high})")
        n = 1 if size is None else int(np.prod(size))
        w = self._raw32(2 * n).astype(np.uint64)
        bits = (w[0::2] << np.uint64(32)) | w[1::2]
        vals = (bits % np.uint64(high - low)).astype(np.int64) + low
        if size is None:
            return int(vals[0])
        return vals.reshape(size)

    def normal(self, size=None):
        """Standard normals via Box-Muller; pairs consumed in order."""
        n = 1 if size is None else int(np.prod(size))
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(m)  # (0, 1] keeps log finite
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * m, dtype=np.float64)
        z[0::2] = r * np.cos(2.0 * np.pi * u2)
        z[1::2] = r * np.sin(2.0 * np.pi * u2)
        z = z[:n]
        if size is None:
            return float(z[0])
        return z.reshape(size)

    def gamma(self, shape: float, size=None):
        """Gamma(shape, scale=1) via the Marsaglia-Tsang squeeze."""
        if shape <= 0:
            raise ValueError(f"shape must be > 0, got {shape}")
        n = 1 if size is None else int(np.prod(size))
        alpha = float(shape)
        boost = None
        if alpha < 1.0:
            boost = self.uniform(n) ** (1.0 / alpha)
            alpha = alpha + 1.0
        d = alpha - 1.0 / 3.0
        c = 1.0 / np.sqrt(9.0 * d)
        out = np.empty(n, dtype=np.float64)
        pending = np.arange(n)
        while pending.size:
            x = self.normal(pending.size)
            u = self.uniform(pending.size)
            v = (1.0 + c * x) ** 3
            ok = v > 0
            logv = np.where(ok, np.log(np.where(ok, v, 1.0)), 0.0)
            accept = ok & (np.log(u) < 0.5 * x * x + d - d * v + d * logv)
            out[pending[accept]] = d * v[accept]
            pending = pending[~accept]
        if boost is not None:
            out = out * boost
        if size is None:
            return float(out[0])
        return out.reshape(size)

    def shuffle(self, items: list) -> list:
        """Fisher-Yates with randint; returns a new list."""
        items = list(items)
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(0, i + 1)
            items[i], items[j] = items[j], items[i]
        return items


def derive_seed(base_seed: int, index: int) -> int:
    """Per-item seed for independent streams (splitmix64 of base + index)."""
    z = (int(base_seed) + 0x9E3779B97F4A7C15 * (index + 1)) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)
