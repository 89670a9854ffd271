"""Portable counter-based PRNG used for every random draw in the project.

Checkpoint determinism and cross-run reproducibility hinge on all randomness
coming from one stated generator rather than platform RNGs.  The generator is
SplitMix64 used in counter mode: output i of a stream is ``mix64(seed + (i+1)
* GAMMA)``, which vectorizes cleanly over numpy uint64 and produces identical
bits on every platform.

Streams are derived from a master seed by hashing a text label (FNV-1a 64)
into the seed, so independent purposes (data generation, parameter init,
fusion sampling, ...) never share a sequence.
"""

from __future__ import annotations

import numpy as np

# SplitMix64 constants (Steele, Lea, Flood 2014).
GAMMA = np.uint64(0x9E3779B97F4A7C15)
MIX_A = np.uint64(0xBF58476D1CE4E5B9)
MIX_B = np.uint64(0x94D049BB133111EB)

# FNV-1a 64-bit constants, used only for label hashing.
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3

_U64 = np.uint64
_MASK64 = (1 << 64) - 1


def fnv1a64(text: str) -> int:
    """Hash a stream label to 64 bits."""
    h = FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> _U64(30))) * MIX_A
    z = (z ^ (z >> _U64(27))) * MIX_B
    return z ^ (z >> _U64(31))


def stream_seed(master_seed: int, label: str) -> int:
    """Derive the base state of a named stream from the master seed."""
    z = np.array([(master_seed ^ fnv1a64(label)) & _MASK64], dtype=np.uint64)
    with np.errstate(over="ignore"):
        return int(_mix64(z + GAMMA)[0])


class Rng:
    """Stateful view over one SplitMix64 stream.

    Every method consumes a deterministic number of raw 64-bit outputs, so
    draw sequences are stable regardless of how draws are batched.
    """

    def __init__(self, master_seed: int, label: str):
        self._base = _U64(stream_seed(master_seed, label))
        self._counter = 0
        self.label = label

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            return _mix64(self._base + idx * GAMMA)

    def uniform(self, shape=()) -> np.ndarray:
        """Uniform float64 in [0, 1) with 53 random mantissa bits."""
        n = int(np.prod(shape)) if shape else 1
        bits = self._raw(n) >> _U64(11)
        vals = bits.astype(np.float64) * (2.0 ** -53)
        return vals.reshape(shape) if shape else float(vals[0])

    def normal(self, shape=(), std: float = 1.0) -> np.ndarray:
        """Standard normal via Box-Muller on uniform pairs."""
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        u1 = 1.0 - np.asarray(self._raw(m) >> _U64(11), dtype=np.float64) * (2.0 ** -53)
        u2 = np.asarray(self._raw(m) >> _U64(11), dtype=np.float64) * (2.0 ** -53)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n] * std
        return z.reshape(shape) if shape else float(z[0])

    def integers(self, high: int, shape=()) -> np.ndarray:
        """Integers in [0, high). Uses floor(u * high); the modulo-style bias
        is below 2^-50 for desk-scale high and irrelevant here."""
        u = self.uniform(shape if shape else (1,))
        vals = np.minimum((u * high).astype(np.int64), high - 1)
        return vals.reshape(shape) if shape else int(vals[0])

    def choice_distinct(self, high: int, k: int) -> np.ndarray:
        """k distinct integers from [0, high), in draw order."""
        if k > high:
            raise ValueError(f"cannot draw {k} distinct values from range {high}")
        picked: list[int] = []
        seen = set()
        while len(picked) < k:
            v = self.integers(high)
            if v not in seen:
                seen.add(v)
                picked.append(v)
        return np.array(picked, dtype=np.int64)

    def simplex3(self) -> np.ndarray:
        """Three iid uniforms normalized onto the probability simplex."""
        u = self.uniform((3,))
        # Guard against the (measure-zero but representable) all-zero draw.
        while u.sum() == 0.0:
            u = self.uniform((3,))
        return u / u.sum()
