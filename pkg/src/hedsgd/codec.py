"""Fixed-point bridge between real vectors and packed Z_t plaintexts.

One real per coefficient.  Only additions and plaintext-scalar products act on
the packed vectors, so coefficient slots already behave element-wise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bfv import Plaintext


class EncodingOverflow(ValueError):
    pass


@dataclass(frozen=True)
class FixedPointConfig:
    t: int
    slot_count: int
    frac_bits: int = 13
    weight_bits: int = 16

    def __post_init__(self):
        if self.frac_bits < 13:
            raise ValueError(f"frac_bits={self.frac_bits}; at least 13 fractional bits are required")
        if self.weight_bits < 0:
            raise ValueError("weight_bits must be nonnegative")
        if self.slot_count < 1:
            raise ValueError("slot_count must be positive")
        if self.t <= 1 << (self.frac_bits + 1):
            raise ValueError(f"t={self.t} cannot hold values at scale 2^{self.frac_bits}")

    @property
    def max_abs_value(self) -> float:
        """Magnitude bound (exclusive) that survives one weighted average without wrapping mod t.

        Encoded magnitudes stay at most floor(t / 2^(ws+1)) - 1, so the accumulated
        value is at most t/2 - 2^ws: strictly inside the centered range.
        """
        return ((self.t >> (self.weight_bits + 1)) - 1) / 2**self.frac_bits

    @property
    def encode_limit(self) -> float:
        return self.t / 2 ** (self.frac_bits + 1)


@dataclass(frozen=True)
class EncodedChunk:
    plaintexts: tuple
    length: int
    scale_exponent: int


def encode(values, cfg: FixedPointConfig) -> EncodedChunk:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size and not np.all(np.isfinite(v)):
        raise EncodingOverflow("cannot encode non-finite values")
    if v.size and np.abs(v).max() >= cfg.encode_limit:
        raise EncodingOverflow(
            f"|value| {np.abs(v).max():.6g} >= t/2^(d+1) = {cfg.encode_limit:.6g}"
        )
    ints = np.rint(v * 2.0**cfg.frac_bits).astype(np.int64) % cfg.t
    n = cfg.slot_count
    count = max(1, math.ceil(v.size / n))
    padded = np.zeros(count * n, dtype=np.int64)
    padded[: v.size] = ints
    pts = tuple(Plaintext(padded[i * n : (i + 1) * n], cfg.t) for i in range(count))
    return EncodedChunk(pts, v.size, cfg.frac_bits)


def decode(chunk: EncodedChunk, cfg: FixedPointConfig) -> np.ndarray:
    if not chunk.plaintexts:
        return np.zeros(0)
    coeffs = np.concatenate([pt.coeffs for pt in chunk.plaintexts])[: chunk.length]
    t = cfg.t
    centered = np.where(coeffs > t // 2, coeffs - t, coeffs)
    return centered.astype(np.float64) / 2.0**chunk.scale_exponent


def quantize_weights(row, weight_bits: int, self_index: int = 0) -> np.ndarray:
    """Integer weights summing to exactly 2^weight_bits.

    Every weight is rounded; the entry at ``self_index`` then absorbs the
    rounding residue.
    """
    w = np.asarray(row, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("weight row must be a nonempty vector")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    if abs(w.sum() - 1.0) > 1e-12:
        raise ValueError(f"weights sum to {w.sum()!r}, not 1")
    total = 1 << weight_bits
    q = np.rint(w * total).astype(np.int64)
    q[self_index] = total - (q.sum() - q[self_index])
    if q[self_index] < 0:
        raise ValueError("degenerate weight row: adjusted self-weight is negative")
    return q
