"""Exact arithmetic in Z_q[X]/(X^n + 1) and the coefficient samplers BFV needs.

Coefficients are stored as int64 numpy arrays in [0, q).  Since q <= 2^62,
sums of two reduced coefficients never overflow int64; anything wider
(scalar products, convolutions) goes through Python ints or the CRT-based
NTT below.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

MAX_MODULUS = 1 << 62

# Primes p = k * 2^17 + 1 below 2^30: every p admits a primitive 2n-th root of
# unity for n <= 2^16, and products of two residues fit in int64.
NTT_PRIMES = (
    1073479681,
    1071513601,
    1070727169,
    1068236801,
    1065484289,
    1064697857,
)
_MAX_NTT_DEGREE = 1 << 16


@dataclass(frozen=True)
class RingParams:
    n: int
    q: int
    t: int
    delta: int = field(init=False)

    def __post_init__(self):
        if self.n < 2 or self.n & (self.n - 1):
            raise ValueError(f"ring degree n={self.n} is not a power of two >= 2")
        if not 1 < self.q <= MAX_MODULUS:
            raise ValueError(f"ciphertext modulus q={self.q} outside (1, 2^62]")
        if not 1 < self.t < self.q:
            raise ValueError(f"plaintext modulus t={self.t} must satisfy 1 < t < q")
        object.__setattr__(self, "delta", self.q // self.t)

    @property
    def noise_threshold(self) -> float:
        """Decryption is correct while the noise magnitude stays below q/(2t)."""
        return self.q / (2 * self.t)


@dataclass(frozen=True)
class NoiseParams:
    sigma: float = 3.2
    bound: int = 19

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        # floor, not ceil: the conventional (3.2, 19) pair sits just under 6 sigma
        if self.bound < math.floor(6 * self.sigma):
            raise ValueError(
                f"truncation bound {self.bound} below floor(6*sigma)={math.floor(6 * self.sigma)}"
            )


DEFAULT_NOISE = NoiseParams()


class ParameterMismatch(ValueError):
    pass


class Poly:
    """An element of R_q.  Immutable; the coefficient array is read-only."""

    __slots__ = ("coeffs", "params", "_ntt", "_norm")

    def __init__(self, coeffs, params: RingParams):
        arr = np.array(coeffs, dtype=np.int64)
        if arr.shape != (params.n,):
            raise ValueError(f"expected {params.n} coefficients, got shape {arr.shape}")
        if arr.size and (arr.min() < 0 or arr.max() >= params.q):
            raise ValueError("coefficients must lie in [0, q)")
        arr.flags.writeable = False
        self.coeffs = arr
        self.params = params
        self._ntt = {}
        self._norm = None

    @classmethod
    def from_ints(cls, values, params: RingParams) -> "Poly":
        """Build from arbitrary (possibly negative or huge) integers, reducing mod q."""
        arr = np.array([int(v) % params.q for v in values], dtype=np.int64)
        return cls(arr, params)

    @classmethod
    def zero(cls, params: RingParams) -> "Poly":
        return cls(np.zeros(params.n, dtype=np.int64), params)

    @classmethod
    def constant(cls, value: int, params: RingParams) -> "Poly":
        return cls.from_ints([value] + [0] * (params.n - 1), params)

    @classmethod
    def _trusted(cls, arr: np.ndarray, params: RingParams) -> "Poly":
        obj = cls.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=np.int64)
        arr.flags.writeable = False
        obj.coeffs = arr
        obj.params = params
        obj._ntt = {}
        obj._norm = None
        return obj

    def centered(self) -> np.ndarray:
        """Representatives in (-q/2, q/2]."""
        q = self.params.q
        c = self.coeffs
        return np.where(c > q // 2, c - q, c)

    def inf_norm(self) -> int:
        if self._norm is None:
            self._norm = int(np.abs(self.centered()).max())
        return self._norm

    def to_bytes(self) -> bytes:
        return struct.pack("<IQ", self.params.n, self.params.q) + self.coeffs.astype("<u8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, params: RingParams) -> "Poly":
        n, q = struct.unpack_from("<IQ", data)
        if (n, q) != (params.n, params.q):
            raise ParameterMismatch(f"serialized poly has (n, q)=({n}, {q})")
        body = np.frombuffer(data, dtype="<u8", count=n, offset=12)
        return cls(body.astype(np.int64), params)

    def __len__(self):
        return self.params.n

    def __eq__(self, other):
        if not isinstance(other, Poly):
            return NotImplemented
        return self.params == other.params and np.array_equal(self.coeffs, other.coeffs)

    def __hash__(self):
        return hash((self.params, self.coeffs.tobytes()))

    def __repr__(self):
        head = ", ".join(str(int(c)) for c in self.coeffs[:8])
        more = ", ..." if self.params.n > 8 else ""
        return f"Poly([{head}{more}], n={self.params.n}, q={self.params.q})"

    def __add__(self, other):
        return poly_add(self, other)

    def __sub__(self, other):
        return poly_sub(self, other)

    def __neg__(self):
        return poly_neg(self)

    def __mul__(self, other):
        if isinstance(other, Poly):
            return poly_mul(self, other)
        if isinstance(other, (int, np.integer)):
            return poly_scalar_mul(self, int(other))
        return NotImplemented

    __rmul__ = __mul__


def _check(a: Poly, b: Poly):
    if a.params.n != b.params.n or a.params.q != b.params.q:
        raise ParameterMismatch(
            f"ring mismatch: (n={a.params.n}, q={a.params.q}) vs (n={b.params.n}, q={b.params.q})"
        )


def poly_add(a: Poly, b: Poly) -> Poly:
    _check(a, b)
    return Poly._trusted((a.coeffs + b.coeffs) % a.params.q, a.params)


def poly_sub(a: Poly, b: Poly) -> Poly:
    _check(a, b)
    return Poly._trusted((a.coeffs - b.coeffs) % a.params.q, a.params)


def poly_neg(a: Poly) -> Poly:
    return Poly._trusted((-a.coeffs) % a.params.q, a.params)


def poly_scalar_mul(a: Poly, k: int) -> Poly:
    q = a.params.q
    k = int(k) % q
    out = (a.coeffs.astype(object) * k) % q
    return Poly._trusted(out.astype(np.int64), a.params)


def poly_sum(polys) -> Poly:
    polys = list(polys)
    if not polys:
        raise ValueError("empty sum")
    acc = polys[0]
    for p in polys[1:]:
        acc = poly_add(acc, p)
    return acc


def poly_mul_schoolbook(a: Poly, b: Poly) -> Poly:
    """O(n^2) negacyclic product with Python ints.  Reference path."""
    _check(a, b)
    n, q = a.params.n, a.params.q
    x = [int(c) for c in a.coeffs]
    y = [int(c) for c in b.coeffs]
    out = [0] * n
    for i in range(n):
        xi = x[i]
        if xi == 0:
            continue
        for j in range(n):
            k = i + j
            if k < n:
                out[k] += xi * y[j]
            else:
                out[k - n] -= xi * y[j]
    return Poly._trusted(np.array([c % q for c in out], dtype=np.int64), a.params)


# --- CRT/NTT fast path --------------------------------------------------------


@lru_cache(maxsize=None)
def _ntt_tables(n: int, k: int):
    """Twiddle tables for the first k primes, stacked as (k, .) int64 arrays."""
    bits = n.bit_length() - 1
    rev = np.array([int(format(i, f"0{bits}b")[::-1], 2) for i in range(n)], dtype=np.intp)
    twist, untwist, fwd, inv = [], [], [], []
    for p in NTT_PRIMES[:k]:
        x = 2
        while True:
            psi = pow(x, (p - 1) // (2 * n), p)
            if pow(psi, n, p) == p - 1:
                break
            x += 1
        omega = psi * psi % p
        omega_inv = pow(omega, -1, p)
        n_inv = pow(n, -1, p)
        psi_inv = pow(psi, -1, p)
        twist.append([pow(psi, i, p) for i in range(n)])
        untwist.append([pow(psi_inv, i, p) * n_inv % p for i in range(n)])
        f, g = [], []
        m = 1
        while m < n:
            w = pow(omega, n // (2 * m), p)
            wi = pow(omega_inv, n // (2 * m), p)
            f.append([pow(w, j, p) for j in range(m)])
            g.append([pow(wi, j, p) for j in range(m)])
            m *= 2
        fwd.append(f)
        inv.append(g)
    stack = lambda rows: np.array(rows, dtype=np.int64)
    stages = len(fwd[0])
    fwd_st = tuple(stack([fwd[j][s] for j in range(k)])[:, None, :] for s in range(stages))
    inv_st = tuple(stack([inv[j][s] for j in range(k)])[:, None, :] for s in range(stages))
    mod = np.array(NTT_PRIMES[:k], dtype=np.int64)
    return rev, stack(twist), stack(untwist), fwd_st, inv_st, mod


def _butterflies(a: np.ndarray, mod: np.ndarray, rev: np.ndarray, stages) -> np.ndarray:
    """Iterative radix-2 cyclic NTT applied row-wise; row j is taken mod prime j."""
    k, n = a.shape
    p = mod[:, None, None]
    a = a[:, rev]
    m = 1
    for w in stages:
        a = a.reshape(k, -1, 2 * m)
        u = a[:, :, :m]
        v = a[:, :, m:] * w % p
        a = np.concatenate(((u + v) % p, (u - v) % p), axis=2)
        m *= 2
    return a.reshape(k, n)


def _forward(poly: Poly, k: int) -> np.ndarray:
    cached = poly._ntt.get(k)
    if cached is None:
        rev, twist, _, fwd, _, mod = _ntt_tables(poly.params.n, k)
        col = mod[:, None]
        cached = _butterflies(poly.centered()[None, :] % col * twist % col, mod, rev, fwd)
        poly._ntt[k] = cached
    return cached


def _inverse(values: np.ndarray, k: int) -> np.ndarray:
    rev, _, untwist, _, inv, mod = _ntt_tables(values.shape[1], k)
    return _butterflies(values, mod, rev, inv) * untwist % mod[:, None]


def _primes_needed(n: int, norm_a: int, norm_b: int) -> int:
    # exact centered product has |coeff| <= n*|a|*|b|; need prod(p) > 2*bound
    bound_bits = (n * max(norm_a, 1) * max(norm_b, 1)).bit_length() + 2
    count, acc = 0, 1
    while acc.bit_length() <= bound_bits:
        acc *= NTT_PRIMES[count]
        count += 1
    return count


def _crt_to_mod_q(residues, q: int) -> np.ndarray:
    primes = NTT_PRIMES[: len(residues)]
    # Garner mixed-radix digits, all int64-safe since p < 2^30
    digits = []
    for i, (r, p) in enumerate(zip(residues, primes)):
        x = r.copy()
        for j in range(i):
            inv = pow(primes[j], -1, p)
            x = (x - digits[j]) % p * inv % p
        digits.append(x)
    total = np.zeros(residues[0].size, dtype=object)
    radix = 1
    for d, p in zip(digits, primes):
        total = total + d.astype(object) * radix
        radix *= p
    total = np.where(total > radix // 2, total - radix, total)
    return (total % q).astype(np.int64)


def poly_mul(a: Poly, b: Poly) -> Poly:
    """Negacyclic product; bit-exact with :func:`poly_mul_schoolbook`."""
    _check(a, b)
    n = a.params.n
    if n < 32 or n > _MAX_NTT_DEGREE:
        return poly_mul_schoolbook(a, b)
    k = _primes_needed(n, a.inf_norm(), b.inf_norm())
    if k > len(NTT_PRIMES):
        return poly_mul_schoolbook(a, b)
    mod = np.array(NTT_PRIMES[:k], dtype=np.int64)[:, None]
    residues = _inverse(_forward(a, k) * _forward(b, k) % mod, k)
    return Poly._trusted(_crt_to_mod_q(list(residues), a.params.q), a.params)


# --- sampling -----------------------------------------------------------------


def make_rng(seed) -> np.random.Generator:
    """Deterministic generator from an int, a sequence of ints, or bytes."""
    if isinstance(seed, (bytes, bytearray)):
        seed = int.from_bytes(seed, "little")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def sample_uniform(params: RingParams, rng: np.random.Generator) -> Poly:
    return Poly._trusted(rng.integers(0, params.q, size=params.n, dtype=np.int64), params)


def sample_ternary(params: RingParams, rng: np.random.Generator) -> Poly:
    vals = rng.integers(-1, 2, size=params.n, dtype=np.int64)
    return Poly._trusted(vals % params.q, params)


def gaussian_values(size: int, noise: NoiseParams, rng: np.random.Generator) -> np.ndarray:
    """Rounded continuous Gaussian draws, resampled until |value| <= bound."""
    out = np.rint(rng.normal(0.0, noise.sigma, size=size)).astype(np.int64)
    bad = np.abs(out) > noise.bound
    while bad.any():
        out[bad] = np.rint(rng.normal(0.0, noise.sigma, size=int(bad.sum()))).astype(np.int64)
        bad = np.abs(out) > noise.bound
    return out


def sample_gaussian(params: RingParams, noise: NoiseParams, rng: np.random.Generator) -> Poly:
    return Poly._trusted(gaussian_values(params.n, noise, rng) % params.q, params)


def sample(dist: str, params: RingParams, rng: np.random.Generator, noise: NoiseParams | None = None) -> Poly:
    if dist == "uniform_q":
        return sample_uniform(params, rng)
    if dist == "ternary":
        return sample_ternary(params, rng)
    if dist == "gaussian":
        if noise is None:
            raise ValueError("gaussian sampling requires NoiseParams")
        return sample_gaussian(params, noise, rng)
    raise ValueError(f"unknown distribution {dist!r}")
