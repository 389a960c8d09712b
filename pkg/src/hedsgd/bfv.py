"""Single-party BFV: keys, encryption, decryption, additive and plaintext-scalar evaluation."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .ring import (
    DEFAULT_NOISE,
    NoiseParams,
    ParameterMismatch,
    Poly,
    RingParams,
    poly_add,
    poly_mul,
    poly_scalar_mul,
    sample_gaussian,
    sample_ternary,
    sample_uniform,
)

PRESETS = {
    # toy oracle parameters, delta = 65537 // 257 = 255
    "n8": RingParams(8, 65537, 257),
    # toy degree with a wide modulus: room for multiparty noise and injected noise
    "n8w": RingParams(8, 1099511578177, 257),
    # fixed-point training: t = 2^34 holds scale 2^(13+16) values up to |16|
    "fx64": RingParams(64, 4611685692009873409, 1 << 34),
    "n2048": RingParams(2048, 18014398492704769, 1 << 20),
    "n4096": RingParams(4096, 1152921504577486849, 1 << 20),
}


def preset(name: str) -> RingParams:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown ring preset {name!r}; choose from {sorted(PRESETS)}") from None


def fresh_noise_estimate(params: RingParams, noise: NoiseParams, parties: int = 1) -> float:
    """Six-sigma magnitude of e0 - u*e_pk + e1*s for a key held by `parties` parties."""
    var = noise.sigma**2 * (1 + 4 * params.n * parties / 3)
    return 6 * math.sqrt(var)


def fresh_noise_bound(params: RingParams, noise: NoiseParams, parties: int = 1) -> int:
    """Worst-case fresh noise; B*(2n+1) for a single-party key."""
    return noise.bound * (2 * params.n * parties + 1)


@dataclass(frozen=True)
class SecretKey:
    s: Poly

    @property
    def params(self) -> RingParams:
        return self.s.params


@dataclass(frozen=True)
class PublicKey:
    p0: Poly
    p1: Poly
    parties: int = 1

    @property
    def params(self) -> RingParams:
        return self.p0.params

    def to_bytes(self) -> bytes:
        return _header(b"K", self.params) + self.p0.to_bytes() + self.p1.to_bytes()

    @classmethod
    def from_bytes(cls, data: bytes, params: RingParams) -> "PublicKey":
        body = _strip_header(b"K", data, params)
        size = _poly_size(params)
        return cls(Poly.from_bytes(body[:size], params), Poly.from_bytes(body[size:], params))


@dataclass(frozen=True, eq=False)
class Plaintext:
    coeffs: np.ndarray
    t: int

    def __post_init__(self):
        arr = np.array(self.coeffs, dtype=np.int64)
        if arr.ndim != 1:
            raise ValueError("plaintext must be a flat coefficient vector")
        if arr.size and (arr.min() < 0 or arr.max() >= self.t):
            raise ValueError(f"plaintext coefficients must lie in [0, {self.t})")
        arr.flags.writeable = False
        object.__setattr__(self, "coeffs", arr)

    @classmethod
    def from_ints(cls, values, t: int) -> "Plaintext":
        return cls(np.array([int(v) % t for v in values], dtype=np.int64), t)

    def __eq__(self, other):
        if not isinstance(other, Plaintext):
            return NotImplemented
        return self.t == other.t and np.array_equal(self.coeffs, other.coeffs)

    def __len__(self):
        return len(self.coeffs)

    def to_bytes(self) -> bytes:
        return struct.pack("<IQ", len(self.coeffs), self.t) + self.coeffs.astype("<u8").tobytes()


@dataclass(frozen=True)
class Ciphertext:
    c0: Poly
    c1: Poly
    # advisory six-sigma magnitude estimate; never consulted by decrypt
    noise_estimate: float = 0.0

    def __post_init__(self):
        if self.c0.params != self.c1.params:
            raise ParameterMismatch("ciphertext components live in different rings")

    @property
    def params(self) -> RingParams:
        return self.c0.params

    @property
    def noise_budget_hint(self) -> float:
        """Estimated log2 headroom left below q/(2t)."""
        return math.log2(self.params.noise_threshold) - math.log2(max(self.noise_estimate, 1.0))

    def to_bytes(self) -> bytes:
        return _header(b"C", self.params) + self.c0.to_bytes() + self.c1.to_bytes()

    @classmethod
    def from_bytes(cls, data: bytes, params: RingParams) -> "Ciphertext":
        body = _strip_header(b"C", data, params)
        size = _poly_size(params)
        return cls(Poly.from_bytes(body[:size], params), Poly.from_bytes(body[size:], params))


def _header(tag: bytes, params: RingParams) -> bytes:
    return tag + struct.pack("<IQQ", params.n, params.q, params.t)


def _strip_header(tag: bytes, data: bytes, params: RingParams) -> bytes:
    if data[:1] != tag:
        raise ValueError(f"expected record tag {tag!r}, got {data[:1]!r}")
    n, q, t = struct.unpack_from("<IQQ", data, 1)
    if (n, q, t) != (params.n, params.q, params.t):
        raise ParameterMismatch(f"record encoded for (n, q, t)=({n}, {q}, {t})")
    return data[21:]


def _poly_size(params: RingParams) -> int:
    return 12 + 8 * params.n


def seckeygen(params: RingParams, rng) -> SecretKey:
    return SecretKey(sample_ternary(params, rng))


def pubkeygen(sk: SecretKey, rng, noise: NoiseParams = DEFAULT_NOISE) -> PublicKey:
    params = sk.params
    p1 = sample_uniform(params, rng)
    e = sample_gaussian(params, noise, rng)
    p0 = -(poly_add(poly_mul(sk.s, p1), e))
    return PublicKey(p0, p1)


def scaled_message(pt: Plaintext, params: RingParams) -> Poly:
    """Delta * x as an element of R_q."""
    if len(pt) != params.n:
        raise ValueError(f"plaintext has {len(pt)} coefficients, ring degree is {params.n}")
    if pt.t != params.t:
        raise ParameterMismatch(f"plaintext modulus {pt.t} != ring t={params.t}")
    return poly_scalar_mul(Poly._trusted(pt.coeffs, params), params.delta)


def encrypt(pk: PublicKey, pt: Plaintext, rng, noise: NoiseParams = DEFAULT_NOISE) -> Ciphertext:
    params = pk.params
    msg = scaled_message(pt, params)
    u = sample_ternary(params, rng)
    e0 = sample_gaussian(params, noise, rng)
    e1 = sample_gaussian(params, noise, rng)
    c0 = msg + poly_mul(u, pk.p0) + e0
    c1 = poly_mul(u, pk.p1) + e1
    return Ciphertext(c0, c1, fresh_noise_estimate(params, noise, pk.parties))


def _round_div(num: np.ndarray, den: int) -> np.ndarray:
    """Round num/den half away from zero; object arrays of Python ints."""
    mag = (2 * np.abs(num) + den) // (2 * den)
    return np.where(num < 0, -mag, mag)


def decrypt_poly(s: Poly, ct: Ciphertext) -> Plaintext:
    params = ct.params
    if s.params != params:
        raise ParameterMismatch("secret key and ciphertext rings differ")
    phase = poly_add(ct.c0, poly_mul(ct.c1, s)).centered().astype(object)
    m = _round_div(phase * params.t, params.q) % params.t
    return Plaintext(m.astype(np.int64), params.t)


def decrypt(sk: SecretKey, ct: Ciphertext) -> Plaintext:
    return decrypt_poly(sk.s, ct)


def hom_add(a: Ciphertext, b: Ciphertext) -> Ciphertext:
    if a.params != b.params:
        raise ParameterMismatch("cannot add ciphertexts from different parameter sets")
    return Ciphertext(a.c0 + b.c0, a.c1 + b.c1, a.noise_estimate + b.noise_estimate)


def plain_scalar_mul(a: Ciphertext, k: int) -> Ciphertext:
    t = a.params.t
    if not 0 <= k < t:
        raise ValueError(f"scalar {k} outside [0, {t})")
    return Ciphertext(poly_scalar_mul(a.c0, k), poly_scalar_mul(a.c1, k), a.noise_estimate * k)


def noise_vector(s: Poly, ct: Ciphertext, expected: Plaintext) -> np.ndarray:
    """Centered c0 + c1*s - delta*expected, one entry per coefficient."""
    phase = poly_add(ct.c0, poly_mul(ct.c1, s))
    return (phase - scaled_message(expected, ct.params)).centered()


def noise_of(sk: SecretKey, ct: Ciphertext, expected: Plaintext) -> int:
    return int(np.abs(noise_vector(sk.s, ct, expected)).max())
