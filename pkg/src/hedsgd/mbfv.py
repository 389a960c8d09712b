"""Multiparty BFV over a party set U: additive key shares, joint public key,
conversion to a recipient's personal key, and one-round distributed bootstrapping.

Each party's contribution is a pure function of its own share and fresh
randomness; the combine steps fold shares sorted by party id so transcripts
do not depend on arrival order.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass

from .bfv import Ciphertext, PublicKey, SecretKey
from .ring import (
    DEFAULT_NOISE,
    NoiseParams,
    ParameterMismatch,
    Poly,
    RingParams,
    make_rng,
    poly_add,
    poly_mul,
    poly_scalar_mul,
    poly_sum,
    sample_gaussian,
    sample_ternary,
    sample_uniform,
)

TAG_PUBKEY_SHARE = 1
TAG_CONVERT_SHARE = 2
TAG_BOOTSTRAP_SHARE = 3


class ProtocolError(RuntimeError):
    """A combine step got a share set that does not match the party set."""


@dataclass(frozen=True)
class SecretKeyShare:
    party_id: int
    s: Poly


@dataclass(frozen=True)
class CommonRandomPoly:
    seed: bytes
    poly: Poly


@dataclass(frozen=True)
class PubKeyShare:
    party_id: int
    p0: Poly

    def to_bytes(self) -> bytes:
        return _share_bytes(TAG_PUBKEY_SHARE, self.party_id, self.p0)


@dataclass(frozen=True)
class ConvertShare:
    party_id: int
    h0: Poly
    h1: Poly

    def to_bytes(self) -> bytes:
        return _share_bytes(TAG_CONVERT_SHARE, self.party_id, self.h0, self.h1)


@dataclass(frozen=True)
class BootstrapShare:
    party_id: int
    eta0: Poly
    eta1: Poly

    def to_bytes(self) -> bytes:
        return _share_bytes(TAG_BOOTSTRAP_SHARE, self.party_id, self.eta0, self.eta1)


def _share_bytes(tag: int, party_id: int, *polys: Poly) -> bytes:
    return struct.pack("<BI", tag, party_id) + b"".join(p.to_bytes() for p in polys)


def parse_share(data: bytes, params: RingParams):
    """Inverse of the share ``to_bytes`` methods."""
    tag, party_id = struct.unpack_from("<BI", data)
    size = 12 + 8 * params.n
    polys = [Poly.from_bytes(data[5 + i * size : 5 + (i + 1) * size], params) for i in range((len(data) - 5) // size)]
    if tag == TAG_PUBKEY_SHARE:
        return PubKeyShare(party_id, *polys)
    if tag == TAG_CONVERT_SHARE:
        return ConvertShare(party_id, *polys)
    if tag == TAG_BOOTSTRAP_SHARE:
        return BootstrapShare(party_id, *polys)
    raise ValueError(f"unknown share tag {tag}")


def _ordered(shares, parties=None):
    shares = sorted(shares, key=lambda sh: sh.party_id)
    ids = [sh.party_id for sh in shares]
    if len(set(ids)) != len(ids):
        raise ProtocolError(f"duplicate party ids in share set: {ids}")
    if not shares:
        raise ProtocolError("empty share set")
    if parties is not None:
        expected = sorted(parties)
        if ids != expected:
            missing = sorted(set(expected) - set(ids))
            extra = sorted(set(ids) - set(expected))
            raise ProtocolError(f"share set mismatch: missing {missing}, unexpected {extra}")
    return shares


def crp_from_seed(seed: bytes, params: RingParams) -> CommonRandomPoly:
    """Expand a public seed into the uniform polynomial every party agrees on."""
    return CommonRandomPoly(bytes(seed), sample_uniform(params, make_rng(seed)))


def mbfv_seckeygen(party_id: int, params: RingParams, rng) -> SecretKeyShare:
    return SecretKeyShare(party_id, sample_ternary(params, rng))


def combined_secret_key(shares) -> SecretKey:
    """s = sum of shares.  Only ever materialized in tests and local oracles."""
    return SecretKey(poly_sum(sh.s for sh in _ordered(shares)))


def mbfv_pubkeygen_share(
    share: SecretKeyShare, crp: CommonRandomPoly, rng, noise: NoiseParams = DEFAULT_NOISE
) -> PubKeyShare:
    e = sample_gaussian(share.s.params, noise, rng)
    return PubKeyShare(share.party_id, -(poly_add(poly_mul(crp.poly, share.s), e)))


def mbfv_pubkeygen_combine(shares, crp: CommonRandomPoly, parties=None) -> PublicKey:
    shares = _ordered(shares, parties)
    return PublicKey(poly_sum(sh.p0 for sh in shares), crp.poly, parties=len(shares))


def mbfv_convert_share(
    share: SecretKeyShare,
    c1: Poly,
    recipient_pk: PublicKey,
    rng,
    noise: NoiseParams = DEFAULT_NOISE,
    *,
    u: Poly | None = None,
    e0: Poly | None = None,
    e1: Poly | None = None,
) -> ConvertShare:
    """(s_k*c1 + u_k*p0_i + e0_k, u_k*p1_i + e1_k); u_k ternary, errors Gaussian.

    The keyword overrides pin the randomness for share-level checks.
    """
    params = c1.params
    if recipient_pk.params.n != params.n or recipient_pk.params.q != params.q:
        raise ParameterMismatch("recipient key and ciphertext rings differ")
    u = sample_ternary(params, rng) if u is None else u
    e0 = sample_gaussian(params, noise, rng) if e0 is None else e0
    e1 = sample_gaussian(params, noise, rng) if e1 is None else e1
    h0 = poly_mul(share.s, c1) + poly_mul(u, recipient_pk.p0) + e0
    h1 = poly_mul(u, recipient_pk.p1) + e1
    return ConvertShare(share.party_id, h0, h1)


def conversion_noise_bound(params: RingParams, noise: NoiseParams, parties: int) -> int:
    """Worst case of e0 + sk_i*e1 + u*e_r with |U| = parties and a ternary sk_i.

    e_r is the error inside the recipient's public key.
    |e0| <= |U|B, |sk_i*e1| <= n|U|B, |u*e_r| <= n|U|B.
    """
    return parties * noise.bound * (2 * params.n + 1)


def _convert_noise_estimate(params: RingParams, noise: NoiseParams, parties: int) -> float:
    var = noise.sigma**2 * parties * (1 + 4 * params.n / 3)
    return 6 * math.sqrt(var)


def mbfv_convert_combine(
    ct: Ciphertext, shares, parties=None, noise: NoiseParams = DEFAULT_NOISE
) -> Ciphertext:
    """(c0 + sum h0_k, sum h1_k): the same plaintext under the recipient's personal key."""
    shares = _ordered(shares, parties)
    h0 = poly_sum(sh.h0 for sh in shares)
    h1 = poly_sum(sh.h1 for sh in shares)
    est = ct.noise_estimate + _convert_noise_estimate(ct.params, noise, len(shares))
    return Ciphertext(ct.c0 + h0, h1, est)


def mbfv_bootstrap_share(
    share: SecretKeyShare,
    c1: Poly,
    alpha: CommonRandomPoly,
    rng,
    noise: NoiseParams = DEFAULT_NOISE,
    *,
    mask: Poly | None = None,
    e0: Poly | None = None,
    e1: Poly | None = None,
) -> BootstrapShare:
    """(s_k*c1 - delta*M_k + e0_k, -s_k*alpha + delta*M_k + e1_k), M_k uniform on R_t."""
    params = c1.params
    if mask is None:
        mask = Poly._trusted(rng.integers(0, params.t, size=params.n, dtype="int64"), params)
    e0 = sample_gaussian(params, noise, rng) if e0 is None else e0
    e1 = sample_gaussian(params, noise, rng) if e1 is None else e1
    dm = poly_scalar_mul(mask, params.delta)
    eta0 = poly_mul(share.s, c1) - dm + e0
    eta1 = -poly_mul(share.s, alpha.poly) + dm + e1
    return BootstrapShare(share.party_id, eta0, eta1)


def bootstrap_noise_bound(params: RingParams, noise: NoiseParams, parties: int) -> int:
    """Post-bootstrap noise is e1 - j*(q mod t) with 0 <= j <= |U|."""
    return parties * (noise.bound + params.q % params.t)


def mbfv_bootstrap_combine(
    c0: Poly, shares, alpha: CommonRandomPoly, parties=None, noise: NoiseParams = DEFAULT_NOISE
) -> Ciphertext:
    """([round(t/q [c0 + eta0]_q)]_t * delta + eta1, alpha)."""
    shares = _ordered(shares, parties)
    params = c0.params
    eta0 = poly_sum(sh.eta0 for sh in shares)
    eta1 = poly_sum(sh.eta1 for sh in shares)
    phase = (c0 + eta0).centered().astype(object)
    mag = (2 * abs(phase) * params.t + params.q) // (2 * params.q)
    rounded = [(-m if p < 0 else m) % params.t for p, m in zip(phase, mag)]
    masked = Poly.from_ints(rounded, params)
    new_c0 = poly_scalar_mul(masked, params.delta) + eta1
    est = 6 * noise.sigma * math.sqrt(len(shares)) + len(shares) * (params.q % params.t)
    return Ciphertext(new_c0, alpha.poly, est)


def needs_bootstrap(ct: Ciphertext) -> bool:
    """Trigger at half the hard bound: estimated noise above q/(4t)."""
    return ct.noise_estimate > ct.params.q / (4 * ct.params.t)

