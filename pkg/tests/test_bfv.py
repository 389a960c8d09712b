import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from hedsgd import bfv
from hedsgd.bfv import Ciphertext, Plaintext, PublicKey
from hedsgd.ring import DEFAULT_NOISE, ParameterMismatch, Poly, RingParams, make_rng, poly_mul

N8 = bfv.preset("n8")
N8W = bfv.preset("n8w")


def keypair(params, seed=0):
    rng = make_rng(seed)
    sk = bfv.seckeygen(params, rng)
    return sk, bfv.pubkeygen(sk, rng), rng


def rand_pt(params, rng):
    return Plaintext(rng.integers(0, params.t, size=params.n), params.t)


def const_pt(params, v):
    return Plaintext.from_ints([v] * params.n, params.t)


def test_presets_are_well_formed():
    for name, p in bfv.PRESETS.items():
        assert bfv.preset(name) is p
        assert p.delta == p.q // p.t
    # n2048 / n4096: benchmark key sizes, q near 2^54 and 2^60
    assert bfv.preset("n2048").n == 2048 and bfv.preset("n4096").n == 4096
    assert 53 <= bfv.preset("n2048").q.bit_length() <= 55
    with pytest.raises(ValueError):
        bfv.preset("n16")


# keys


def test_seckeygen_ternary_and_deterministic():
    a = bfv.seckeygen(N8, make_rng(1))
    b = bfv.seckeygen(N8, make_rng(1))
    assert a.s == b.s
    assert set(a.s.centered().tolist()) <= {-1, 0, 1}


def test_seckeygen_distinct_across_seeds():
    # per pair of seeds; only 3^8 ternary keys exist at n = 8
    for s in range(100):
        assert bfv.seckeygen(N8, make_rng([s, 0])).s != bfv.seckeygen(N8, make_rng([s, 1])).s


def test_pubkey_unwinds_to_small_error():
    for seed in range(20):
        sk, pk, _ = keypair(N8, seed)
        e = -(pk.p0 + poly_mul(sk.s, pk.p1))
        assert e.inf_norm() <= DEFAULT_NOISE.bound


def test_pubkeygen_deterministic():
    _, a, _ = keypair(N8, 4)
    _, b, _ = keypair(N8, 4)
    assert a.to_bytes() == b.to_bytes()


# plaintexts


def test_plaintext_validation():
    with pytest.raises(ValueError):
        Plaintext([0, 257] + [0] * 6, 257)
    with pytest.raises(ValueError):
        Plaintext([-1] + [0] * 7, 257)
    assert Plaintext.from_ints([-1] + [0] * 7, 257).coeffs[0] == 256


def test_encrypt_rejects_wrong_plaintext_shape():
    _, pk, rng = keypair(N8)
    with pytest.raises(ValueError):
        bfv.encrypt(pk, Plaintext([0] * 4, 257), rng)
    with pytest.raises(ParameterMismatch):
        bfv.encrypt(pk, Plaintext([0] * 8, 256), rng)


# encrypt / decrypt


def test_zero_roundtrip():
    sk, pk, rng = keypair(N8)
    zero = const_pt(N8, 0)
    assert bfv.decrypt(sk, bfv.encrypt(pk, zero, rng)) == zero


def test_toy_roundtrip_1000():
    sk, pk, rng = keypair(N8, 10)
    for _ in range(1000):
        pt = rand_pt(N8, rng)
        assert bfv.decrypt(sk, bfv.encrypt(pk, pt, rng)) == pt


def test_decrypt_matches_rational_oracle():
    sk, pk, rng = keypair(N8, 12)
    s = sk.s.coeffs.tolist()
    for _ in range(200):
        ct = bfv.encrypt(pk, rand_pt(N8, rng), rng)
        # perturb c0 so the oracle also sees large, undecryptable phases
        junk = Poly(rng.integers(0, N8.q, size=N8.n), N8)
        for c0 in (ct.c0, ct.c0 + junk):
            want = oracles.bfv_decrypt(c0.coeffs.tolist(), ct.c1.coeffs.tolist(), s, N8.q, N8.t)
            assert bfv.decrypt(sk, Ciphertext(c0, ct.c1)).coeffs.tolist() == want


def test_encryption_is_randomized():
    _, pk, rng = keypair(N8)
    pt = rand_pt(N8, rng)
    a, b = bfv.encrypt(pk, pt, rng), bfv.encrypt(pk, pt, rng)
    assert a.to_bytes() != b.to_bytes()


def test_hand_built_ciphertext_below_threshold():
    sk, _, rng = keypair(N8)
    x = rand_pt(N8, rng)
    e = rng.integers(-(N8.delta // 2) + 1, N8.delta // 2, size=N8.n)
    c0 = Poly.from_ints((x.coeffs.astype(object) * N8.delta + e).tolist(), N8)
    assert bfv.decrypt(sk, Ciphertext(c0, Poly.zero(N8))) == x


def test_hand_built_overflow_decrypts_wrong():
    sk, _, rng = keypair(N8)
    x = rand_pt(N8, rng)
    e = [0] * N8.n
    e[3] = N8.delta * N8.t // 2 + N8.delta
    c0 = Poly.from_ints((x.coeffs.astype(object) * N8.delta + np.array(e, dtype=object)).tolist(), N8)
    assert bfv.decrypt(sk, Ciphertext(c0, Poly.zero(N8))) != x


def _inject(ct, amount):
    params = ct.params
    return Ciphertext(ct.c0 + Poly.from_ints(amount, params), ct.c1)


@pytest.mark.parametrize("params", [N8W, RingParams(8, 65537 * 257 + 1, 257)])
def test_decryption_threshold(params):
    """Noise of floor(q/2t) - 1 decrypts, ceil(q/2t) + delta does not (with q = 1 mod t)."""
    assert params.q % params.t == 1
    rng = make_rng(21)
    sk = bfv.seckeygen(params, rng)
    inside = params.q // (2 * params.t) - 1
    outside = -(-params.q // (2 * params.t)) + params.delta
    for _ in range(100):
        x = rand_pt(params, rng)
        signs = rng.choice([-1, 1], size=params.n)
        base = Ciphertext(bfv.scaled_message(x, params), Poly.zero(params))
        assert bfv.decrypt(sk, _inject(base, (signs * inside).tolist())) == x
        bad = bfv.decrypt(sk, _inject(base, (signs * outside).tolist()))
        assert np.all(bad.coeffs != x.coeffs)


def test_fresh_noise_below_analytic_bound():
    sk, pk, rng = keypair(N8W, 30)
    bound = bfv.fresh_noise_bound(N8W, DEFAULT_NOISE)
    assert bound == DEFAULT_NOISE.bound * (2 * N8W.n + 1)
    worst = 0
    for _ in range(1000):
        pt = rand_pt(N8W, rng)
        worst = max(worst, bfv.noise_of(sk, bfv.encrypt(pk, pt, rng), pt))
    assert worst <= bound
    # the six-sigma estimate sits above what we saw in practice
    assert worst <= bfv.fresh_noise_estimate(N8W, DEFAULT_NOISE)


def test_noise_below_threshold_when_decrypt_succeeds():
    sk, pk, rng = keypair(N8, 31)
    for _ in range(300):
        pt = rand_pt(N8, rng)
        ct = bfv.encrypt(pk, pt, rng)
        if bfv.decrypt(sk, ct) == pt:
            assert bfv.noise_of(sk, ct, pt) < N8.q / (2 * N8.t)


# evaluation


def test_add_examples():
    sk, pk, rng = keypair(N8)
    x = rand_pt(N8, rng)
    assert bfv.decrypt(sk, bfv.hom_add(bfv.encrypt(pk, x, rng), bfv.encrypt(pk, const_pt(N8, 0), rng))) == x
    s = bfv.hom_add(bfv.encrypt(pk, const_pt(N8, 3), rng), bfv.encrypt(pk, const_pt(N8, 5), rng))
    assert bfv.decrypt(sk, s) == const_pt(N8, 8)


def test_hundred_fold_addition():
    sk, pk, rng = keypair(N8W, 3)
    one = const_pt(N8W, 1)
    acc = bfv.encrypt(pk, one, rng)
    for _ in range(99):
        acc = bfv.hom_add(acc, bfv.encrypt(pk, one, rng))
    assert bfv.decrypt(sk, acc) == const_pt(N8W, 100)


def test_scalar_examples():
    sk, pk, rng = keypair(N8)
    x = rand_pt(N8, rng)
    ct = bfv.encrypt(pk, x, rng)
    assert bfv.decrypt(sk, bfv.plain_scalar_mul(ct, 1)) == x
    assert bfv.decrypt(sk, bfv.plain_scalar_mul(ct, 0)) == const_pt(N8, 0)
    three = bfv.encrypt(pk, const_pt(N8, 3), rng)
    assert bfv.decrypt(sk, bfv.plain_scalar_mul(three, 7)) == const_pt(N8, 21)
    with pytest.raises(ValueError):
        bfv.plain_scalar_mul(ct, N8.t)
    with pytest.raises(ValueError):
        bfv.plain_scalar_mul(ct, -1)


def test_add_noise_triangle_inequality():
    sk, pk, rng = keypair(N8W, 8)
    for _ in range(100):
        a, b = rand_pt(N8W, rng), rand_pt(N8W, rng)
        ca, cb = bfv.encrypt(pk, a, rng), bfv.encrypt(pk, b, rng)
        ab = Plaintext((a.coeffs + b.coeffs) % N8W.t, N8W.t)
        assert bfv.noise_of(sk, bfv.hom_add(ca, cb), ab) <= bfv.noise_of(sk, ca, a) + bfv.noise_of(sk, cb, b) + 1


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32), st.integers(0, 2**32))
def test_additive_homomorphism(seed_a, seed_b):
    sk, pk, _ = keypair(N8W, 77)
    rng = make_rng([seed_a, seed_b])
    a, b = rand_pt(N8W, rng), rand_pt(N8W, rng)
    out = bfv.decrypt(sk, bfv.hom_add(bfv.encrypt(pk, a, rng), bfv.encrypt(pk, b, rng)))
    assert out.coeffs.tolist() == ((a.coeffs + b.coeffs) % N8W.t).tolist()


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32), st.integers(0, N8W.t - 1))
def test_scalar_homomorphism(seed, k):
    sk, pk, _ = keypair(N8W, 78)
    rng = make_rng(seed)
    a = rand_pt(N8W, rng)
    out = bfv.decrypt(sk, bfv.plain_scalar_mul(bfv.encrypt(pk, a, rng), k))
    assert out.coeffs.tolist() == ((a.coeffs * k) % N8W.t).tolist()


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, N8W.t - 1))
def test_noise_monotone_under_evaluation(seed, k):
    sk, pk, _ = keypair(N8W, 79)
    rng = make_rng(seed)
    a, b = rand_pt(N8W, rng), rand_pt(N8W, rng)
    ca, cb = bfv.encrypt(pk, a, rng), bfv.encrypt(pk, b, rng)
    scaled = bfv.plain_scalar_mul(ca, k)
    ka = Plaintext((a.coeffs * k) % N8W.t, N8W.t)
    # scaling by k >= 1 multiplies the noise by k, up to the r*x rounding of delta
    assert bfv.noise_of(sk, scaled, ka) >= bfv.noise_of(sk, ca, a) - N8W.t
    # the advisory estimate grows monotonically either way
    assert scaled.noise_estimate >= ca.noise_estimate
    assert bfv.hom_add(ca, cb).noise_estimate >= max(ca.noise_estimate, cb.noise_estimate)


def test_noise_estimate_and_budget_hint():
    _, pk, rng = keypair(N8W)
    ct = bfv.encrypt(pk, rand_pt(N8W, rng), rng)
    est = bfv.fresh_noise_estimate(N8W, DEFAULT_NOISE)
    assert ct.noise_estimate == pytest.approx(est)
    assert ct.noise_budget_hint == pytest.approx(math.log2(N8W.q / (2 * N8W.t)) - math.log2(est))
    twice = bfv.hom_add(ct, ct)
    assert twice.noise_estimate == pytest.approx(2 * est)
    assert bfv.plain_scalar_mul(ct, 5).noise_estimate == pytest.approx(5 * est)


def test_mismatched_parameters_rejected():
    _, pk, rng = keypair(N8)
    _, pkw, rngw = keypair(N8W)
    a = bfv.encrypt(pk, rand_pt(N8, rng), rng)
    b = bfv.encrypt(pkw, rand_pt(N8W, rngw), rngw)
    with pytest.raises(ParameterMismatch):
        bfv.hom_add(a, b)


def test_serialization_roundtrip():
    _, pk, rng = keypair(N8)
    ct = bfv.encrypt(pk, rand_pt(N8, rng), rng)
    data = ct.to_bytes()
    assert len(data) == 21 + 2 * (12 + 8 * N8.n)
    back = Ciphertext.from_bytes(data, N8)
    assert (back.c0, back.c1) == (ct.c0, ct.c1)
    assert PublicKey.from_bytes(pk.to_bytes(), N8) == pk
    with pytest.raises(ValueError):
        PublicKey.from_bytes(data, N8)
    with pytest.raises(ParameterMismatch):
        Ciphertext.from_bytes(data, N8W)
