import math
import random

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from npp_fedsim import qkd
from npp_fedsim.qkd import (
    Decision,
    EvePolicy,
    KeyExhaustionError,
    KeyMaterial,
    QberEstimate,
    SiftedKey,
    bb84_exchange,
    eve_information,
    keygate,
    otp_decrypt,
    otp_encrypt,
    reconcile,
    sifted_eve_information,
)


def h2(p):
    return -p * math.log2(p) - (1 - p) * math.log2(1 - p)


def loop_oracle(n, eve_fraction, seed):
    """Qubit-by-qubit intercept-resend with the stdlib RNG, independent of the package."""
    r = random.Random(seed)
    sifted = errors = 0
    joint = [[0, 0], [0, 0]]
    for _ in range(n):
        bit, basis = r.getrandbits(1), r.getrandbits(1)
        wire_bit, wire_basis, eve_bit = bit, basis, None
        if r.random() < eve_fraction:
            eb = r.getrandbits(1)
            eve_bit = bit if eb == basis else r.getrandbits(1)
            wire_bit, wire_basis = eve_bit, eb
        bb = r.getrandbits(1)
        bob = wire_bit if bb == wire_basis else r.getrandbits(1)
        if bb == basis:
            sifted += 1
            errors += bob != bit
            if eve_bit is not None:
                joint[bit][eve_bit] += 1
    total = sum(map(sum, joint))
    info = 0.0
    for i in range(2):
        for j in range(2):
            if joint[i][j]:
                info += joint[i][j] / total * math.log2(joint[i][j] * total / (sum(joint[i]) * (joint[0][j] + joint[1][j])))
    return sifted / n, errors / sifted, info


def test_analytic_values_confirmed_by_loop_oracle():
    frac, q, info = loop_oracle(40_000, 1.0, 11)
    assert frac == pytest.approx(0.5, abs=0.01)
    assert q == pytest.approx(0.25, abs=0.01)
    assert 1 - h2(0.25) == pytest.approx(0.18872, abs=1e-5)
    assert info == pytest.approx(1 - h2(0.25), abs=0.01)


def test_package_matches_oracle_statistics():
    res = bb84_exchange(20_000, EvePolicy(1.0), 0.0, np.random.default_rng(5))
    frac, q, info = loop_oracle(20_000, 1.0, 5)
    assert res.sifted_fraction == pytest.approx(frac, abs=0.02)
    assert res.estimate.ratio == pytest.approx(q, abs=0.02)
    assert sifted_eve_information(res) == pytest.approx(info, abs=0.02)


def test_qber_function():
    assert qkd.qber(0, 100) == 0.0
    assert qkd.qber(25, 100) == 0.25
    assert qkd.qber(100, 100) == 1.0
    with pytest.raises(ValueError):
        qkd.qber(0, 0)


def test_qber_estimate_validation():
    with pytest.raises(ValueError):
        QberEstimate(1, 0)
    with pytest.raises(ValueError):
        QberEstimate(5, 4)


def test_no_eve_keys_agree():
    alice, bob, est = bb84_exchange(20_000, EvePolicy(0.0), 0.0, np.random.default_rng(1))
    assert est.ratio == 0.0
    assert np.array_equal(alice.bits, bob.bits)
    assert np.array_equal(alice.source_indices, bob.source_indices)


def test_sifting_and_sacrifice_structure():
    res = bb84_exchange(2000, EvePolicy(0.5), 0.0, np.random.default_rng(2))
    match = np.flatnonzero(res.alice.bases == res.bob_bases)
    assert np.array_equal(res.sifted_indices, match)
    kept = res.alice_key.source_indices
    assert np.all(np.diff(kept) > 0)
    assert set(kept) <= set(match)
    assert res.estimate.total == len(match) // 2
    assert len(kept) + res.estimate.total == len(match)


def test_exchange_is_seeded():
    a = bb84_exchange(500, EvePolicy(0.3), 0.01, np.random.default_rng(9))
    b = bb84_exchange(500, EvePolicy(0.3), 0.01, np.random.default_rng(9))
    assert np.array_equal(a.alice_key.bits, b.alice_key.bits)
    assert a.estimate == b.estimate


def test_exchange_rejects_small_n():
    with pytest.raises(ValueError):
        bb84_exchange(63)
    with pytest.raises(ValueError):
        EvePolicy(1.5)


def test_channel_noise_raises_qber():
    res = bb84_exchange(20_000, EvePolicy(0.0), 0.05, np.random.default_rng(3))
    assert res.estimate.ratio == pytest.approx(0.05, abs=0.01)


def test_keygate():
    assert keygate(QberEstimate(0, 100), 0.11) is Decision.ACCEPT
    assert keygate(QberEstimate(25, 100), 0.11) is Decision.ABORT
    assert keygate(QberEstimate(11, 100), 0.11) is Decision.ACCEPT


def test_reconcile_drops_ceil_two_qber():
    rng = np.random.default_rng(0)
    a = SiftedKey(rng.integers(0, 2, 1000).astype(np.int8), np.arange(1000))
    b = SiftedKey(a.bits ^ (rng.random(1000) < 0.03).astype(np.int8), np.arange(1000))
    ra, rb = reconcile(a, b, 0.0305, rng)
    assert len(ra) == 1000 - math.ceil(2 * 0.0305 * 1000)
    assert np.array_equal(ra.bits, rb.bits)
    same = reconcile(a, a, 0.0, rng)
    assert len(same[0]) == 1000


def test_eve_information_limits():
    rng = np.random.default_rng(0)
    bits = rng.integers(0, 2, 1000)
    assert eve_information(bits, np.full(1000, -1)) == 0.0
    assert eve_information(bits, bits) == pytest.approx(
        -sum(p * math.log2(p) for p in (bits.mean(), 1 - bits.mean())), rel=1e-12)
    assert eve_information([], []) == 0.0
    with pytest.raises(ValueError):
        eve_information([0, 1], [0])


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(-1, 1)), min_size=1, max_size=200))
def test_eve_information_in_unit_interval(pairs):
    a, e = zip(*pairs)
    assert 0.0 <= eve_information(a, e) <= 1.0


def test_eve_information_zero_fraction_exact():
    res = bb84_exchange(5000, EvePolicy(0.0), 0.0, np.random.default_rng(4))
    assert sifted_eve_information(res) == 0.0


def test_eve_information_full_interception_n50000():
    res = bb84_exchange(50_000, EvePolicy(1.0), 0.0, np.random.default_rng(6))
    assert sifted_eve_information(res) == pytest.approx(0.189, abs=0.02)


def test_eve_information_increases_with_fraction():
    means = []
    for frac in (0.0, 0.5, 1.0):
        trials = [sifted_eve_information(bb84_exchange(2000, EvePolicy(frac), 0.0, np.random.default_rng(100 + s)))
                  for s in range(30)]
        means.append(np.mean(trials))
    assert means[0] < means[1] < means[2]


def test_otp_properties():
    rng = np.random.default_rng(0)
    msg = rng.bytes(32)
    key_bits = np.unpackbits(np.frombuffer(msg, np.uint8))
    assert otp_encrypt(msg, KeyMaterial(key_bits.copy())) == bytes(32)
    assert otp_encrypt(msg, KeyMaterial(np.zeros(256, np.uint8))) == msg


def test_otp_roundtrip_fuzz():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        n = int(rng.integers(0, 64))
        msg = rng.bytes(n)
        bits = rng.integers(0, 2, 8 * n + int(rng.integers(0, 16))).astype(np.uint8)
        ct = otp_encrypt(msg, KeyMaterial(bits.copy()))
        assert len(ct) == n
        assert otp_decrypt(ct, KeyMaterial(bits.copy())) == msg


def test_otp_never_reuses_key_bits():
    key = KeyMaterial(np.random.default_rng(2).integers(0, 2, 100).astype(np.uint8))
    c1 = otp_encrypt(b"\x00\x00\x00\x00", key)
    c2 = otp_encrypt(b"\x00\x00\x00\x00", key)
    assert key.consumed == 64 and key.history == [32, 64]
    assert c1 != c2  # different pad bits for each call
    with pytest.raises(KeyExhaustionError):
        otp_encrypt(b"\x00\x00\x00\x00\x00", key)
    assert key.consumed == 64  # failed call consumed nothing


def test_derive_chacha_key_consumes_256_bits():
    key = KeyMaterial.from_bytes(bytes(range(40)))
    k = qkd.derive_chacha_key(key)
    assert len(k) == 32 and key.consumed == 256
    with pytest.raises(KeyExhaustionError):
        qkd.derive_chacha_key(key)


def test_qubits_for_key_bits_is_enough():
    bits = 1664  # one serialized 5x7 model
    n = qkd.qubits_for_key_bits(bits, 0.11)
    rng = np.random.default_rng(0)
    for _ in range(20):
        alice, bob, est = bb84_exchange(n, EvePolicy(0.0), 0.0, rng)
        assert len(alice) >= bits
