import math
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from npp_fedsim import chacha
from npp_fedsim.chacha import (
    CipherFrame,
    ChaChaKey,
    EncodingError,
    MalformedFrameError,
    NonceReuseError,
    TelemetryRecord,
    chacha20_block,
    chacha20_xor,
    decode_record,
    decrypt,
    encode_report,
    encrypt,
    make_nonce,
)
from npp_fedsim.coverage import GeoPoint
from npp_fedsim.envsim import GasVector
from npp_fedsim.robot import ContaminationReport

cryptography = pytest.importorskip("cryptography")
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms  # noqa: E402


def reference_keystream_xor(key, nonce, data, counter):
    # the library takes a 16-byte nonce: little-endian block counter then the IETF nonce
    c = Cipher(algorithms.ChaCha20(key, struct.pack("<I", counter) + nonce), mode=None).encryptor()
    return c.update(data)


def test_rfc_block_vector():
    v = chacha.RFC8439_BLOCK
    out = chacha20_block(v["key"], v["counter"], v["nonce"])
    assert out == v["keystream"]
    assert out[:3] == bytes([0x10, 0xF1, 0xE7])


def test_rfc_sunscreen_vector():
    v = chacha.RFC8439_ENCRYPT
    assert chacha20_xor(v["key"], v["nonce"], v["plaintext"], v["counter"]) == v["ciphertext"]
    frame = encrypt(ChaChaKey(v["key"]), v["plaintext"], v["nonce"])
    assert frame.ciphertext == v["ciphertext"]


def test_all_rfc_vectors_pass():
    assert all(ok for _, ok in chacha.run_rfc_vectors())


def test_block_determinism_and_counter():
    key, nonce = bytes(range(32)), bytes(12)
    assert chacha20_block(key, 5, nonce) == chacha20_block(key, 5, nonce)
    assert chacha20_block(key, 5, nonce) != chacha20_block(key, 6, nonce)
    with pytest.raises(ValueError):
        chacha20_block(key[:31], 0, nonce)
    with pytest.raises(ValueError):
        chacha20_block(key, 2**32, nonce)


def test_matches_reference_library_on_random_inputs():
    rng = np.random.default_rng(0)
    for _ in range(200):
        key, nonce = rng.bytes(32), rng.bytes(12)
        data = rng.bytes(int(rng.integers(1, 300)))
        ctr = int(rng.integers(0, 1000))
        assert chacha20_xor(key, nonce, data, ctr) == reference_keystream_xor(key, nonce, data, ctr)


def test_frame_roundtrip_fuzz():
    rng = np.random.default_rng(1)
    key = ChaChaKey(rng.bytes(32))
    for i in range(1000):
        pt = rng.bytes(int(rng.integers(0, 200)))
        frame = encrypt(key, pt, make_nonce(7, i))
        raw = frame.to_bytes()
        assert len(frame.ciphertext) == len(pt)
        assert raw[0] == 0x01 and raw[1:13] == make_nonce(7, i)
        assert decrypt(key, CipherFrame.from_bytes(raw)) == pt


def test_empty_plaintext():
    key = ChaChaKey(bytes(32))
    assert encrypt(key, b"", make_nonce(1, 0)).ciphertext == b""


def test_nonce_reuse_is_refused():
    key = ChaChaKey(bytes(32))
    n = make_nonce(1, 0)
    encrypt(key, b"first", n)
    with pytest.raises(NonceReuseError):
        encrypt(key, b"second", n)


def test_distinct_nonces_differ():
    key = ChaChaKey(bytes(range(32)))
    a = encrypt(key, b"\x00", make_nonce(1, 0)).ciphertext
    b = encrypt(key, b"\x00", make_nonce(1, 1)).ciphertext
    c = encrypt(key, b"\x00", make_nonce(2, 0)).ciphertext
    assert len({a, b, c}) == 3


def test_nonce_layout():
    assert make_nonce(1, 2) == bytes([1, 0, 0, 0, 2, 0, 0, 0, 0, 0, 0, 0])


def test_malformed_frames():
    with pytest.raises(MalformedFrameError):
        CipherFrame.from_bytes(b"\x01" + bytes(5))
    with pytest.raises(MalformedFrameError):
        CipherFrame.from_bytes(b"\x02" + bytes(20))


def test_record_layout():
    assert TelemetryRecord(0, 0, 0, 0, 0, 0).to_bytes() == bytes(48)
    raw = TelemetryRecord(1.0, 0, 0, 0, 0, 0).to_bytes()
    assert raw[0:8] == bytes([0, 0, 0, 0, 0, 0, 0xF0, 0x3F])
    raw = TelemetryRecord(0, 0, 0, 0, 0, 258).to_bytes()
    assert raw[40:] == bytes([2, 1, 0, 0, 0, 0, 0, 0])


finite = st.floats(allow_nan=False, allow_infinity=False)


@given(finite, finite, finite, finite, finite, st.integers(0, 2**64 - 1))
def test_record_roundtrip(lat, lon, co2, co, ch4, ts):
    rec = TelemetryRecord(lat, lon, co2, co, ch4, ts)
    assert decode_record(rec.to_bytes()) == rec


def test_record_errors():
    with pytest.raises(EncodingError):
        TelemetryRecord(math.nan, 0, 0, 0, 0, 0).to_bytes()
    with pytest.raises(EncodingError):
        TelemetryRecord(0, 0, 0, 0, 0, -1).to_bytes()
    with pytest.raises(EncodingError):
        decode_record(bytes(47))


def test_encode_report_full_snapshot():
    report = ContaminationReport(GeoPoint(45.5, 4.75), {"co": (40.0, 35.0)}, 12.3456, GasVector(500.0, 40.0, 3.0))
    rec = decode_record(encode_report(report))
    assert rec == TelemetryRecord(45.5, 4.75, 500.0, 40.0, 3.0, 12346)


def test_tampering_is_not_detected():
    # no authentication tag: a flipped ciphertext bit flips the same plaintext bit, silently
    key = ChaChaKey(bytes(32))
    pt = TelemetryRecord(45.0, 4.0, 420.0, 1.0, 2.0, 1000).to_bytes()
    raw = bytearray(encrypt(key, pt, make_nonce(1, 0)).to_bytes())
    raw[13 + 40] ^= 0x01
    out = decrypt(key, CipherFrame.from_bytes(bytes(raw)))
    assert decode_record(out).timestamp_ms == 1001
