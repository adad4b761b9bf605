"""ChaCha20 (RFC 8439) and the robot-to-local-server telemetry frame.

Wire frame, byte for byte::

    offset  size  field
    0       1     version, always 0x01
    1       12    nonce
    13      n     ciphertext (same length as the plaintext)

The plaintext of a contamination report is a 48-byte little-endian record::

    0   lat           float64
    8   lon           float64
    16  co2_ppm       float64
    24  co_ppm        float64
    32  ch4_ppm       float64
    40  timestamp_ms  uint64

There is no authentication tag. The frame hides the content but a modified
ciphertext decrypts to modified plaintext without any error.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels

FRAME_VERSION = 0x01
NONCE_LEN = 12
KEY_LEN = 32
HEADER_LEN = 1 + NONCE_LEN
RECORD_FORMAT = "<dddddQ"
RECORD_LEN = struct.calcsize(RECORD_FORMAT)


class NonceReuseError(RuntimeError):
    pass


class MalformedFrameError(ValueError):
    pass


class EncodingError(ValueError):
    pass


def chacha20_block(key: bytes, counter: int, nonce: bytes) -> bytes:
    if len(key) != KEY_LEN or len(nonce) != NONCE_LEN:
        raise ValueError("ChaCha20 needs a 32-byte key and a 12-byte nonce")
    if not 0 <= counter <= 0xFFFFFFFF:
        raise ValueError("block counter must fit in 32 bits")
    return bytes(
        kernels.chacha20_blocks(np.frombuffer(key, "<u4"), np.frombuffer(nonce, "<u4"), counter, 1)
    )


def chacha20_xor(key: bytes, nonce: bytes, data: bytes, counter: int = 1) -> bytes:
    """XOR ``data`` with the keystream starting at block ``counter``."""
    if len(key) != KEY_LEN or len(nonce) != NONCE_LEN:
        raise ValueError("ChaCha20 needs a 32-byte key and a 12-byte nonce")
    if not data:
        return b""
    nblocks = -(-len(data) // 64)
    if counter + nblocks - 1 > 0xFFFFFFFF:
        raise ValueError("message too long for the 32-bit block counter")
    stream = kernels.chacha20_blocks(np.frombuffer(key, "<u4"), np.frombuffer(nonce, "<u4"), counter, nblocks)
    return (np.frombuffer(data, np.uint8) ^ stream[: len(data)]).tobytes()


@dataclass(frozen=True)
class CipherFrame:
    nonce: bytes
    ciphertext: bytes
    version: int = FRAME_VERSION

    def to_bytes(self) -> bytes:
        return bytes([self.version]) + self.nonce + self.ciphertext

    @classmethod
    def from_bytes(cls, raw: bytes) -> CipherFrame:
        if len(raw) < HEADER_LEN:
            raise MalformedFrameError(f"frame is {len(raw)} bytes, header alone needs {HEADER_LEN}")
        if raw[0] != FRAME_VERSION:
            raise MalformedFrameError(f"unsupported frame version 0x{raw[0]:02x}")
        return cls(nonce=bytes(raw[1:HEADER_LEN]), ciphertext=bytes(raw[HEADER_LEN:]))


def make_nonce(robot_id: int, counter: int) -> bytes:
    """4-byte robot id followed by an 8-byte per-key message counter."""
    return struct.pack("<IQ", robot_id, counter)


@dataclass
class ChaChaKey:
    """Session key plus the set of nonces already spent under it."""

    key: bytes
    initial_counter: int = 1
    used_nonces: set = field(default_factory=set, repr=False)

    def __post_init__(self):
        if len(self.key) != KEY_LEN:
            raise ValueError("ChaCha20 key must be 32 bytes")


def encrypt(key: ChaChaKey, plaintext: bytes, nonce: bytes) -> CipherFrame:
    if len(nonce) != NONCE_LEN:
        raise ValueError("nonce must be 12 bytes")
    if nonce in key.used_nonces:
        raise NonceReuseError(f"nonce {nonce.hex()} already used with this key")
    key.used_nonces.add(nonce)
    return CipherFrame(nonce=nonce, ciphertext=chacha20_xor(key.key, nonce, plaintext, key.initial_counter))


def decrypt(key: ChaChaKey, frame: CipherFrame) -> bytes:
    if frame.version != FRAME_VERSION:
        raise MalformedFrameError(f"unsupported frame version 0x{frame.version:02x}")
    return chacha20_xor(key.key, frame.nonce, frame.ciphertext, key.initial_counter)


@dataclass(frozen=True)
class TelemetryRecord:
    lat: float
    lon: float
    co2_ppm: float
    co_ppm: float
    ch4_ppm: float
    timestamp_ms: int

    def to_bytes(self) -> bytes:
        floats = (self.lat, self.lon, self.co2_ppm, self.co_ppm, self.ch4_ppm)
        if not all(math.isfinite(v) for v in floats):
            raise EncodingError("telemetry fields must be finite")
        if not 0 <= self.timestamp_ms < 2**64:
            raise EncodingError("timestamp_ms must fit in an unsigned 64-bit integer")
        return struct.pack(RECORD_FORMAT, *floats, self.timestamp_ms)

    @classmethod
    def from_bytes(cls, raw: bytes) -> TelemetryRecord:
        if len(raw) != RECORD_LEN:
            raise EncodingError(f"telemetry record must be {RECORD_LEN} bytes, got {len(raw)}")
        return cls(*struct.unpack(RECORD_FORMAT, raw))


def encode_report(report) -> bytes:
    """Serialize a ContaminationReport, carrying every gas's measured value."""
    g = report.gases
    rec = TelemetryRecord(
        lat=report.location.lat,
        lon=report.location.lon,
        co2_ppm=g.co2_ppm,
        co_ppm=g.co_ppm,
        ch4_ppm=g.ch4_ppm,
        timestamp_ms=int(round(report.timestamp * 1000)),
    )
    return rec.to_bytes()


def decode_record(raw: bytes) -> TelemetryRecord:
    return TelemetryRecord.from_bytes(raw)


# RFC 8439 vectors used by the ``crypto-vectors`` command and the test suite.
RFC8439_BLOCK = {
    "key": bytes(range(32)),
    "nonce": bytes.fromhex("000000090000004a00000000"),
    "counter": 1,
    "keystream": bytes.fromhex(
        "10f1e7e4d13b5915500fdd1fa32071c4c7d1f4c733c068030422aa9ac3d46c4e"
        "d2826446079faa0914c2d705d98b02a2b5129cd1de164eb9cbd083e8a2503c4e"
    ),
}

RFC8439_ENCRYPT = {
    "key": bytes(range(32)),
    "nonce": bytes.fromhex("000000000000004a00000000"),
    "counter": 1,
    "plaintext": (
        b"Ladies and Gentlemen of the class of '99: If I could offer you only one tip "
        b"for the future, sunscreen would be it."
    ),
    "ciphertext": bytes.fromhex(
        "6e2e359a2568f98041ba0728dd0d6981e97e7aec1d4360c20a27afccfd9fae0b"
        "f91b65c5524733ab8f593dabcd62b3571639d624e65152ab8f530c359f0861d8"
        "07ca0dbf500d6a6156a38e088a22b65e52bc514d16ccf806818ce91ab7793736"
        "5af90bbf74a35be6b40b8eedf2785e42874d"
    ),
}

# RFC 8439 appendix A.1, test vectors 1-3 (block function)
RFC8439_APPENDIX_BLOCKS = [
    (bytes(32), bytes(12), 0,
     "76b8e0ada0f13d90405d6ae55386bd28bdd219b8a08ded1aa836efcc8b770dc7"
     "da41597c5157488d7724e03fb8d84a376a43b8f41518a11cc387b669b2ee6586"),
    (bytes(32), bytes(12), 1,
     "9f07e7be5551387a98ba977c732d080dcb0f29a048e3656912c6533e32ee7aed"
     "29b721769ce64e43d57133b074d839d531ed1f28510afb45ace10a1f4b794d6f"),
    (bytes(31) + b"\x01", bytes(12), 1,
     "3aeb5224ecf849929b9d828db1ced4dd832025e8018b8160b82284f3c949aa5a"
     "8eca00bbb4a73bdad192b5c42f73f2fd4e273644c8b36125a64addeb006c13a0"),
]


def run_rfc_vectors() -> list[tuple[str, bool]]:
    results = []
    b = RFC8439_BLOCK
    results.append(("block 2.3.2", chacha20_block(b["key"], b["counter"], b["nonce"]) == b["keystream"]))
    e = RFC8439_ENCRYPT
    results.append(("encrypt 2.4.2", chacha20_xor(e["key"], e["nonce"], e["plaintext"], e["counter"]) == e["ciphertext"]))
    results.append(("decrypt 2.4.2", chacha20_xor(e["key"], e["nonce"], e["ciphertext"], e["counter"]) == e["plaintext"]))
    for i, (key, nonce, ctr, hexout) in enumerate(RFC8439_APPENDIX_BLOCKS, start=1):
        results.append((f"appendix A.1 #{i}", chacha20_block(key, ctr, nonce) == bytes.fromhex(hexout)))
    return results
