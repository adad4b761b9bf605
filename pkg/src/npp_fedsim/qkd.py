"""BB84 key exchange at the level of measurement statistics.

Each qubit is one of the four BB84 states. Measuring in the preparation basis
returns the prepared bit; measuring in the other basis returns a fair coin.
That is all the amplitude formalism contributes for these states, so no
state vectors are simulated.
"""

from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

RECTILINEAR = 0
DIAGONAL = 1
MIN_QUBITS = 64
DEFAULT_ABORT_THRESHOLD = 0.11


class KeyExhaustionError(RuntimeError):
    """Raised when a one-time pad would need more key bits than remain."""


class Decision(str, enum.Enum):
    ACCEPT = "accept"
    ABORT = "abort"


@dataclass(frozen=True)
class QubitFrame:
    bits: np.ndarray
    bases: np.ndarray

    def __post_init__(self):
        if self.bits.shape != self.bases.shape:
            raise ValueError("bits and bases must have equal length")


@dataclass(frozen=True)
class SiftedKey:
    bits: np.ndarray
    source_indices: np.ndarray

    def __len__(self):
        return len(self.bits)


@dataclass(frozen=True)
class QberEstimate:
    errors: int
    total: int

    def __post_init__(self):
        if self.total <= 0:
            raise ValueError("QBER needs at least one compared bit")
        if not 0 <= self.errors <= self.total:
            raise ValueError("error count must lie in [0, total]")

    @property
    def ratio(self) -> float:
        return self.errors / self.total


@dataclass
class EvePolicy:
    intercept_fraction: float = 0.0
    # Eve's measured bit per raw position, -1 where she did not intercept
    records: np.ndarray | None = None

    def __post_init__(self):
        if not 0.0 <= self.intercept_fraction <= 1.0:
            raise ValueError("intercept_fraction must lie in [0, 1]")


@dataclass
class ExchangeResult:
    alice_key: SiftedKey
    bob_key: SiftedKey
    estimate: QberEstimate
    alice: QubitFrame
    bob_bases: np.ndarray
    sifted_indices: np.ndarray
    eve: EvePolicy

    def __iter__(self):
        return iter((self.alice_key, self.bob_key, self.estimate))

    @property
    def sifted_fraction(self) -> float:
        return len(self.sifted_indices) / len(self.alice.bits)


def qber(errors: int, total: int) -> float:
    if total <= 0:
        raise ValueError("QBER undefined for zero compared bits")
    return errors / total


def bb84_exchange(n_qubits: int, eve: EvePolicy | None = None, channel_flip_prob: float = 0.0,
                  rng: np.random.Generator | None = None) -> ExchangeResult:
    if n_qubits < MIN_QUBITS:
        raise ValueError(f"need at least {MIN_QUBITS} qubits for a usable QBER estimate, got {n_qubits}")
    if not 0.0 <= channel_flip_prob <= 1.0:
        raise ValueError("channel_flip_prob must lie in [0, 1]")
    eve = EvePolicy() if eve is None else eve
    rng = np.random.default_rng() if rng is None else rng

    a_bits = rng.integers(0, 2, n_qubits, dtype=np.int8)
    a_bases = rng.integers(0, 2, n_qubits, dtype=np.int8)

    # what travels down the fibre: (bit, basis) of the state last prepared
    sent_bits = a_bits.copy()
    sent_bases = a_bases.copy()

    intercepted = rng.random(n_qubits) < eve.intercept_fraction
    e_bases = rng.integers(0, 2, n_qubits, dtype=np.int8)
    e_coins = rng.integers(0, 2, n_qubits, dtype=np.int8)
    e_bits = np.where(e_bases == a_bases, a_bits, e_coins).astype(np.int8)
    sent_bits = np.where(intercepted, e_bits, sent_bits).astype(np.int8)
    sent_bases = np.where(intercepted, e_bases, sent_bases).astype(np.int8)
    eve.records = np.where(intercepted, e_bits, -1).astype(np.int8)

    flips = rng.random(n_qubits) < channel_flip_prob
    sent_bits = sent_bits ^ flips.astype(np.int8)

    b_bases = rng.integers(0, 2, n_qubits, dtype=np.int8)
    b_coins = rng.integers(0, 2, n_qubits, dtype=np.int8)
    b_bits = np.where(b_bases == sent_bases, sent_bits, b_coins).astype(np.int8)

    sifted = np.flatnonzero(a_bases == b_bases)
    if len(sifted) < 2:
        raise ValueError("too few sifted bits to estimate QBER")
    order = rng.permutation(len(sifted))
    n_sacrifice = len(sifted) // 2
    sacrificed = np.sort(sifted[order[:n_sacrifice]])
    kept = np.sort(sifted[order[n_sacrifice:]])

    errors = int(np.count_nonzero(a_bits[sacrificed] != b_bits[sacrificed]))
    estimate = QberEstimate(errors=errors, total=len(sacrificed))
    return ExchangeResult(
        alice_key=SiftedKey(a_bits[kept].copy(), kept),
        bob_key=SiftedKey(b_bits[kept].copy(), kept),
        estimate=estimate,
        alice=QubitFrame(a_bits, a_bases),
        bob_bases=b_bases,
        sifted_indices=sifted,
        eve=eve,
    )


def keygate(estimate: QberEstimate, abort_threshold: float = DEFAULT_ABORT_THRESHOLD) -> Decision:
    return Decision.ABORT if estimate.ratio > abort_threshold else Decision.ACCEPT


def reconcile(alice: SiftedKey, bob: SiftedKey, qber_ratio: float,
              rng: np.random.Generator) -> tuple[SiftedKey, SiftedKey]:
    """Stand-in for error correction plus privacy amplification.

    Discards ``ceil(2 * qber * len)`` positions chosen at random (the bits
    revealed while correcting) and sets Bob's survivors to Alice's values.
    """
    n = len(alice)
    drop = min(n, math.ceil(2.0 * qber_ratio * n)) if qber_ratio > 0 else 0
    keep = np.sort(rng.permutation(n)[drop:]) if drop else np.arange(n)
    a = SiftedKey(alice.bits[keep].copy(), alice.source_indices[keep])
    return a, SiftedKey(a.bits.copy(), a.source_indices.copy())


def eve_information(alice_bits, eve_records) -> float:
    """Plug-in mutual information (bits) between Alice's bits and Eve's records.

    Positions Eve did not intercept (record ``-1``) contribute an independent
    uniform symbol: half a count to each of Eve's two values.
    """
    a = np.asarray(alice_bits).astype(np.int64)
    e = np.asarray(eve_records).astype(np.int64)
    if a.shape != e.shape:
        raise ValueError("alice_bits and eve_records must be aligned")
    if a.size == 0:
        return 0.0
    # doubled integer counts keep the half-count contributions exact
    joint = np.zeros((2, 2), dtype=np.int64)
    seen = e >= 0
    np.add.at(joint, (a[seen], e[seen]), 2)
    for bit in (0, 1):
        unseen = int(np.count_nonzero((~seen) & (a == bit)))
        joint[bit, 0] += unseen
        joint[bit, 1] += unseen
    total = int(joint.sum())
    rows = joint.sum(axis=1)
    cols = joint.sum(axis=0)
    info = 0.0
    for i in range(2):
        for j in range(2):
            c = int(joint[i, j])
            if c == 0:
                continue
            info += c / total * math.log2((c * total) / (int(rows[i]) * int(cols[j])))
    return min(1.0, max(0.0, info))


def sifted_eve_information(result: ExchangeResult) -> float:
    idx = result.sifted_indices
    return eve_information(result.alice.bits[idx], result.eve.records[idx])


@dataclass
class KeyMaterial:
    """Pad bits with a consumption offset that only moves forward."""

    bits: np.ndarray
    consumed: int = 0
    history: list = field(default_factory=list, repr=False)

    @classmethod
    def from_sifted(cls, key: SiftedKey) -> KeyMaterial:
        return cls(np.asarray(key.bits, dtype=np.uint8).copy())

    @classmethod
    def from_bytes(cls, raw: bytes) -> KeyMaterial:
        return cls(np.unpackbits(np.frombuffer(raw, np.uint8)))

    @property
    def remaining(self) -> int:
        return len(self.bits) - self.consumed

    def take(self, nbits: int) -> np.ndarray:
        if nbits > self.remaining:
            raise KeyExhaustionError(f"need {nbits} key bits, only {self.remaining} left")
        out = self.bits[self.consumed:self.consumed + nbits]
        self.consumed += nbits
        self.history.append(self.consumed)
        return out


def _pad(message: bytes, key: KeyMaterial) -> bytes:
    nbits = len(message) * 8
    pad = np.packbits(key.take(nbits).astype(np.uint8))
    return (np.frombuffer(message, np.uint8) ^ pad).tobytes()


def otp_encrypt(message: bytes, key: KeyMaterial) -> bytes:
    return _pad(message, key)


def otp_decrypt(ciphertext: bytes, key: KeyMaterial) -> bytes:
    return _pad(ciphertext, key)


def derive_chacha_key(key: KeyMaterial) -> bytes:
    """Consume 256 key bits and hash them into a 32-byte ChaCha20 key."""
    bits = key.take(256).astype(np.uint8)
    return hashlib.sha256(np.packbits(bits).tobytes()).digest()


def qubits_for_key_bits(key_bits: int, abort_threshold: float = DEFAULT_ABORT_THRESHOLD) -> int:
    """Qubits needed for ``key_bits`` of pad in the worst accepted case.

    Sifting keeps ~1/2, sacrifice keeps 1/2 of that and reconciliation can drop
    a further ``2 * abort_threshold``; a 10% margin absorbs sampling noise.
    """
    usable = 0.25 * max(1e-9, 1.0 - 2.0 * abort_threshold)
    return max(MIN_QUBITS, math.ceil(key_bits / usable * 1.1))
