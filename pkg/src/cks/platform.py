"""Software stand-in for the TEE platform.

Provides what the enclave would otherwise get from hardware: sealing keys
bound to an enclave measurement, monotonic counters that survive restarts
independently of any sealed blob, a trusted clock with a source nonce, and a
quote authority whose public key clients pin as their trust anchor.

On-disk layout below ``<data_dir>/platform``::

    authority.key   raw Ed25519 private key of the quote authority
    seal_root.key   32-byte root secret for sealing-key derivation
    counters.bin    little-endian u64 counter values, one per counter id
    counters.assoc  per counter: 32-byte owner measurement + 16-byte nonce
    clock.state     mode, source nonce, ticks and wall time at last save
"""

from __future__ import annotations

import hashlib
import logging
import os
import secrets
import struct
import threading
import time
from pathlib import Path
from typing import NamedTuple

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import IntegrityFailure, SealMismatch, UnknownCounter

log = logging.getLogger(__name__)

REPORT_DATA_LEN = 64
MEASUREMENT_LEN = 32
SEAL_MAGIC = b"CKSS"
SEAL_FORMAT = 1
_SEAL_HEADER = struct.Struct(">4sB32s12s")
U64_MAX = 2**64 - 1


def atomic_write(path: Path, data: bytes) -> None:
    """Write-new, fsync, rename: readers see either the old or the new file."""
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    dir_fd = os.open(path.parent, os.O_RDONLY)
    try:
        os.fsync(dir_fd)
    finally:
        os.close(dir_fd)


class _Measurement(NamedTuple):
    digest: bytes


class EnclaveMeasurement(_Measurement):
    __slots__ = ()

    def __new__(cls, digest: bytes):
        if len(digest) != MEASUREMENT_LEN:
            raise ValueError("measurement must be 32 bytes")
        return super().__new__(cls, bytes(digest))

    def hex(self) -> str:
        return self.digest.hex()

    @classmethod
    def of(cls, *artifacts: bytes) -> "EnclaveMeasurement":
        h = hashlib.sha256(b"cks-measurement-v1")
        for blob in artifacts:
            h.update(struct.pack(">Q", len(blob)))
            h.update(blob)
        return cls(h.digest())


def measure_enclave() -> EnclaveMeasurement:
    """Measure the trusted code base: the enclave package and what it imports."""
    root = Path(__file__).resolve().parent
    files = sorted((root / "enclave").glob("*.py"))
    files += [root / name for name in ("channel.py", "sexp.py", "crypto.py", "errors.py")]
    artifacts = []
    for path in files:
        rel = path.relative_to(root).as_posix().encode()
        artifacts.append(rel + b"\0" + path.read_bytes())
    return EnclaveMeasurement.of(*artifacts)


def pad_report_data(data: bytes) -> bytes:
    if len(data) > REPORT_DATA_LEN:
        raise ValueError("report_data is at most 64 bytes")
    return data + b"\0" * (REPORT_DATA_LEN - len(data))


class Quote(NamedTuple):
    measurement: EnclaveMeasurement
    report_data: bytes
    authority_signature: bytes

    def signed_bytes(self) -> bytes:
        return self.measurement.digest + self.report_data

    def to_bytes(self) -> bytes:
        return self.measurement.digest + self.report_data + self.authority_signature

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Quote":
        if len(raw) < MEASUREMENT_LEN + REPORT_DATA_LEN:
            raise ValueError("quote too short")
        m = raw[:MEASUREMENT_LEN]
        rd = raw[MEASUREMENT_LEN : MEASUREMENT_LEN + REPORT_DATA_LEN]
        sig = raw[MEASUREMENT_LEN + REPORT_DATA_LEN :]
        return cls(EnclaveMeasurement(m), rd, sig)


class QuoteCheck(NamedTuple):
    ok: bool
    reason: str = "ok"

    def __bool__(self) -> bool:
        return self.ok


def verify_quote(quote: Quote, expected_measurement: EnclaveMeasurement, authority_public_key: Ed25519PublicKey | bytes) -> QuoteCheck:
    """Check the authority signature and the measurement. Never raises."""
    try:
        if isinstance(authority_public_key, (bytes, bytearray)):
            authority_public_key = Ed25519PublicKey.from_public_bytes(bytes(authority_public_key))
        if len(quote.report_data) != REPORT_DATA_LEN:
            return QuoteCheck(False, "bad_report_data")
        authority_public_key.verify(quote.authority_signature, quote.signed_bytes())
    except InvalidSignature:
        return QuoteCheck(False, "bad_signature")
    except (ValueError, TypeError):
        return QuoteCheck(False, "malformed")
    if quote.measurement != expected_measurement:
        return QuoteCheck(False, "measurement_mismatch")
    return QuoteCheck(True)


class CounterHandle(NamedTuple):
    counter_id: int


class TrustedTimestamp(NamedTuple):
    ticks: int
    source_nonce: bytes


class TrustedClock:
    """Whole-second clock with a source nonce.

    In ``manual`` mode ticks only move via :meth:`advance`, which makes every
    time-based test deterministic. Otherwise ticks follow the host's
    monotonic clock from the last persisted value.
    """

    _FMT = struct.Struct("<B16sQd")

    def __init__(self, path: Path, manual: bool = False):
        self._path = path
        self._lock = threading.Lock()
        self.manual = manual
        if path.exists():
            mode, nonce, ticks, wall = self._FMT.unpack(path.read_bytes())
            self._nonce = nonce
            if not manual and mode == 0:
                ticks += max(0, int(time.time() - wall))
            self._base = ticks
        else:
            self._nonce = secrets.token_bytes(16)
            self._base = 0
        self._mono = time.monotonic()
        self._save()

    def _ticks(self) -> int:
        if self.manual:
            return self._base
        return self._base + int(time.monotonic() - self._mono)

    def _save(self) -> None:
        data = self._FMT.pack(1 if self.manual else 0, self._nonce, self._ticks(), time.time())
        atomic_write(self._path, data)

    def read(self) -> TrustedTimestamp:
        with self._lock:
            return TrustedTimestamp(self._ticks(), self._nonce)

    def advance(self, seconds: int) -> None:
        if seconds < 0:
            raise ValueError("the clock cannot go backwards")
        with self._lock:
            self._base += int(seconds)
            self._save()

    def reset(self) -> None:
        """Model a platform clock reset: new source nonce, new reference point."""
        with self._lock:
            self._nonce = secrets.token_bytes(16)
            self._base = 0
            self._mono = time.monotonic()
            self._save()

    def persist(self) -> None:
        with self._lock:
            self._save()


class CounterStore:
    """Monotonic counters persisted outside any sealed blob."""

    _ASSOC = struct.Struct("<32s16s")

    def __init__(self, values_path: Path, assoc_path: Path):
        self._values_path = values_path
        self._assoc_path = assoc_path
        self._lock = threading.Lock()
        self._values: list[int] = []
        self._assoc: list[tuple[bytes, bytes]] = []
        if values_path.exists():
            raw = values_path.read_bytes()
            self._values = list(struct.unpack(f"<{len(raw) // 8}Q", raw))
        if assoc_path.exists():
            raw = assoc_path.read_bytes()
            self._assoc = [self._ASSOC.unpack_from(raw, i) for i in range(0, len(raw), self._ASSOC.size)]
        while len(self._assoc) < len(self._values):
            self._assoc.append((b"\0" * 32, b"\0" * 16))

    def _flush_values(self) -> None:
        atomic_write(self._values_path, struct.pack(f"<{len(self._values)}Q", *self._values))

    def _flush_assoc(self) -> None:
        atomic_write(self._assoc_path, b"".join(self._ASSOC.pack(*a) for a in self._assoc))

    def create(self, owner: EnclaveMeasurement) -> CounterHandle:
        with self._lock:
            self._values.append(0)
            self._assoc.append((owner.digest, b"\0" * 16))
            self._flush_assoc()
            self._flush_values()
            return CounterHandle(len(self._values) - 1)

    def owned_by(self, owner: EnclaveMeasurement) -> list[CounterHandle]:
        with self._lock:
            return [CounterHandle(i) for i, (o, _) in enumerate(self._assoc) if o == owner.digest]

    def _check(self, handle: CounterHandle) -> int:
        cid = handle.counter_id
        if not isinstance(cid, int) or not 0 <= cid < len(self._values):
            raise UnknownCounter(f"no counter {cid!r}")
        return cid

    def read(self, handle: CounterHandle) -> int:
        with self._lock:
            return self._values[self._check(handle)]

    def increment(self, handle: CounterHandle) -> int:
        with self._lock:
            cid = self._check(handle)
            if self._values[cid] >= U64_MAX:
                raise OverflowError("counter exhausted")
            self._values[cid] += 1
            self._flush_values()
            return self._values[cid]

    def associate(self, handle: CounterHandle, nonce: bytes) -> None:
        with self._lock:
            cid = self._check(handle)
            self._assoc[cid] = (self._assoc[cid][0], nonce)
            self._flush_assoc()

    def association(self, handle: CounterHandle) -> bytes:
        with self._lock:
            return self._assoc[self._check(handle)][1]


class Platform:
    """One simulated TEE-capable machine rooted at ``<data_dir>/platform``."""

    def __init__(self, data_dir: str | os.PathLike, manual_clock: bool = False):
        self.root = Path(data_dir) / "platform"
        self.root.mkdir(parents=True, exist_ok=True)
        self._authority = self._load_authority()
        self._seal_root = self._load_secret(self.root / "seal_root.key")
        self._seal_keys: dict[bytes, AESGCM] = {}
        self._seal_lock = threading.Lock()
        self.counters = CounterStore(self.root / "counters.bin", self.root / "counters.assoc")
        self.clock = TrustedClock(self.root / "clock.state", manual=manual_clock)

    # -- setup ------------------------------------------------------------

    def _load_secret(self, path: Path) -> bytes:
        if path.exists():
            return path.read_bytes()
        secret = secrets.token_bytes(32)
        atomic_write(path, secret)
        return secret

    def _load_authority(self) -> Ed25519PrivateKey:
        raw = self._load_secret(self.root / "authority.key")
        return Ed25519PrivateKey.from_private_bytes(raw)

    @property
    def authority_public_key(self) -> Ed25519PublicKey:
        return self._authority.public_key()

    def authority_public_bytes(self) -> bytes:
        return self.authority_public_key.public_bytes_raw()

    # -- sealing ----------------------------------------------------------

    def _seal_key(self, measurement: EnclaveMeasurement) -> AESGCM:
        with self._seal_lock:
            aead = self._seal_keys.get(measurement.digest)
            if aead is None:
                key = HKDF(hashes.SHA256(), 32, None, b"cks-seal-v1" + measurement.digest).derive(self._seal_root)
                aead = self._seal_keys[measurement.digest] = AESGCM(key)
            return aead

    def seal(self, state_bytes: bytes, measurement: EnclaveMeasurement) -> bytes:
        nonce = secrets.token_bytes(12)
        header = _SEAL_HEADER.pack(SEAL_MAGIC, SEAL_FORMAT, measurement.digest, nonce)
        return header + self._seal_key(measurement).encrypt(nonce, bytes(state_bytes), header)

    def unseal(self, blob: bytes, measurement: EnclaveMeasurement) -> bytes:
        blob = bytes(blob)
        if len(blob) < _SEAL_HEADER.size + 16:
            raise IntegrityFailure("sealed blob truncated")
        magic, fmt, sealed_for, nonce = _SEAL_HEADER.unpack_from(blob)
        header, body = blob[: _SEAL_HEADER.size], blob[_SEAL_HEADER.size :]
        if magic != SEAL_MAGIC or fmt != SEAL_FORMAT:
            raise IntegrityFailure("not a sealed blob")
        try:
            return self._seal_key(measurement).decrypt(nonce, body, header)
        except InvalidTag:
            pass
        if sealed_for != measurement.digest:
            # only a genuine blob for another identity is a mismatch; anything else is tampering
            try:
                self._seal_key(EnclaveMeasurement(sealed_for)).decrypt(nonce, body, header)
            except InvalidTag:
                raise IntegrityFailure("sealed blob failed authentication") from None
            raise SealMismatch("blob was sealed for a different enclave identity")
        raise IntegrityFailure("sealed blob failed authentication")

    # -- counters ---------------------------------------------------------

    def counter_create(self, owner: EnclaveMeasurement) -> CounterHandle:
        return self.counters.create(owner)

    def counter_read(self, handle: CounterHandle) -> int:
        return self.counters.read(handle)

    def counter_increment(self, handle: CounterHandle) -> int:
        return self.counters.increment(handle)

    # -- time -------------------------------------------------------------

    def trusted_time(self) -> TrustedTimestamp:
        return self.clock.read()

    def advance_clock(self, seconds: int) -> None:
        self.clock.advance(seconds)

    def reset_clock(self) -> None:
        self.clock.reset()

    # -- attestation ------------------------------------------------------

    def issue_quote(self, measurement: EnclaveMeasurement, report_data: bytes) -> Quote:
        rd = pad_report_data(bytes(report_data))
        sig = self._authority.sign(measurement.digest + rd)
        return Quote(measurement, rd, sig)

    def close(self) -> None:
        self.clock.persist()
