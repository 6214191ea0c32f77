"""Attestation-bound key agreement and the AEAD session layer.

The enclave publishes an X25519 public key together with a quote whose
report data is ``SHA-256(enclave_public)`` zero-padded to 64 bytes. A client
checks the quote, picks its own ephemeral key and can send its first
encrypted request in the same message as its public key.

Wire layouts (big-endian)::

    request:  [1B version][32B client_public][8B seq][12B nonce][4B len][ciphertext]
    response: [1B version][8B seq][12B nonce][4B len][ciphertext]

Requests use random nonces with ``version || client_public || seq`` as
associated data. Responses echo the request's seq, use the nonce
``0x00000000 || seq`` and ``version || seq`` as associated data.
"""

from __future__ import annotations

import hashlib
import os
import struct
import threading
from typing import NamedTuple

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import (
    BindingMismatch,
    DecodeError,
    DecryptFailure,
    MalformedPoint,
    QuoteInvalid,
    ReplayDetected,
    SessionExpired,
    VersionMismatch,
)
from .platform import EnclaveMeasurement, Quote, pad_report_data, verify_quote
from .sexp import CanonicalMessage, decode_canonical, encode_canonical

PROTOCOL_VERSION = 1
KDF_CONTEXT = b"cks-session-v1"
SESSION_LIFETIME_S = 24 * 3600
PUBLIC_LEN = 32

_REQ = struct.Struct(">B32sQ12sI")
_RESP = struct.Struct(">BQ12sI")
_QUOTE_HDR = struct.Struct(">B32sH")


def binding_for(enclave_public: bytes) -> bytes:
    return pad_report_data(hashlib.sha256(enclave_public).digest())


def _raw_public(key: X25519PrivateKey) -> bytes:
    return key.public_key().public_bytes_raw()


def derive_session_key(own_private: X25519PrivateKey, peer_public: bytes, enclave_public: bytes, client_public: bytes) -> bytes:
    if len(peer_public) != PUBLIC_LEN:
        raise MalformedPoint("public key must be 32 bytes")
    try:
        raw = own_private.exchange(X25519PublicKey.from_public_bytes(peer_public))
    except ValueError as exc:  # low-order point gives an all-zero secret
        raise MalformedPoint("public key is a low-order point") from exc
    return HKDF(hashes.SHA256(), 32, None, KDF_CONTEXT + enclave_public + client_public).derive(raw)


class EnclaveKeyBundle(NamedTuple):
    dh_private: X25519PrivateKey
    dh_public: bytes
    quote: Quote

    def __repr__(self) -> str:
        return f"EnclaveKeyBundle(dh_public={self.dh_public.hex()})"

    def quote_body(self) -> bytes:
        """Body of ``GET /v1/quote``."""
        q = self.quote.to_bytes()
        return _QUOTE_HDR.pack(PROTOCOL_VERSION, self.dh_public, len(q)) + q


def parse_quote_body(body: bytes) -> tuple[bytes, Quote]:
    if len(body) < _QUOTE_HDR.size:
        raise QuoteInvalid("quote response truncated")
    version, enclave_public, qlen = _QUOTE_HDR.unpack_from(body)
    if version != PROTOCOL_VERSION:
        raise VersionMismatch(f"unsupported protocol version {version}")
    raw = body[_QUOTE_HDR.size :]
    if len(raw) != qlen:
        raise QuoteInvalid("quote length mismatch")
    try:
        return enclave_public, Quote.from_bytes(raw)
    except ValueError as exc:
        raise QuoteInvalid(str(exc)) from exc


def enclave_keygen(platform, measurement: EnclaveMeasurement) -> EnclaveKeyBundle:
    priv = X25519PrivateKey.generate()
    pub = _raw_public(priv)
    quote = platform.issue_quote(measurement, binding_for(pub))
    return EnclaveKeyBundle(priv, pub, quote)


class Session:
    """One end of an attested channel: the derived key plus sequence state."""

    __slots__ = ("shared_key", "client_public", "enclave_public", "send_seq", "recv_seq", "created_at", "lock", "_aead")

    def __init__(
        self,
        shared_key: bytes,
        client_public: bytes,
        enclave_public: bytes,
        send_seq: int = 1,
        recv_seq: int = 0,
        created_at: int = 0,
    ):
        self.shared_key = shared_key
        self.client_public = client_public
        self.enclave_public = enclave_public
        self.send_seq = send_seq
        self.recv_seq = recv_seq
        self.created_at = created_at
        self.lock = threading.Lock()
        self._aead = AESGCM(shared_key)

    def __repr__(self) -> str:
        return f"Session(client_public={self.client_public.hex()[:16]}..., send_seq={self.send_seq}, recv_seq={self.recv_seq})"


def client_handshake(
    enclave_public: bytes,
    quote: Quote,
    expected_measurement: EnclaveMeasurement,
    authority_pk,
    client_private: X25519PrivateKey | None = None,
) -> Session:
    check = verify_quote(quote, expected_measurement, authority_pk)
    if not check:
        raise QuoteInvalid(f"quote rejected: {check.reason}")
    if quote.report_data != binding_for(enclave_public):
        raise BindingMismatch("enclave public key is not bound by the quote")
    priv = client_private or X25519PrivateKey.generate()
    client_public = _raw_public(priv)
    key = derive_session_key(priv, enclave_public, enclave_public, client_public)
    return Session(key, client_public, enclave_public)


def derive_enclave_session(bundle: EnclaveKeyBundle, client_public: bytes, now: int = 0) -> Session:
    key = derive_session_key(bundle.dh_private, client_public, bundle.dh_public, client_public)
    return Session(key, client_public, bundle.dh_public, created_at=now)


class WireRequest(NamedTuple):
    protocol_version: int
    client_public: bytes
    message_seq: int
    aead_nonce: bytes
    ciphertext: bytes

    def associated_data(self) -> bytes:
        return struct.pack(">B32sQ", self.protocol_version, self.client_public, self.message_seq)

    def to_bytes(self) -> bytes:
        hdr = _REQ.pack(self.protocol_version, self.client_public, self.message_seq, self.aead_nonce, len(self.ciphertext))
        return hdr + self.ciphertext

    @classmethod
    def from_bytes(cls, raw: bytes) -> "WireRequest":
        if len(raw) < _REQ.size:
            raise DecodeError("request shorter than header")
        version, pub, seq, nonce, n = _REQ.unpack_from(raw)
        if len(raw) != _REQ.size + n:
            raise DecodeError("ciphertext length mismatch")
        return cls(version, pub, seq, nonce, bytes(raw[_REQ.size :]))


class WireResponse(NamedTuple):
    protocol_version: int
    message_seq: int
    aead_nonce: bytes
    ciphertext: bytes

    def associated_data(self) -> bytes:
        return struct.pack(">BQ", self.protocol_version, self.message_seq)

    def to_bytes(self) -> bytes:
        return _RESP.pack(self.protocol_version, self.message_seq, self.aead_nonce, len(self.ciphertext)) + self.ciphertext

    @classmethod
    def from_bytes(cls, raw: bytes) -> "WireResponse":
        if len(raw) < _RESP.size:
            raise DecodeError("response shorter than header")
        version, seq, nonce, n = _RESP.unpack_from(raw)
        if len(raw) != _RESP.size + n:
            raise DecodeError("ciphertext length mismatch")
        return cls(version, seq, nonce, bytes(raw[_RESP.size :]))


def seal_request(session: Session, msg: CanonicalMessage) -> WireRequest:
    with session.lock:
        seq = session.send_seq
        session.send_seq += 1
    nonce = os.urandom(12)
    draft = WireRequest(PROTOCOL_VERSION, session.client_public, seq, nonce, b"")
    ct = session._aead.encrypt(nonce, encode_canonical(msg), draft.associated_data())
    return WireRequest(PROTOCOL_VERSION, session.client_public, seq, nonce, ct)


def open_request(session: Session, wire: WireRequest) -> CanonicalMessage:
    if wire.protocol_version != PROTOCOL_VERSION:
        raise VersionMismatch(f"unsupported protocol version {wire.protocol_version}")
    with session.lock:
        if wire.message_seq <= session.recv_seq:
            raise ReplayDetected(f"sequence {wire.message_seq} already seen")
        try:
            plain = session._aead.decrypt(wire.aead_nonce, wire.ciphertext, wire.associated_data())
        except InvalidTag:
            raise DecryptFailure("request failed authentication") from None
        session.recv_seq = wire.message_seq
    return decode_canonical(plain)


def response_nonce(seq: int) -> bytes:
    return b"\0\0\0\0" + struct.pack(">Q", seq)


def seal_response(session: Session, seq: int, msg: CanonicalMessage) -> WireResponse:
    nonce = response_nonce(seq)
    draft = WireResponse(PROTOCOL_VERSION, seq, nonce, b"")
    ct = session._aead.encrypt(nonce, encode_canonical(msg), draft.associated_data())
    return WireResponse(PROTOCOL_VERSION, seq, nonce, ct)


def open_response(session: Session, wire: WireResponse, expected_seq: int) -> CanonicalMessage:
    if wire.protocol_version != PROTOCOL_VERSION:
        raise VersionMismatch(f"unsupported protocol version {wire.protocol_version}")
    if wire.message_seq != expected_seq or wire.aead_nonce != response_nonce(expected_seq):
        raise ReplayDetected("response does not answer the pending request")
    try:
        plain = session._aead.decrypt(wire.aead_nonce, wire.ciphertext, wire.associated_data())
    except InvalidTag:
        raise DecryptFailure("response failed authentication") from None
    return decode_canonical(plain)


class SessionTable:
    """Enclave-side sessions keyed by client public key.

    Sessions older than ``lifetime`` ticks are retired; a retired key stays
    blocked for the life of this bundle so old transcripts cannot be replayed
    against a fresh session state.
    """

    def __init__(self, bundle: EnclaveKeyBundle, lifetime: int = SESSION_LIFETIME_S):
        self.bundle = bundle
        self.lifetime = lifetime
        self._sessions: dict[bytes, Session] = {}
        self._retired: set[bytes] = set()
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._sessions)

    def sweep(self, now: int) -> int:
        with self._lock:
            stale = [k for k, s in self._sessions.items() if now - s.created_at >= self.lifetime]
            for k in stale:
                del self._sessions[k]
                self._retired.add(k)
        return len(stale)

    def get(self, client_public: bytes, now: int) -> Session:
        with self._lock:
            if client_public in self._retired:
                raise SessionExpired("session expired, run the handshake again")
            session = self._sessions.get(client_public)
            if session is not None and now - session.created_at >= self.lifetime:
                del self._sessions[client_public]
                self._retired.add(client_public)
                raise SessionExpired("session expired, run the handshake again")
        if session is None:
            # key agreement outside the table lock; first writer wins
            fresh = derive_enclave_session(self.bundle, client_public, now)
            with self._lock:
                session = self._sessions.setdefault(client_public, fresh)
        return session
