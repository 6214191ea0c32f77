"""Client library: attested connect plus one method per key-store operation."""

from __future__ import annotations

import hashlib
from typing import NamedTuple

from ..channel import Session, WireResponse, client_handshake, open_response, parse_quote_body, seal_request
from ..errors import SessionExpired, error_from_code
from ..sexp import CanonicalMessage, atom_int, decode
from .config import ClientConfig, TrustAnchor
from .transport import HttpTransport, Transport


class KeyInfo(NamedTuple):
    key_id: str
    algorithm: str
    public_key: bytes


class AuditRow(NamedTuple):
    seq: int
    time: int
    key_id: str
    uid: str
    op: str
    input_digest: bytes
    output_digest: bytes | None

    @property
    def completed(self) -> bool:
        return self.output_digest is not None


def _audit_row(raw: bytes) -> AuditRow:
    fields = {t.decode(): v for t, v in decode(raw)}
    return AuditRow(
        seq=atom_int(fields["seq"]),
        time=atom_int(fields["time"]),
        key_id=fields["key_id"].decode(),
        uid=fields["uid"].decode(),
        op=fields["op"].decode(),
        input_digest=fields["input"],
        output_digest=fields.get("output"),
    )


def _policy_fields(ops, expires_in, expires_at, uses) -> list[tuple[str, object]]:
    out: list[tuple[str, object]] = [("op", o) for o in ops or ()]
    out += [("expires_in", expires_in), ("expires_at", expires_at), ("uses", uses)]
    return out


class KeyStoreClient:
    """A verified session with one key-store enclave.

    ``connect`` checks the quote against the pinned trust anchor before any
    request is built, so credentials are never sent to an unverified peer.
    """

    def __init__(self, transport: Transport, anchor: TrustAnchor):
        self.transport = transport
        self.anchor = anchor
        self.session: Session | None = None

    @classmethod
    def from_config(cls, config: ClientConfig, transport: Transport | None = None) -> "KeyStoreClient":
        return cls(transport or HttpTransport(config.server_url), config.trust_anchor)

    def connect(self) -> "KeyStoreClient":
        enclave_public, quote = parse_quote_body(self.transport.get("/v1/quote"))
        self.session = client_handshake(
            enclave_public, quote, self.anchor.expected_measurement, self.anchor.authority_public_key
        )
        return self

    def close(self) -> None:
        self.transport.close()

    def __enter__(self) -> "KeyStoreClient":
        if self.session is None:
            self.connect()
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def call(self, operation: str, *fields: tuple[str, object]) -> CanonicalMessage:
        """Send one request; returns the ``ok`` message or raises the enclave's error."""
        if self.session is None:
            self.connect()
        msg = CanonicalMessage.build(operation, *fields)
        for attempt in (0, 1):
            wire = seal_request(self.session, msg)
            try:
                raw = self.transport.post("/v1/process", wire.to_bytes())
            except SessionExpired:
                # rejected before decryption, so resending is safe
                if attempt:
                    raise
                self.connect()
                continue
            break
        reply = open_response(self.session, WireResponse.from_bytes(raw), wire.message_seq)
        if reply.operation == "error":
            raise error_from_code(
                reply.get_str("code", "unknown"), reply.get_str("message", ""), reply.get_int("retry_after")
            )
        return reply

    # -- Table of operations ----------------------------------------------

    def create_user(self, uid: str, password: bytes, reset_password: bytes, base_lockout: int | None = None) -> None:
        self.call("create_user", ("uid", uid), ("new_pswd", password), ("new_reset_pswd", reset_password), ("base_lockout", base_lockout))

    def reset_password(self, uid: str, reset_password: bytes, new_password: bytes) -> None:
        self.call("pswd_reset", ("uid", uid), ("reset_pswd", reset_password), ("new_pswd", new_password))

    def gen_key(self, uid: str, password: bytes, algorithm: str, ops=None, expires_in=None, expires_at=None, uses=None) -> KeyInfo:
        reply = self.call(
            "gen_key", ("uid", uid), ("pswd", password), ("algorithm", algorithm), *_policy_fields(ops, expires_in, expires_at, uses)
        )
        return KeyInfo(reply.get_str("key_id"), reply.get_str("algorithm"), reply.require("public_key"))

    def import_key(self, uid: str, password: bytes, key_data: bytes, ops=None, expires_in=None, expires_at=None, uses=None) -> KeyInfo:
        reply = self.call(
            "import_key", ("uid", uid), ("pswd", password), ("key_data", key_data), *_policy_fields(ops, expires_in, expires_at, uses)
        )
        return KeyInfo(reply.get_str("key_id"), reply.get_str("algorithm"), reply.require("public_key"))

    def sign(self, uid: str, password: bytes, key_id: str, msg_hash: bytes) -> bytes:
        reply = self.call("pksign", ("uid", uid), ("pswd", password), ("key_id", key_id), ("msg_hash", msg_hash))
        return reply.require("signature")

    def sign_data(self, uid: str, password: bytes, key_id: str, data: bytes) -> bytes:
        return self.sign(uid, password, key_id, hashlib.sha256(data).digest())

    def decrypt(self, uid: str, password: bytes, key_id: str, enc_msg: bytes) -> bytes:
        reply = self.call("pkdecrypt", ("uid", uid), ("pswd", password), ("key_id", key_id), ("enc_msg", enc_msg))
        return reply.require("decryption")

    def set_policy(self, uid: str, password: bytes, key_id: str, ops, expires_in=None, expires_at=None, uses=None) -> list[str]:
        reply = self.call(
            "set_policy", ("uid", uid), ("pswd", password), ("key_id", key_id), *_policy_fields(ops, expires_in, expires_at, uses)
        )
        return [d.decode() for d in reply.get_all("dropped")]

    def delegate(self, uid: str, password: bytes, key_id: str, delegatees, ops=None, expires_in=None, expires_at=None, uses=None) -> None:
        self.call(
            "delegate",
            ("uid", uid),
            ("pswd", password),
            ("key_id", key_id),
            *[("delegatee", d) for d in delegatees],
            *_policy_fields(ops, expires_in, expires_at, uses),
        )

    def undelegate(self, uid: str, password: bytes, key_id: str, delegatees) -> None:
        self.call("undelegate", ("uid", uid), ("pswd", password), ("key_id", key_id), *[("delegatee", d) for d in delegatees])

    def audit(self, uid: str, password: bytes, key_id: str, start: int | None = None, end: int | None = None) -> list[AuditRow]:
        reply = self.call("audit", ("uid", uid), ("pswd", password), ("key_id", key_id), ("from", start), ("to", end))
        return [_audit_row(r) for r in reply.get_all("entry")]

    def delete_key(self, uid: str, password: bytes, key_id: str) -> None:
        self.call("delete_key", ("uid", uid), ("pswd", password), ("key_id", key_id))


def connect(config: ClientConfig, transport: Transport | None = None) -> KeyStoreClient:
    """Fetch and verify the quote, then return a client with a live session."""
    return KeyStoreClient.from_config(config, transport).connect()
