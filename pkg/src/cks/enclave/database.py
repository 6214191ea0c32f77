"""The enclave's key database and its sealed serialization.

The serialized form is a single canonical S-expression. Integers are decimal
atoms; an empty atom stands for "unset". RSA keys are stored as ``(e, p, q)``
and P-256 keys as the private scalar, which keeps a user with one RSA-3072 key
around 600-700 bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .. import crypto, sexp
from ..errors import DecodeError
from .passwords import Verifier
from .policy import DelegationSection, KeyUsagePolicy
from .ratelimit import RateLimitState

FORMAT_TAG = b"cks-db-1"


@dataclass
class UserRecord:
    uid: str
    pswd_verifier: Verifier
    reset_verifier: Verifier
    backoff: RateLimitState = field(default_factory=RateLimitState)


@dataclass
class KeyRecord:
    key_id: bytes
    algorithm: str
    private_material: list[bytes]
    policy: KeyUsagePolicy
    _key: object = field(default=None, repr=False, compare=False)

    def __repr__(self) -> str:
        return f"KeyRecord(key_id={self.key_id.hex()}, algorithm={self.algorithm}, policy={self.policy})"

    @property
    def private_key(self):
        if self._key is None:
            self._key = crypto.from_compact(self.algorithm, self.private_material)
        return self._key

    @property
    def public_der(self) -> bytes:
        return crypto.public_der(self.private_key)


@dataclass
class AuditEntry:
    entry_seq: int
    timestamp: int
    key_id: bytes
    requesting_uid: str
    operation: str
    input_digest: bytes
    output_digest: bytes | None = None

    @property
    def completed(self) -> bool:
        return self.output_digest is not None


@dataclass
class KeyDatabase:
    counter_id: int
    time_nonce: bytes
    time_offset: int = 0
    version: int = 0
    version_nonce: bytes = b"\0" * 16
    entry_counter: int = 0
    users: dict[str, UserRecord] = field(default_factory=dict)
    keys: dict[bytes, KeyRecord] = field(default_factory=dict)
    audit_log: list[AuditEntry] = field(default_factory=list)
    # deleted key ids, mapped to their former owner so audit stays owner-only
    tombstones: dict[bytes, str] = field(default_factory=dict)
    _by_key: dict[bytes, list[AuditEntry]] = field(default_factory=dict, repr=False)

    def append_audit(self, entry: AuditEntry) -> None:
        self.audit_log.append(entry)
        self._by_key.setdefault(entry.key_id, []).append(entry)

    def audit_for(self, key_id: bytes) -> list[AuditEntry]:
        return self._by_key.get(key_id, [])

    # -- serialization ----------------------------------------------------

    def to_bytes(self) -> bytes:
        return sexp.encode(
            [
                FORMAT_TAG,
                [
                    _i(self.counter_id),
                    self.time_nonce,
                    _i(self.time_offset),
                    _i(self.version),
                    self.version_nonce,
                    _i(self.entry_counter),
                ],
                [_user(u) for u in self.users.values()],
                [_key(k) for k in self.keys.values()],
                [_entry(e) for e in self.audit_log],
                [[k, uid.encode()] for k, uid in self.tombstones.items()],
            ]
        )

    @classmethod
    def from_bytes(cls, raw: bytes) -> "KeyDatabase":
        try:
            tree = sexp.decode(raw)
            tag, header, users, keys, log, tombstones = tree
            if tag != FORMAT_TAG:
                raise DecodeError("unknown database format")
            counter_id, time_nonce, offset, version, version_nonce, entry_counter = header
            db = cls(
                counter_id=_int(counter_id),
                time_nonce=time_nonce,
                time_offset=_int(offset),
                version=_int(version),
                version_nonce=version_nonce,
                entry_counter=_int(entry_counter),
            )
            for item in users:
                u = _parse_user(item)
                db.users[u.uid] = u
            for item in keys:
                k = _parse_key(item)
                db.keys[k.key_id] = k
            for item in log:
                db.append_audit(_parse_entry(item))
            db.tombstones = {k: uid.decode() for k, uid in tombstones}
            return db
        except (ValueError, TypeError, struct.error) as exc:
            raise DecodeError(f"corrupt database: {exc}") from exc


def _i(n: int) -> bytes:
    return sexp.int_atom(n)


def _int(raw: bytes) -> int:
    return sexp.atom_int(raw)


def _opt(n: int | None) -> bytes:
    return b"" if n is None else sexp.int_atom(n)


def _opt_int(raw: bytes) -> int | None:
    return None if raw == b"" else sexp.atom_int(raw)


def _ops(ops: frozenset[str]) -> bytes:
    return ",".join(sorted(ops)).encode()


def _parse_ops(raw: bytes) -> frozenset[str]:
    return frozenset(raw.decode().split(",")) if raw else frozenset()


def _user(u: UserRecord) -> list:
    b = u.backoff
    return [
        u.uid.encode(),
        u.pswd_verifier.to_bytes(),
        u.reset_verifier.to_bytes(),
        _i(b.consecutive_failures),
        _i(b.locked_until),
        _i(b.base_lockout_s),
    ]


def _parse_user(item: list) -> UserRecord:
    uid, pv, rv, failures, locked, base = item
    return UserRecord(
        uid.decode(),
        Verifier.from_bytes(pv),
        Verifier.from_bytes(rv),
        RateLimitState(_int(failures), _int(locked), _int(base)),
    )


def _policy(p: KeyUsagePolicy) -> list:
    return [
        p.owner_uid.encode(),
        _ops(p.permitted_ops),
        _opt(p.expiry),
        _opt(p.remaining_uses),
        [[s.delegatee_uid.encode(), _ops(s.permitted_ops), _opt(s.expiry), _opt(s.remaining_uses)] for s in p.delegations],
    ]


def _parse_policy(item: list) -> KeyUsagePolicy:
    owner, ops, expiry, remaining, sections = item
    return KeyUsagePolicy(
        owner.decode(),
        _parse_ops(ops),
        _opt_int(expiry),
        _opt_int(remaining),
        [DelegationSection(d.decode(), _parse_ops(o), _opt_int(e), _opt_int(r)) for d, o, e, r in sections],
    )


def _key(k: KeyRecord) -> list:
    return [k.key_id, k.algorithm.encode(), list(k.private_material), _policy(k.policy)]


def _parse_key(item: list) -> KeyRecord:
    key_id, alg, material, policy = item
    return KeyRecord(key_id, alg.decode(), list(material), _parse_policy(policy))


def _entry(e: AuditEntry) -> list:
    out = [_i(e.entry_seq), _i(e.timestamp), e.key_id, e.requesting_uid.encode(), e.operation.encode(), e.input_digest]
    if e.output_digest is not None:
        out.append(e.output_digest)
    return out


def _parse_entry(item: list) -> AuditEntry:
    seq, ts, key_id, uid, op, inp = item[:6]
    out = item[6] if len(item) > 6 else None
    return AuditEntry(_int(seq), _int(ts), key_id, uid.decode(), op.decode(), inp, out)
