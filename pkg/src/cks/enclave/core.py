"""The trusted core: lifecycle, authentication and the key operations.

``Enclave`` exposes the three entry points a host may call (``initialize``,
``process``, ``shutdown``) plus ``checkpoint``, a seal-without-stop used for
periodic persistence. Everything else happens inside ``process``.

Rollback discipline: every seal bumps the platform monotonic counter and
stores the new value plus a fresh nonce both in the blob and in the
counter's association slot. ``initialize`` accepts only a blob matching both,
then bumps the counter again before serving, so no blob sealed before that
point can ever be loaded again. An authentication failure seals immediately,
so back-off progress cannot be erased by crashing the host and restoring the
previous blob.
"""

from __future__ import annotations

import enum
import hashlib
import logging
import os
import threading
from collections import OrderedDict
from typing import Callable

from .. import crypto
from ..channel import SessionTable, enclave_keygen, open_request, seal_response, WireRequest
from ..errors import (
    AuthFailed,
    ClockTampered,
    DecodeError,
    EnclaveError,
    EnclaveFailed,
    InvalidRange,
    MalformedRequest,
    RateLimited,
    RefusedNotServing,
    RollbackDetected,
    UidTaken,
    UnknownDelegatee,
    UnknownKey,
    UnsupportedAlgorithm,
    PolicyInvalid,
    WeakInput,
    CKSError,
)
from ..platform import CounterHandle, EnclaveMeasurement, Platform, measure_enclave
from ..sexp import CanonicalMessage, encode, pairs
from . import policy as pol
from .database import AuditEntry, KeyDatabase, KeyRecord, UserRecord
from .passwords import MAX_PASSWORD_LEN, PasswordHasher
from .ratelimit import MAX_LOCKOUT_S, RateLimitState, check_rate_limit, record_failure, record_success

log = logging.getLogger(__name__)

MAX_UID_LEN = 64
KEY_ID_LEN = 32
# unknown uids tracked for back-off; memory only, oldest evicted first
MAX_PHANTOMS = 4096
OPERATIONS = (
    "create_user",
    "pswd_reset",
    "gen_key",
    "import_key",
    "pksign",
    "pkdecrypt",
    "set_policy",
    "delegate",
    "undelegate",
    "audit",
    "delete_key",
)


class State(enum.Enum):
    UNINITIALIZED = "uninitialized"
    SERVING = "serving"
    STOPPED = "stopped"
    FAILED = "failed"


class InjectedCrash(CKSError):
    """Raised by a fault hook to abort a request at a chosen point."""

    code = "enclave_crashed"


def _digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def error_message(err: CKSError) -> CanonicalMessage:
    fields = [("code", err.code), ("message", err.message)]
    if isinstance(err, RateLimited):
        fields.append(("retry_after", err.retry_after))
    return CanonicalMessage.build("error", *fields)


class Enclave:
    def __init__(
        self,
        platform: Platform,
        measurement: EnclaveMeasurement | None = None,
        *,
        hasher: PasswordHasher | None = None,
        blob_sink: Callable[[bytes], None] | None = None,
        session_lifetime: int | None = None,
    ):
        self.platform = platform
        self.measurement = measurement or measure_enclave()
        self.hasher = hasher or PasswordHasher()
        self.blob_sink = blob_sink
        self.fault_hook: Callable[[str], None] | None = None
        self.state = State.UNINITIALIZED
        self.failure: EnclaveFailed | None = None
        self.password_comparisons = 0
        self.dirty = False
        self._session_lifetime = session_lifetime
        self._db: KeyDatabase | None = None
        self._counter: CounterHandle | None = None
        self._lock = threading.RLock()
        self._user_locks = [threading.Lock() for _ in range(64)]
        self._phantoms: OrderedDict[str, RateLimitState] = OrderedDict()
        self.bundle = None
        self.sessions: SessionTable | None = None
        self._handlers = {name: getattr(self, f"_op_{name}") for name in OPERATIONS}

    # -- lifecycle --------------------------------------------------------

    def _fail(self, err: EnclaveFailed) -> EnclaveFailed:
        self.state = State.FAILED
        self.failure = err
        log.error("enclave failed: %s", err.code)
        return err

    def initialize(self, sealed_db: bytes | None = None, operator_offset: int | None = None) -> State:
        if self.state is not State.UNINITIALIZED:
            raise RefusedNotServing("enclave already initialized")
        self.bundle = enclave_keygen(self.platform, self.measurement)
        kwargs = {} if self._session_lifetime is None else {"lifetime": self._session_lifetime}
        self.sessions = SessionTable(self.bundle, **kwargs)
        now = self.platform.trusted_time()
        if sealed_db is None:
            if self.platform.counters.owned_by(self.measurement):
                # state existed before; booting empty would roll it back
                raise self._fail(RollbackDetected("sealed database missing for a provisioned enclave"))
            handle = self.platform.counter_create(self.measurement)
            self._db = KeyDatabase(counter_id=handle.counter_id, time_nonce=now.source_nonce, time_offset=operator_offset or 0)
        else:
            if operator_offset is not None:
                raise ValueError("the time offset can only be set before the first boot")
            try:
                raw = self.platform.unseal(sealed_db, self.measurement)
                db = KeyDatabase.from_bytes(raw)
            except CKSError as err:
                raise self._fail(RollbackDetected(f"sealed database unusable: {err.code}")) from err
            handle = CounterHandle(db.counter_id)
            try:
                value = self.platform.counter_read(handle)
                expected_nonce = self.platform.counters.association(handle)
            except CKSError as err:
                raise self._fail(RollbackDetected("monotonic counter unavailable")) from err
            if db.version != value or db.version_nonce != expected_nonce:
                raise self._fail(RollbackDetected(f"sealed version {db.version} does not match counter {value}"))
            if db.time_nonce != now.source_nonce:
                raise self._fail(ClockTampered("trusted time source changed since the database was sealed"))
            self._db = db
        self._counter = handle
        self.platform.counter_increment(handle)
        self.dirty = True
        self.state = State.SERVING
        return self.state

    def _seal_locked(self) -> bytes:
        db = self._db
        db.version = self.platform.counter_increment(self._counter)
        db.version_nonce = os.urandom(16)
        self.platform.counters.associate(self._counter, db.version_nonce)
        blob = self.platform.seal(db.to_bytes(), self.measurement)
        self.dirty = False
        if self.blob_sink is not None:
            self.blob_sink(blob)
        return blob

    def _require_serving(self) -> None:
        if self.state is State.FAILED:
            raise self.failure
        if self.state is not State.SERVING:
            raise RefusedNotServing("enclave is not serving")

    def checkpoint(self) -> bytes:
        with self._lock:
            self._require_serving()
            if self.sessions is not None:
                self.sessions.sweep(self._now())
            return self._seal_locked()

    def shutdown(self) -> bytes:
        with self._lock:
            self._require_serving()
            blob = self._seal_locked()
            self.state = State.STOPPED
            return blob

    def quote_body(self) -> bytes:
        self._require_serving()
        self._now()
        return self.bundle.quote_body()

    @property
    def time_offset(self) -> int:
        return self._db.time_offset if self._db else 0

    def _now(self) -> int:
        ts = self.platform.trusted_time()
        if ts.source_nonce != self._db.time_nonce:
            raise self._fail(ClockTampered("trusted time source changed"))
        return ts.ticks

    def _fault(self, point: str) -> None:
        if self.fault_hook is not None:
            self.fault_hook(point)

    # -- request path -----------------------------------------------------

    def process(self, raw: bytes) -> bytes:
        """Handle one wire request; channel errors raise, handler errors are encrypted."""
        self._require_serving()
        wire = WireRequest.from_bytes(raw)
        now = self._now()
        session = self.sessions.get(wire.client_public, now)
        try:
            msg = open_request(session, wire)
        except DecodeError as err:
            reply = error_message(MalformedRequest(str(err)))
        else:
            reply = self.dispatch(msg, now)
        return seal_response(session, wire.message_seq, reply).to_bytes()

    def dispatch(self, msg: CanonicalMessage, now: int) -> CanonicalMessage:
        handler = self._handlers.get(msg.operation)
        try:
            if handler is None:
                raise MalformedRequest(f"unknown operation {msg.operation!r}")
            result = handler(msg, now)
        except EnclaveError as err:
            return error_message(err)
        except (DecodeError, UnicodeDecodeError) as err:
            return error_message(MalformedRequest(str(err)))
        return CanonicalMessage.build("ok", *result)

    # -- authentication ---------------------------------------------------

    def _user_lock(self, uid: str) -> threading.Lock:
        return self._user_locks[hash(uid) % len(self._user_locks)]

    def _check_password(self, uid: str, password: bytes, now: int, which: str = "pswd") -> UserRecord:
        with self._user_lock(uid):
            user = self._db.users.get(uid)
            if user is None:
                self._phantom_attempt(uid, password, now)
            retry = check_rate_limit(user.backoff, now)
            if retry:
                raise RateLimited(retry)
            self.password_comparisons += 1
            verifier = user.pswd_verifier if which == "pswd" else user.reset_verifier
            if not self.hasher.check_cached((uid, which), verifier, password):
                with self._lock:
                    record_failure(user.backoff, now)
                    self._seal_locked()
                raise AuthFailed()
            if user.backoff.consecutive_failures or user.backoff.locked_until:
                with self._lock:
                    record_success(user.backoff)
                    self.dirty = True
            return user

    def _phantom_attempt(self, uid: str, password: bytes, now: int) -> None:
        """Answer for an unknown uid exactly as for a wrong password, back-off included."""
        with self._lock:
            state = self._phantoms.pop(uid, None) or RateLimitState()
            self._phantoms[uid] = state
            while len(self._phantoms) > MAX_PHANTOMS:
                self._phantoms.popitem(last=False)
        retry = check_rate_limit(state, now)
        if retry:
            raise RateLimited(retry)
        self.password_comparisons += 1
        self.hasher.burn(password)
        record_failure(state, now)
        raise AuthFailed()

    def _authenticate(self, msg: CanonicalMessage, now: int) -> str:
        uid = msg.get_str("uid")
        pswd = msg.get("pswd")
        if uid is None or pswd is None:
            raise MalformedRequest("uid and pswd are required")
        self._check_password(uid, pswd, now)
        return uid

    # -- argument helpers -------------------------------------------------

    def _key_id(self, msg: CanonicalMessage) -> bytes:
        text = msg.get_str("key_id")
        try:
            key_id = bytes.fromhex(text or "")
        except ValueError:
            raise MalformedRequest("key_id must be hex") from None
        if len(key_id) != KEY_ID_LEN:
            raise MalformedRequest("key_id must be 32 bytes")
        return key_id

    def _key(self, key_id: bytes) -> KeyRecord:
        rec = self._db.keys.get(key_id)
        if rec is None:
            raise UnknownKey("no such key")
        return rec

    def _expiry(self, msg: CanonicalMessage, now: int) -> int | None:
        rel = msg.get_int("expires_in")
        wall = msg.get_int("expires_at")
        if rel is not None and wall is not None:
            raise MalformedRequest("give expires_in or expires_at, not both")
        if rel is not None:
            return now + rel
        if wall is not None:
            return wall - self._db.time_offset
        return None

    def _constraints(self, msg: CanonicalMessage, now: int, default_ops=None):
        names = [v.decode() for v in msg.get_all("op")]
        ops = pol.parse_ops(names) if names else default_ops
        if ops is None:
            raise PolicyInvalid("permitted operations are required")
        expiry = self._expiry(msg, now)
        uses = msg.get_int("uses")
        pol.validate_constraints(expiry, uses, now)
        return ops, expiry, uses

    def _new_key_id(self) -> bytes:
        while True:
            key_id = os.urandom(KEY_ID_LEN)
            if key_id not in self._db.keys and key_id not in self._db.tombstones:
                return key_id

    def _store_key(self, uid: str, algorithm: str, key, msg: CanonicalMessage, now: int) -> list:
        ops, expiry, uses = self._constraints(msg, now, default_ops=pol.OPERATIONS)
        material = crypto.compact_private(algorithm, key)
        with self._lock:
            key_id = self._new_key_id()
            policy = pol.KeyUsagePolicy(uid, ops, expiry, uses)
            self._db.keys[key_id] = KeyRecord(key_id, algorithm, material, policy, _key=key)
            self.dirty = True
        return [("key_id", key_id.hex()), ("algorithm", algorithm), ("public_key", crypto.public_der(key))]

    def _wall(self, ticks: int | None) -> int | None:
        return None if ticks is None else ticks + self._db.time_offset

    def _audit_append(self, now: int, rec: KeyRecord, uid: str, op: str, data: bytes) -> AuditEntry:
        db = self._db
        db.entry_counter += 1
        entry = AuditEntry(db.entry_counter, now, rec.key_id, uid, op, _digest(data))
        db.append_audit(entry)
        self.dirty = True
        return entry

    # -- operations -------------------------------------------------------

    def _op_create_user(self, msg: CanonicalMessage, now: int) -> list:
        uid = msg.get_str("uid")
        new_pswd = msg.get("new_pswd")
        reset_pswd = msg.get("new_reset_pswd")
        base = msg.get_int("base_lockout", RateLimitState().base_lockout_s)
        if not uid or len(uid.encode()) > MAX_UID_LEN:
            raise WeakInput(f"uid must be 1-{MAX_UID_LEN} bytes")
        for pw in (new_pswd, reset_pswd):
            if not pw or len(pw) > MAX_PASSWORD_LEN:
                raise WeakInput(f"passwords must be 1-{MAX_PASSWORD_LEN} bytes")
        if not 1 <= base <= MAX_LOCKOUT_S:
            raise WeakInput("base_lockout must be between 1 and 86400 seconds")
        if uid in self._db.users:
            raise UidTaken("uid already registered")
        record = UserRecord(uid, self.hasher.make(new_pswd), self.hasher.make(reset_pswd), RateLimitState(base_lockout_s=base))
        with self._lock:
            if uid in self._db.users:
                raise UidTaken("uid already registered")
            self._db.users[uid] = record
            self._phantoms.pop(uid, None)
            self.dirty = True
        return []

    def _op_pswd_reset(self, msg: CanonicalMessage, now: int) -> list:
        uid = msg.get_str("uid")
        reset = msg.get("reset_pswd")
        new = msg.get("new_pswd")
        if uid is None or reset is None:
            raise MalformedRequest("uid and reset_pswd are required")
        if not new or len(new) > MAX_PASSWORD_LEN:
            raise WeakInput(f"passwords must be 1-{MAX_PASSWORD_LEN} bytes")
        user = self._check_password(uid, reset, now, which="reset")
        verifier = self.hasher.make(new)
        with self._user_lock(uid), self._lock:
            user.pswd_verifier = verifier
            record_success(user.backoff)
            self.hasher.forget(uid)
            self.dirty = True
        return []

    def _op_gen_key(self, msg: CanonicalMessage, now: int) -> list:
        uid = self._authenticate(msg, now)
        algorithm = msg.get_str("algorithm")
        if algorithm not in crypto.ALGORITHMS:
            raise UnsupportedAlgorithm(f"unsupported algorithm {algorithm!r}")
        self._constraints(msg, now, default_ops=pol.OPERATIONS)
        key = crypto.generate(algorithm)
        return self._store_key(uid, algorithm, key, msg, now)

    def _op_import_key(self, msg: CanonicalMessage, now: int) -> list:
        uid = self._authenticate(msg, now)
        data = msg.get("key_data")
        if data is None:
            raise MalformedRequest("key_data is required")
        algorithm, key = crypto.load_pkcs8(data)
        return self._store_key(uid, algorithm, key, msg, now)

    def _begin_use(self, msg: CanonicalMessage, uid: str, now: int, op: str, arg: str) -> tuple[AuditEntry, KeyRecord, bytes]:
        """Policy check, use-count decrement and audit append; caller holds the lock."""
        key_id = self._key_id(msg)
        data = msg.get(arg)
        if data is None:
            raise MalformedRequest(f"{arg} is required")
        if op == pol.SIGN and len(data) != crypto.DIGEST_LEN:
            raise MalformedRequest("msg_hash must be a 32-byte SHA-256 digest")
        rec = self._key(key_id)
        section = pol.authorize(rec.policy, uid, op, now)
        pol.consume(rec.policy, section)
        # the entry exists before the operation runs
        entry = self._audit_append(now, rec, uid, op, data)
        self._fault("after_audit")
        return entry, rec, data

    def _op_pksign(self, msg: CanonicalMessage, now: int) -> list:
        uid = self._authenticate(msg, now)
        with self._lock:
            entry, rec, digest = self._begin_use(msg, uid, now, pol.SIGN, "msg_hash")
            sig = crypto.sign_digest(rec.algorithm, rec.private_key, digest)
            entry.output_digest = _digest(sig)
        return [("signature", sig)]

    def _op_pkdecrypt(self, msg: CanonicalMessage, now: int) -> list:
        uid = self._authenticate(msg, now)
        with self._lock:
            entry, rec, enc = self._begin_use(msg, uid, now, pol.DECRYPT, "enc_msg")
            plain = crypto.decrypt(rec.algorithm, rec.private_key, enc)
            entry.output_digest = _digest(plain)
        return [("decryption", plain)]

    def _op_set_policy(self, msg: CanonicalMessage, now: int) -> list:
        uid = self._authenticate(msg, now)
        key_id = self._key_id(msg)
        with self._lock:
            rec = self._key(key_id)
            pol.require_owner(rec.policy, uid)
            ops, expiry, uses = self._constraints(msg, now)
            policy = rec.policy
            policy.permitted_ops, policy.expiry, policy.remaining_uses = ops, expiry, uses
            dropped = pol.revalidate(policy)
            self.dirty = True
        return [("dropped", d) for d in dropped]

    def _op_delegate(self, msg: CanonicalMessage, now: int) -> list:
        uid = self._authenticate(msg, now)
        key_id = self._key_id(msg)
        delegatees = [d.decode() for d in msg.get_all("delegatee")]
        if not delegatees:
            raise MalformedRequest("at least one delegatee is required")
        with self._lock:
            rec = self._key(key_id)
            policy = rec.policy
            pol.require_owner(policy, uid)
            ops, expiry, uses = self._constraints(msg, now, default_ops=policy.permitted_ops)
            sections = []
            for name in delegatees:
                if name == policy.owner_uid:
                    raise PolicyInvalid("cannot delegate a key to its owner")
                if name not in self._db.users:
                    raise UnknownDelegatee(f"unknown delegatee {name!r}")
                section = pol.inherit(pol.DelegationSection(name, ops, expiry, uses), policy)
                if not pol.within(section, policy):
                    raise PolicyInvalid("delegation exceeds the key's own policy")
                sections.append(section)
            named = {s.delegatee_uid for s in sections}
            policy.delegations = [s for s in policy.delegations if s.delegatee_uid not in named] + sections
            self.dirty = True
        return []

    def _op_undelegate(self, msg: CanonicalMessage, now: int) -> list:
        uid = self._authenticate(msg, now)
        key_id = self._key_id(msg)
        names = {d.decode() for d in msg.get_all("delegatee")}
        with self._lock:
            rec = self._key(key_id)
            pol.require_owner(rec.policy, uid)
            rec.policy.delegations = [s for s in rec.policy.delegations if s.delegatee_uid not in names]
            self.dirty = True
        return []

    def _op_audit(self, msg: CanonicalMessage, now: int) -> list:
        uid = self._authenticate(msg, now)
        key_id = self._key_id(msg)
        offset = self._db.time_offset
        start = msg.get_int("from", 0)
        end = msg.get_int("to", 2**63 - 1)
        if start > end:
            raise InvalidRange("start is after end")
        with self._lock:
            rec = self._db.keys.get(key_id)
            owner = rec.policy.owner_uid if rec is not None else self._db.tombstones.get(key_id)
            if owner is None:
                raise UnknownKey("no such key")
            if owner != uid:
                raise pol.NotOwner("only the key owner may audit")
            entries = [e for e in self._db.audit_for(key_id) if start <= e.timestamp + offset <= end]
            rows = [
                encode(
                    pairs(
                        [
                            ("seq", e.entry_seq),
                            ("time", e.timestamp + offset),
                            ("key_id", e.key_id.hex()),
                            ("uid", e.requesting_uid),
                            ("op", e.operation),
                            ("input", e.input_digest),
                            ("output", e.output_digest),
                        ]
                    )
                )
                for e in entries
            ]
        return [("entry", r) for r in rows]

    def _op_delete_key(self, msg: CanonicalMessage, now: int) -> list:
        uid = self._authenticate(msg, now)
        key_id = self._key_id(msg)
        with self._lock:
            rec = self._key(key_id)
            pol.require_owner(rec.policy, uid)
            del self._db.keys[key_id]
            self._db.tombstones[key_id] = uid
            rec.private_material = []
            rec._key = None
            self.dirty = True
        return []

    # -- harness / reporting ----------------------------------------------

    def stats(self) -> dict:
        db = self._db
        return {
            "state": self.state.value,
            "password_comparisons": self.password_comparisons,
            "users": len(db.users) if db else 0,
            "keys": len(db.keys) if db else 0,
            "audit_entries": len(db.audit_log) if db else 0,
            "version": db.version if db else 0,
        }
