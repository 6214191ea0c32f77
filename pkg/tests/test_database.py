import os

from cks import crypto
from cks.enclave.database import AuditEntry, KeyDatabase, KeyRecord, UserRecord
from cks.enclave.passwords import PasswordHasher
from cks.enclave.policy import DelegationSection, KeyUsagePolicy
from cks.enclave.ratelimit import RateLimitState

import pytest
from cks.errors import DecodeError


PW, RPW = b"plaintext-password-marker", b"plaintext-reset-marker"


def _sample_db():
    h = PasswordHasher(log2_n=4)
    db = KeyDatabase(counter_id=3, time_nonce=os.urandom(16), time_offset=-3600, version=9, version_nonce=os.urandom(16))
    db.users["alice"] = UserRecord("alice", h.make(PW), h.make(RPW), RateLimitState(2, 77, 5))
    db.users["bob"] = UserRecord("bob", h.make(PW), h.make(RPW))
    for alg in crypto.ALGORITHMS:
        key = crypto.generate(alg)
        policy = KeyUsagePolicy("alice", frozenset({"sign"}), expiry=1000, remaining_uses=4)
        policy.delegations.append(DelegationSection("bob", frozenset({"sign"}), 500, 2))
        kid = os.urandom(32)
        db.keys[kid] = KeyRecord(kid, alg, crypto.compact_private(alg, key), policy)
        db.append_audit(AuditEntry(db.entry_counter, 10, kid, "bob", "sign", os.urandom(32), os.urandom(32)))
        db.entry_counter += 1
    db.append_audit(AuditEntry(db.entry_counter, 11, kid, "alice", "decrypt", os.urandom(32), None))
    db.entry_counter += 1
    db.tombstones[os.urandom(32)] = "alice"
    return db


def test_roundtrip():
    db = _sample_db()
    again = KeyDatabase.from_bytes(db.to_bytes())
    assert again.to_bytes() == db.to_bytes()
    assert again.users == db.users
    assert again.keys == db.keys
    assert again.audit_log == db.audit_log
    assert again.tombstones == db.tombstones
    assert again.time_offset == -3600
    kid = next(iter(db.keys))
    assert again.audit_for(kid) == db.audit_for(kid)
    assert not again.audit_log[-1].completed


def test_serialized_form_has_no_passwords_or_pkcs8():
    db = _sample_db()
    raw = db.to_bytes()
    assert PW not in raw and RPW not in raw
    for rec in db.keys.values():
        assert crypto.export_pkcs8(rec.private_key) not in raw


def test_corrupt_input():
    raw = _sample_db().to_bytes()
    for bad in (b"", raw[:-1], raw.replace(b"cks-db-1", b"cks-db-9")):
        with pytest.raises(DecodeError):
            KeyDatabase.from_bytes(bad)


def test_record_repr_hides_material():
    rec = next(iter(_sample_db().keys.values()))
    text = repr(rec)
    assert all(part.hex() not in text for part in rec.private_material)
