import hashlib
import statistics
import threading
import time

import pytest
from cryptography.hazmat.primitives.asymmetric import ec

import oracle
from conftest import Deployment, sha256
from cks import crypto
from cks.enclave import InjectedCrash, State
from cks.errors import (
    AuthFailed,
    ClockTampered,
    DecryptionFailed,
    InvalidRange,
    MalformedKey,
    MalformedRequest,
    NotOwner,
    PolicyInvalid,
    PolicyViolation,
    RateLimited,
    RefusedNotServing,
    RollbackDetected,
    UidTaken,
    UnknownDelegatee,
    UnknownKey,
    UnsupportedAlgorithm,
    WeakInput,
)
from cks.sexp import CanonicalMessage, encode_canonical

H = sha256(b"payload")


def verifies(key, digest, sig):
    return oracle.verify(key.public_key, digest, sig)


@pytest.fixture
def bob(alice):
    c, _, _ = alice
    c.create_user("bob", b"bobpw", b"bobreset")
    c.create_user("carol", b"carolpw", b"carolreset")
    return alice


# -- lifecycle -------------------------------------------------------------


def test_first_boot_is_empty_and_serving(deployment):
    assert deployment.enclave.state is State.SERVING
    assert deployment.enclave.stats()["users"] == 0


def test_restart_preserves_everything(deployment, alice):
    c, pw, key = alice
    deployment.restart()
    c2 = deployment.client()
    assert deployment.enclave.stats()["users"] == 1
    assert verifies(key, H, c2.sign("alice", pw, key.key_id, H))


def test_shutdown_refuses_requests(deployment, alice):
    c, pw, key = alice
    blob = deployment.enclave.shutdown()
    with pytest.raises(RefusedNotServing):
        c.sign("alice", pw, key.key_id, H)
    raw = deployment.platform.unseal(blob, deployment.enclave.measurement)
    assert b"alice" in raw


def test_versions_strictly_increase(deployment):
    versions = []
    for _ in range(3):
        deployment.restart()
        versions.append(deployment.enclave.stats()["version"])
    assert versions == sorted(set(versions))


def test_older_blob_is_rollback(deployment, alice):
    c, pw, key = alice
    old = deployment.enclave.checkpoint()
    c.sign("alice", pw, key.key_id, H)
    deployment.enclave.checkpoint()
    enclave = deployment.restart(blob=old)
    assert enclave.state is State.FAILED
    assert isinstance(enclave.failure, RollbackDetected)
    with pytest.raises(RollbackDetected):
        enclave.quote_body()
    with pytest.raises(RollbackDetected):
        enclave.process(b"\x01" * 80)


def test_missing_blob_is_rollback(deployment, alice):
    deployment.enclave.shutdown()
    enclave = Deployment.boot(deployment, None)
    assert isinstance(enclave.failure, RollbackDetected)


def test_tampered_blob_is_refused(deployment):
    blob = bytearray(deployment.enclave.shutdown())
    blob[-1] ^= 1
    deployment.platform.close()
    enclave = deployment.boot(bytes(blob))
    assert enclave.state is State.FAILED


def test_clock_reset_fails_closed(deployment, alice):
    c, pw, key = alice
    deployment.platform.reset_clock()
    with pytest.raises(ClockTampered):
        c.sign("alice", pw, key.key_id, H)
    assert deployment.enclave.state is State.FAILED
    # the tamper persists into the next boot as well
    deployment.enclave.state = State.STOPPED
    enclave = deployment.restart(blob=deployment.blobs[-1])
    assert isinstance(enclave.failure, ClockTampered)


def test_offset_only_on_first_boot(deployment):
    blob = deployment.enclave.shutdown()
    deployment.enclave = None
    from cks.enclave import Enclave, PasswordHasher

    e = Enclave(deployment.platform, hasher=PasswordHasher(log2_n=4))
    with pytest.raises(ValueError):
        e.initialize(blob, 100)


def test_offset_applies_to_audit_times(tmp_path):
    d = Deployment(tmp_path, time_offset=1_700_000_000)
    c = d.client()
    c.create_user("alice", b"pw", b"r")
    d.advance(5)
    key = c.gen_key("alice", b"pw", crypto.P256)
    c.sign("alice", b"pw", key.key_id, H)
    (row,) = c.audit("alice", b"pw", key.key_id)
    assert row.time == 1_700_000_005
    assert c.audit("alice", b"pw", key.key_id, 0, 1_700_000_004) == []


# -- users -----------------------------------------------------------------


def test_create_user(client):
    client.create_user("alice", b"pw1", b"rpw1")
    with pytest.raises(UidTaken):
        client.create_user("alice", b"pw1", b"rpw1")
    with pytest.raises(WeakInput):
        client.create_user("bob", b"", b"r")
    with pytest.raises(WeakInput):
        client.create_user("bob", b"x" * 129, b"r")
    with pytest.raises(WeakInput):
        client.create_user("bob", b"p", b"r", base_lockout=0)


def test_new_user_signs_immediately(alice):
    c, pw, key = alice
    assert verifies(key, H, c.sign("alice", pw, key.key_id, H))


def test_password_reset(deployment, alice):
    c, pw, key = alice
    c.reset_password("alice", b"rpw1", b"new")
    with pytest.raises(AuthFailed):
        c.sign("alice", pw, key.key_id, H)
    deployment.advance(10)
    assert verifies(key, H, c.sign("alice", b"new", key.key_id, H))


def test_wrong_reset_password_backs_off(deployment, alice):
    c, pw, key = alice
    with pytest.raises(AuthFailed):
        c.reset_password("alice", b"guess", b"new")
    # same back-off as the main password
    with pytest.raises(RateLimited):
        c.sign("alice", pw, key.key_id, H)


def test_wrong_password_then_lockout(deployment, alice):
    c, pw, key = alice
    with pytest.raises(AuthFailed):
        c.sign("alice", b"wrong", key.key_id, H)
    with pytest.raises(RateLimited) as err:
        c.sign("alice", pw, key.key_id, H)
    assert err.value.retry_after == 1
    deployment.advance(1)
    with pytest.raises(AuthFailed):
        c.sign("alice", b"wrong", key.key_id, H)
    deployment.advance(1)
    with pytest.raises(RateLimited) as err:
        c.sign("alice", pw, key.key_id, H)
    assert err.value.retry_after == 1
    deployment.advance(1)
    c.sign("alice", pw, key.key_id, H)
    # success reset the streak: the next failure locks for the base again
    with pytest.raises(AuthFailed):
        c.sign("alice", b"wrong", key.key_id, H)
    with pytest.raises(RateLimited) as err:
        c.sign("alice", pw, key.key_id, H)
    assert err.value.retry_after == 1


def test_failure_is_sealed_immediately(deployment, alice):
    c, _, key = alice
    before = len(deployment.blobs)
    with pytest.raises(AuthFailed):
        c.sign("alice", b"wrong", key.key_id, H)
    assert len(deployment.blobs) == before + 1
    # crash now and restart from disk: the lockout survives
    deployment.enclave.state = State.STOPPED
    deployment.restart()
    with pytest.raises(RateLimited):
        deployment.client().sign("alice", b"pw1", key.key_id, H)


def test_custom_base_lockout(deployment, client):
    client.create_user("slow", b"pw", b"r", base_lockout=60)
    with pytest.raises(AuthFailed):
        client.gen_key("slow", b"bad", crypto.P256)
    with pytest.raises(RateLimited) as err:
        client.gen_key("slow", b"pw", crypto.P256)
    assert err.value.retry_after == 60


def _reply(enclave, msg):
    return encode_canonical(enclave.dispatch(msg, enclave.platform.trusted_time().ticks))


def test_unknown_uid_indistinguishable(deployment, alice):
    e = deployment.enclave
    unknown = CanonicalMessage.build("pksign", uid="nobody", pswd="x", key_id="00" * 32, msg_hash=H)
    wrong = CanonicalMessage.build("pksign", uid="alice", pswd="x", key_id="00" * 32, msg_hash=H)
    assert _reply(e, unknown) == _reply(e, wrong)
    # both are now locked out, with the same answer
    assert _reply(e, unknown) == _reply(e, wrong)
    assert b"rate_limited" in _reply(e, unknown)


def test_unknown_uid_timing(deployment, client):
    # use the production cost so the comparison reflects real work
    from cks.enclave import PasswordHasher

    deployment.enclave.hasher = PasswordHasher(log2_n=12)
    e = deployment.enclave
    client.create_user("real", b"pw", b"r")
    samples = {"unknown": [], "wrong": []}
    for i in range(15):
        deployment.advance(86400)
        for kind, uid in (("unknown", f"ghost{i}"), ("wrong", "real")):
            msg = CanonicalMessage.build("gen_key", uid=uid, pswd=f"guess{i}", algorithm="p256")
            t0 = time.perf_counter()
            e.dispatch(msg, e.platform.trusted_time().ticks)
            samples[kind].append(time.perf_counter() - t0)
    gap = abs(statistics.median(samples["unknown"]) - statistics.median(samples["wrong"]))
    # the wrong-password path also seals the database; allow for that write
    assert gap < 0.005, samples


# -- keys ------------------------------------------------------------------


def test_gen_p256_sign_verifies(alice):
    c, pw, key = alice
    assert key.algorithm == crypto.P256
    sig = c.sign("alice", pw, key.key_id, H)
    assert verifies(key, H, sig)
    assert not verifies(key, sha256(b"other"), sig)


def test_gen_rsa_decrypts_external_ciphertext(alice):
    c, pw, _ = alice
    key = c.gen_key("alice", pw, crypto.RSA3072, ops=["decrypt"])
    assert c.decrypt("alice", pw, key.key_id, oracle.encrypt(key.public_key, b"secret")) == b"secret"


def test_gen_key_rejects_past_expiry(deployment, alice):
    c, pw, _ = alice
    deployment.advance(100)
    now = deployment.platform.trusted_time().ticks
    with pytest.raises(PolicyInvalid):
        c.gen_key("alice", pw, crypto.P256, expires_at=now - 10)
    with pytest.raises(UnsupportedAlgorithm):
        c.gen_key("alice", pw, "ed25519")


def test_import_reference_key(alice):
    c, pw, _ = alice
    der, spki = oracle.generate_p256_pkcs8()
    key = c.import_key("alice", pw, der)
    assert key.public_key == spki
    assert oracle.verify(spki, H, c.sign("alice", pw, key.key_id, H))


def test_import_garbage(alice):
    c, pw, _ = alice
    with pytest.raises(MalformedKey):
        c.import_key("alice", pw, b"garbage")
    other = crypto.export_pkcs8(ec.generate_private_key(ec.SECP384R1()))
    with pytest.raises(UnsupportedAlgorithm):
        c.import_key("alice", pw, other)


def test_import_delete_sign(alice):
    c, pw, _ = alice
    der, _ = oracle.generate_p256_pkcs8()
    key = c.import_key("alice", pw, der)
    c.delete_key("alice", pw, key.key_id)
    with pytest.raises(UnknownKey):
        c.sign("alice", pw, key.key_id, H)


def test_sign_policy(alice):
    c, pw, _ = alice
    once = c.gen_key("alice", pw, crypto.P256, uses=1)
    c.sign("alice", pw, once.key_id, H)
    with pytest.raises(PolicyViolation):
        c.sign("alice", pw, once.key_id, H)
    dec_only = c.gen_key("alice", pw, crypto.P256, ops=["decrypt"])
    with pytest.raises(PolicyViolation):
        c.sign("alice", pw, dec_only.key_id, H)
    with pytest.raises(MalformedRequest):
        c.sign("alice", pw, dec_only.key_id, b"short")


def test_decrypt_wrong_key_is_logged(alice):
    c, pw, key = alice
    other = crypto.generate(crypto.P256)
    with pytest.raises(DecryptionFailed):
        c.decrypt("alice", pw, key.key_id, crypto.encrypt_to(other.public_key(), b"x"))
    (row,) = c.audit("alice", pw, key.key_id)
    assert row.op == "decrypt" and not row.completed


def test_decrypt_delegation(bob):
    c, pw, _ = bob
    key = c.gen_key("alice", pw, crypto.P256)
    ct = oracle.encrypt(key.public_key, b"for bob")
    c.delegate("alice", pw, key.key_id, ["bob"], ops=["decrypt"])
    assert c.decrypt("bob", b"bobpw", key.key_id, ct) == b"for bob"
    with pytest.raises(PolicyViolation):
        c.decrypt("carol", b"carolpw", key.key_id, ct)


def test_set_policy_drops_loose_delegation(deployment, bob):
    c, pw, key = bob
    c.delegate("alice", pw, key.key_id, ["bob"], expires_in=3600)
    c.delegate("alice", pw, key.key_id, ["carol"], expires_in=60)
    assert c.set_policy("alice", pw, key.key_id, ["sign", "decrypt"], expires_in=600) == ["bob"]
    with pytest.raises(PolicyViolation):
        c.sign("bob", b"bobpw", key.key_id, H)
    c.sign("carol", b"carolpw", key.key_id, H)


def test_set_policy_owner_only(bob):
    c, pw, key = bob
    c.delegate("alice", pw, key.key_id, ["bob"])
    with pytest.raises(NotOwner):
        c.set_policy("bob", b"bobpw", key.key_id, ["sign"])


def test_set_policy_zero_uses(alice):
    c, pw, key = alice
    c.set_policy("alice", pw, key.key_id, ["sign"], uses=0)
    with pytest.raises(PolicyViolation):
        c.sign("alice", pw, key.key_id, H)


def test_delegation_expiry(deployment, bob):
    c, pw, key = bob
    c.delegate("alice", pw, key.key_id, ["bob"], ops=["sign"], expires_in=3600)
    c.sign("bob", b"bobpw", key.key_id, H)
    deployment.advance(3599)
    c.sign("bob", b"bobpw", key.key_id, H)
    deployment.advance(2)
    with pytest.raises(PolicyViolation):
        c.sign("bob", b"bobpw", key.key_id, H)
    c.sign("alice", pw, key.key_id, H)


def test_delegation_cannot_exceed_parent(bob):
    c, pw, _ = bob
    key = c.gen_key("alice", pw, crypto.P256, expires_in=100, uses=5)
    with pytest.raises(PolicyInvalid):
        c.delegate("alice", pw, key.key_id, ["bob"], expires_in=101)
    with pytest.raises(PolicyInvalid):
        c.delegate("alice", pw, key.key_id, ["bob"], uses=6)
    with pytest.raises(UnknownDelegatee):
        c.delegate("alice", pw, key.key_id, ["mallory"])
    with pytest.raises(PolicyInvalid):
        c.delegate("alice", pw, key.key_id, ["alice"])
    sign_only = c.gen_key("alice", pw, crypto.P256, ops=["sign"])
    with pytest.raises(PolicyInvalid):
        c.delegate("alice", pw, sign_only.key_id, ["bob"], ops=["decrypt"])


def test_delegatee_cannot_redelegate_or_delete(bob):
    c, pw, key = bob
    c.delegate("alice", pw, key.key_id, ["bob"])
    with pytest.raises(NotOwner):
        c.delegate("bob", b"bobpw", key.key_id, ["carol"])
    with pytest.raises(NotOwner):
        c.delete_key("bob", b"bobpw", key.key_id)
    with pytest.raises(NotOwner):
        c.audit("bob", b"bobpw", key.key_id)


def test_delegated_uses_count_against_both(bob):
    c, pw, _ = bob
    key = c.gen_key("alice", pw, crypto.P256, uses=3)
    c.delegate("alice", pw, key.key_id, ["bob"], uses=2)
    c.sign("bob", b"bobpw", key.key_id, H)
    c.sign("bob", b"bobpw", key.key_id, H)
    with pytest.raises(PolicyViolation):
        c.sign("bob", b"bobpw", key.key_id, H)
    c.sign("alice", pw, key.key_id, H)
    with pytest.raises(PolicyViolation):
        c.sign("alice", pw, key.key_id, H)


def test_undelegate(bob):
    c, pw, key = bob
    c.delegate("alice", pw, key.key_id, ["bob", "carol"])
    c.undelegate("alice", pw, key.key_id, ["bob"])
    with pytest.raises(PolicyViolation):
        c.sign("bob", b"bobpw", key.key_id, H)
    c.sign("carol", b"carolpw", key.key_id, H)
    c.undelegate("alice", pw, key.key_id, ["never"])
    c.sign("carol", b"carolpw", key.key_id, H)


def test_audit(deployment, alice):
    c, pw, key = alice
    for i in range(3):
        deployment.advance(10)
        c.sign("alice", pw, key.key_id, sha256(bytes([i])))
    rows = c.audit("alice", pw, key.key_id)
    assert [r.seq for r in rows] == sorted(r.seq for r in rows) and len(rows) == 3
    assert all(r.completed and r.op == "sign" and r.uid == "alice" for r in rows)
    assert rows[0].input_digest == sha256(sha256(b"\x00"))
    assert c.audit("alice", pw, key.key_id, 11, 20) == rows[1:2]
    assert c.audit("alice", pw, key.key_id, 1000, 2000) == []
    with pytest.raises(InvalidRange):
        c.audit("alice", pw, key.key_id, 5, 4)


def test_audit_output_digest_matches_signature(alice):
    c, pw, key = alice
    sig = c.sign("alice", pw, key.key_id, H)
    (row,) = c.audit("alice", pw, key.key_id)
    assert row.output_digest == hashlib.sha256(sig).digest()


def test_interrupted_operation_visible_after_restart(deployment, alice):
    c, pw, key = alice

    def crash(point):
        if point == "after_audit":
            raise InjectedCrash(point)

    deployment.enclave.fault_hook = crash
    with pytest.raises(InjectedCrash):
        c.sign("alice", pw, key.key_id, H)
    deployment.restart()
    (row,) = deployment.client().audit("alice", pw, key.key_id)
    assert not row.completed and row.input_digest == sha256(H)


def test_delete_keeps_history(alice):
    c, pw, key = alice
    c.sign("alice", pw, key.key_id, H)
    c.delete_key("alice", pw, key.key_id)
    with pytest.raises(UnknownKey):
        c.sign("alice", pw, key.key_id, H)
    assert len(c.audit("alice", pw, key.key_id)) == 1
    with pytest.raises(UnknownKey):
        c.delete_key("alice", pw, key.key_id)


def test_unknown_operation(deployment):
    reply = _reply(deployment.enclave, CanonicalMessage.build("format_disk"))
    assert b"malformed_request" in reply


def test_wrong_password_never_signs(deployment, alice):
    # randomized guesses across operations: no key material is ever returned
    import random

    c, pw, key = alice
    rng = random.Random(3)
    for i in range(40):
        deployment.advance(86400)
        guess = bytes(rng.randrange(256) for _ in range(rng.randrange(1, 12)))
        if guess == pw:
            continue
        op = rng.choice(["sign", "decrypt", "audit", "set_policy", "delete"])
        with pytest.raises(AuthFailed):
            if op == "sign":
                c.sign("alice", guess, key.key_id, H)
            elif op == "decrypt":
                c.decrypt("alice", guess, key.key_id, b"x")
            elif op == "audit":
                c.audit("alice", guess, key.key_id)
            elif op == "set_policy":
                c.set_policy("alice", guess, key.key_id, ["sign"], uses=0)
            else:
                c.delete_key("alice", guess, key.key_id)
    deployment.advance(86400)
    assert c.audit("alice", pw, key.key_id) == []


def test_concurrent_use_count(deployment, bob):
    c, pw, _ = bob
    key = c.gen_key("alice", pw, crypto.P256, uses=20)
    ok = []

    def worker():
        mine = deployment.client()
        for _ in range(10):
            try:
                mine.sign("alice", pw, key.key_id, H)
                ok.append(1)
            except PolicyViolation:
                pass

    threads = [threading.Thread(target=worker) for _ in range(6)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(ok) == 20
