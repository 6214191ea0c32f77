"""Adversary scenarios and their expected defence outcomes.

Each scenario starts its own harness-mode host, plays the attacker through
the network path (an intercepting transport), the host's disk, the process
itself and the clock/fault hooks, and reports what it observed. Randomness
comes from a ``random.Random`` seeded per scenario, and time only moves
through the simulated clock, so a verdict depends on the seed alone.
"""

from __future__ import annotations

import base64
import hashlib
import logging
import math
import random
import shutil
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey

from .. import crypto
from ..channel import EnclaveKeyBundle, WireRequest, binding_for, parse_quote_body, seal_request
from ..client.api import KeyStoreClient
from ..client.transport import HttpTransport
from ..errors import AuthFailed, CKSError, RateLimited
from ..platform import EnclaveMeasurement, Platform, Quote
from ..sexp import CanonicalMessage
from .server import ManagedServer

log = logging.getLogger(__name__)

REJECTED = "rejected_with"
FAILED_STATE = "failed_state"
NO_GAIN = "no_information_gain"

# files that stand in for secrets fused into the CPU; a host cannot read them
HARDWARE_SECRETS = ("authority.key", "seal_root.key")


@dataclass(frozen=True)
class Outcome:
    kind: str
    code: str | None = None

    def __str__(self) -> str:
        return f"{self.kind} {self.code}" if self.code else self.kind


@dataclass
class Observation:
    outcome: Outcome
    details: dict = field(default_factory=dict)


@dataclass(frozen=True)
class AttackScenario:
    name: str
    description: str
    setup: Callable[["ScenarioContext"], Observation]
    expected_outcome: Outcome


@dataclass
class Verdict:
    scenario: str
    expected: str
    observed: str
    passed: bool
    details: dict

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "expected": self.expected,
            "observed": self.observed,
            "passed": self.passed,
            "details": self.details,
        }


class InterceptingTransport:
    """Network adversary between client and host.

    ``on_get``/``on_post``/``on_response`` may rewrite bodies in flight; every
    message the client emits is kept in ``transcript`` as ``(method, path, body)``.
    """

    def __init__(self, inner: HttpTransport, on_get=None, on_post=None, on_response=None):
        self.inner = inner
        self.on_get = on_get
        self.on_post = on_post
        self.on_response = on_response
        self.transcript: list[tuple[str, str, bytes]] = []

    def get(self, path: str) -> bytes:
        self.transcript.append(("GET", path, b""))
        body = self.inner.get(path)
        return self.on_get(path, body) if self.on_get else body

    def post(self, path: str, body: bytes) -> bytes:
        self.transcript.append(("POST", path, body))
        if self.on_post:
            body = self.on_post(body)
        reply = self.inner.post(path, body)
        return self.on_response(reply) if self.on_response else reply

    def close(self) -> None:
        self.inner.close()


class ScenarioContext:
    def __init__(self, name: str, seed: int, workdir: Path):
        self.name = name
        self.seed = seed
        self.rng = random.Random(f"{seed}:{name}")
        self.workdir = workdir
        self.servers: list[ManagedServer] = []
        self._n = 0

    def server(self, **kwargs) -> ManagedServer:
        self._n += 1
        kwargs.setdefault("checkpoint_interval", 86400)
        srv = ManagedServer(self.workdir / f"host{self._n}", **kwargs)
        self.servers.append(srv)
        return srv.start()

    def client(self, srv: ManagedServer, **intercept) -> KeyStoreClient:
        transport = HttpTransport(srv.url)
        if intercept:
            transport = InterceptingTransport(transport, **intercept)
        return KeyStoreClient(transport, srv.anchor())

    def secret(self, n: int = 16) -> bytes:
        alphabet = "abcdefghijkmnpqrstuvwxyzABCDEFGHJKLMNPQRSTUVWXYZ23456789"
        return "".join(self.rng.choice(alphabet) for _ in range(n)).encode()

    def provision(self, srv: ManagedServer, uid: str = "alice", algorithm: str = crypto.P256, **user):
        client = self.client(srv).connect()
        pw, reset = self.secret(), self.secret()
        client.create_user(uid, pw, reset, **user)
        key = client.gen_key(uid, pw, algorithm)
        return client, pw, reset, key

    def digest(self) -> bytes:
        return hashlib.sha256(self.rng.randbytes(64)).digest()

    def close(self) -> None:
        for srv in self.servers:
            if srv.proc is not None:
                srv.kill()


def _code(err: BaseException) -> str:
    return getattr(err, "code", type(err).__name__)


def _attempt(fn) -> str:
    try:
        fn()
    except CKSError as err:
        return err.code
    return "ok"


def _all_endpoints(srv: ManagedServer) -> dict[str, tuple[int, str]]:
    """Status and error code of every public endpoint."""
    seen = {}
    for method, path, body in (("GET", "/v1/quote", b""), ("POST", "/v1/process", b"\x01" * 64), ("GET", "/v1/status", b"")):
        status, doc = srv.probe(method, path, body)
        seen[f"{method} {path}"] = (status, doc.get("code") if isinstance(doc, dict) else None)
    return seen


def _all_failed(seen: dict[str, tuple[int, str]], code: str) -> bool:
    return all(status == 503 and c == code for status, c in seen.values())


# -- network adversary -------------------------------------------------------


def quote_substitution(ctx: ScenarioContext) -> Observation:
    srv = ctx.server()
    measurement = srv.anchor().expected_measurement

    attacker = X25519PrivateKey.generate()
    attacker_pub = attacker.public_key().public_bytes_raw()
    forger = Ed25519PrivateKey.generate()
    binding = binding_for(attacker_pub)
    forged = Quote(measurement, binding, forger.sign(measurement.digest + binding))

    # a genuinely signed quote for a different enclave on the same platform
    scratch = ctx.workdir / "impostor"
    (scratch / "platform").mkdir(parents=True)
    shutil.copy(srv.data_dir / "platform" / "authority.key", scratch / "platform" / "authority.key")
    platform = Platform(scratch)
    impostor = EnclaveMeasurement(hashlib.sha256(b"impostor enclave").digest())
    genuine = platform.issue_quote(impostor, binding)
    platform.close()

    results = {}
    posts = 0
    for label, quote in (("forged_signature", forged), ("other_measurement", genuine)):
        body = EnclaveKeyBundle(attacker, attacker_pub, quote).quote_body()
        client = ctx.client(srv, on_get=lambda path, _b, body=body: body)
        results[label] = _attempt(lambda: client.create_user("victim", b"hunter2", b"reset"))
        posts += sum(1 for m, _, _ in client.transport.transcript if m == "POST")
        client.close()
    codes = set(results.values())
    code = codes.pop() if len(codes) == 1 else "mixed"
    details = {"attempts": results, "requests_sent_after_substitution": posts}
    if posts:
        return Observation(Outcome("credentials_leaked"), details)
    return Observation(Outcome(REJECTED, code), details)


def pubkey_substitution(ctx: ScenarioContext) -> Observation:
    srv = ctx.server()
    attacker_pub = X25519PrivateKey.generate().public_key().public_bytes_raw()

    def swap(path, body):
        _, quote = parse_quote_body(body)
        raw = quote.to_bytes()
        return struct.pack(">B32sH", body[0], attacker_pub, len(raw)) + raw

    client = ctx.client(srv, on_get=swap)
    code = _attempt(lambda: client.create_user("victim", b"hunter2", b"reset"))
    posts = sum(1 for m, _, _ in client.transport.transcript if m == "POST")
    client.close()
    return Observation(Outcome(REJECTED, code), {"requests_sent": posts})


def ciphertext_tamper(ctx: ScenarioContext) -> Observation:
    srv = ctx.server()
    owner, pw, _, key = ctx.provision(srv)
    owner.close()
    before = srv.metrics()["audit_entries"]

    header = struct.calcsize(">B32sQ12sI")

    def flip(offset_range):
        def mutate(body: bytes) -> bytes:
            lo, hi = offset_range(len(body))
            i = ctx.rng.randrange(lo, hi)
            out = bytearray(body)
            out[i] ^= 1 << ctx.rng.randrange(8)
            return bytes(out)

        return mutate

    def bump_seq(body: bytes) -> bytes:
        wire = WireRequest.from_bytes(body)
        return wire._replace(message_seq=wire.message_seq + 1000).to_bytes()

    variants = {
        "ciphertext": flip(lambda n: (header, n)),
        "nonce": flip(lambda n: (41, 53)),
        "sequence": bump_seq,
    }
    codes = {}
    for label, mutate in variants.items():
        client = ctx.client(srv, on_post=mutate).connect()
        codes[label] = _attempt(lambda: client.sign("alice", pw, key.key_id, ctx.digest()))
        client.close()
    request_side_audit = srv.metrics()["audit_entries"] - before

    # tampering with the response leaves the client with nothing
    client = ctx.client(srv, on_response=flip(lambda n: (struct.calcsize(">BQ12sI"), n))).connect()
    codes["response"] = _attempt(lambda: client.sign("alice", pw, key.key_id, ctx.digest()))
    client.close()

    distinct = set(codes.values())
    code = distinct.pop() if len(distinct) == 1 else "mixed"
    details = {"codes": codes, "operations_run_for_tampered_requests": request_side_audit}
    if request_side_audit:
        return Observation(Outcome("tampered_request_executed"), details)
    return Observation(Outcome(REJECTED, code), details)


def replay(ctx: ScenarioContext) -> Observation:
    srv = ctx.server()
    owner, pw, _, key = ctx.provision(srv)
    owner.close()
    client = ctx.client(srv, on_post=None).connect()
    client.sign("alice", pw, key.key_id, ctx.digest())
    captured = client.transport.transcript[-1][2]
    before = srv.metrics()["audit_entries"]
    status, doc = srv.probe("POST", "/v1/process", captured)
    after = srv.metrics()["audit_entries"]
    client.close()
    details = {"http_status": status, "extra_operations": after - before}
    if after != before:
        return Observation(Outcome("replay_executed"), details)
    return Observation(Outcome(REJECTED, doc.get("code") if isinstance(doc, dict) else None), details)


def reorder(ctx: ScenarioContext) -> Observation:
    srv = ctx.server()
    owner, pw, _, key = ctx.provision(srv)
    owner.close()
    client = ctx.client(srv).connect()
    msgs = [
        CanonicalMessage.build("pksign", ("uid", "alice"), ("pswd", pw), ("key_id", key.key_id), ("msg_hash", ctx.digest()))
        for _ in range(2)
    ]
    first, second = (seal_request(client.session, m).to_bytes() for m in msgs)
    late_status, _ = srv.probe("POST", "/v1/process", second)
    status, doc = srv.probe("POST", "/v1/process", first)
    client.close()
    details = {"later_request_status": late_status, "earlier_request_status": status}
    return Observation(Outcome(REJECTED, doc.get("code") if isinstance(doc, dict) else "accepted"), details)


# -- host adversary ----------------------------------------------------------


def rollback(ctx: ScenarioContext) -> Observation:
    srv = ctx.server()
    client, pw, _, key = ctx.provision(srv)
    blob = srv.data_dir / "keydb.sealed"
    snapshots = []
    for _ in range(ctx.rng.randint(3, 6)):
        for _ in range(ctx.rng.randint(1, 4)):
            client.sign("alice", pw, key.key_id, ctx.digest())
        if ctx.rng.random() < 0.5:
            _attempt(lambda: client.sign("alice", b"wrong", key.key_id, ctx.digest()))
            srv.advance_clock(ctx.rng.randint(1, 5))
        srv.checkpoint()
        snapshots.append(blob.read_bytes())
    client.close()
    srv.stop()
    details: dict = {"snapshots": len(snapshots)}

    stale = ctx.rng.randrange(len(snapshots))
    blob.write_bytes(snapshots[stale])
    srv.start()
    details["restored_snapshot"] = stale
    details["restored_blob"] = _all_endpoints(srv)
    details["restored_blob_exit"] = srv.stop()

    blob.unlink()
    srv.start()
    details["deleted_blob"] = _all_endpoints(srv)
    details["deleted_blob_exit"] = srv.stop()

    ok = (
        _all_failed(details["restored_blob"], "rollback_detected")
        and _all_failed(details["deleted_blob"], "rollback_detected")
        and details["restored_blob_exit"] == 2
        and details["deleted_blob_exit"] == 2
    )
    return Observation(Outcome(FAILED_STATE, "rollback_detected") if ok else Outcome("served_stale_state"), details)


def clock_reset(ctx: ScenarioContext) -> Observation:
    srv = ctx.server()
    client, pw, _, key = ctx.provision(srv)
    srv.checkpoint()
    srv.reset_clock()
    details: dict = {"next_request": _attempt(lambda: client.sign("alice", pw, key.key_id, ctx.digest()))}
    client.close()
    details["after_reset"] = _all_endpoints(srv)
    details["exit"] = srv.stop()
    srv.start()
    details["after_restart"] = _all_endpoints(srv)
    details["restart_exit"] = srv.stop()
    ok = (
        details["next_request"] == "clock_tampered"
        and _all_failed(details["after_reset"], "clock_tampered")
        and _all_failed(details["after_restart"], "clock_tampered")
        and details["exit"] == 3
        and details["restart_exit"] == 3
    )
    return Observation(Outcome(FAILED_STATE, "clock_tampered") if ok else Outcome("kept_serving"), details)


def _needles(secrets: dict[str, bytes]) -> dict[str, bytes]:
    out = {}
    for name, value in secrets.items():
        out[name] = value
        out[f"{name} (hex)"] = value.hex().encode()
        out[f"{name} (base64)"] = base64.b64encode(value).rstrip(b"=")
    return out


def _search(haystacks: dict[str, bytes], secrets: dict[str, bytes]) -> list[str]:
    needles = _needles(secrets)
    return sorted(f"{n} in {h}" for h, data in haystacks.items() for n, v in needles.items() if v in data)


def _host_files(srv: ManagedServer) -> dict[str, bytes]:
    files = {str(p.relative_to(srv.data_dir)): p.read_bytes() for p in srv.data_dir.rglob("*") if p.is_file()}
    return {k: v for k, v in files.items() if Path(k).name not in HARDWARE_SECRETS}


def offline_grinding(ctx: ScenarioContext) -> Observation:
    srv = ctx.server()
    client = ctx.client(srv).connect()
    pw, reset = ctx.secret(12), ctx.secret(12)
    client.create_user("carol", pw, reset)
    local = crypto.generate(crypto.P256)
    key = client.import_key("carol", pw, crypto.export_pkcs8(local))
    client.sign("carol", pw, key.key_id, ctx.digest())
    client.close()
    srv.checkpoint()
    scalar = local.private_numbers().private_value.to_bytes(32, "big")
    secrets = {"password": pw, "reset_password": reset, "private_scalar": scalar, "uid": b"carol"}
    found = _search(_host_files(srv), secrets)

    srv.stop()

    # the blob only opens inside the enclave identity on the platform that sealed it:
    # try the attacker's own enclave on the same machine, and the real enclave elsewhere
    blob = (srv.data_dir / "keydb.sealed").read_bytes()
    same_machine = ctx.workdir / "grinder-same"
    shutil.copytree(srv.data_dir / "platform", same_machine / "platform")
    elsewhere = ctx.workdir / "grinder-foreign"
    (elsewhere / "platform").mkdir(parents=True)
    shutil.copy(srv.data_dir / "platform" / "authority.key", elsewhere / "platform" / "authority.key")
    attempts = {}
    for label, where, measurement in (
        ("other_enclave_same_platform", same_machine, EnclaveMeasurement(hashlib.sha256(b"grinder").digest())),
        ("same_enclave_other_platform", elsewhere, srv.anchor().expected_measurement),
    ):
        platform = Platform(where, manual_clock=True)
        try:
            platform.unseal(blob, measurement)
            attempts[label] = "opened"
        except CKSError as err:
            attempts[label] = err.code
        finally:
            platform.close()
    details = {"secrets_found": found, "unseal_attempts": attempts}
    if found or "opened" in attempts.values():
        return Observation(Outcome("information_leaked"), details)
    return Observation(Outcome(NO_GAIN), details)


def guessing_bound(window_s: int, base_s: int = 1) -> int:
    """Most password comparisons one account allows in ``window_s`` seconds.

    Failure k locks the account for ``base * 2**(k-1)`` seconds, so comparison
    k+1 happens no earlier than ``base * (2**k - 1)``. Counting k with
    ``base * (2**(k-1) - 1) <= window`` plus the comparison at the window edge
    gives ``floor(log2(window / base)) + 2``.
    """
    return math.floor(math.log2(window_s / base_s)) + 2


def online_guessing(ctx: ScenarioContext, guesses: int = 10_000, window_s: int = 3600, clients: int = 4) -> Observation:
    srv = ctx.server()
    owner = ctx.client(srv).connect()
    owner.create_user("dave", ctx.secret(20), ctx.secret(20), base_lockout=1)
    owner.close()
    attackers = [ctx.client(srv).connect() for _ in range(clients)]
    dictionary = [ctx.secret(8) for _ in range(guesses)]
    start = srv.metrics()["password_comparisons"]
    outcomes = {"auth_failed": 0, "rate_limited": 0}
    other: list[str] = []

    def guess(client: KeyStoreClient, word: bytes) -> str:
        try:
            client.sign("dave", word, "00" * 32, b"\0" * 32)
        except (AuthFailed, RateLimited) as err:
            return err.code
        except CKSError as err:
            return err.code
        return "ok"

    sent = 0
    with ThreadPoolExecutor(max_workers=clients) as pool:
        for t in range(window_s + 1):
            quota = guesses * (t + 1) // (window_s + 1) - sent
            batch = [pool.submit(guess, attackers[i % clients], dictionary[sent + i]) for i in range(quota)]
            sent += quota
            for fut in batch:
                code = fut.result()
                if code in outcomes:
                    outcomes[code] += 1
                else:
                    other.append(code)
            if t < window_s:
                srv.advance_clock(1)
    for c in attackers:
        c.close()
    comparisons = srv.metrics()["password_comparisons"] - start
    bound = guessing_bound(window_s)
    srv.stop()
    details = {
        "guesses": sent,
        "simulated_seconds": window_s,
        "concurrent_clients": clients,
        "password_comparisons": comparisons,
        "bound": bound,
        "responses": outcomes,
        "unexpected": other[:10],
    }
    if comparisons > bound or other:
        return Observation(Outcome("rate_limit_exceeded"), details)
    return Observation(Outcome(REJECTED, "rate_limited"), details)


def host_log_inspection(ctx: ScenarioContext) -> Observation:
    srv = ctx.server(log_level="DEBUG")
    client = ctx.client(srv).connect()
    pw, reset, new_pw = ctx.secret(), ctx.secret(), ctx.secret()
    client.create_user("erin", pw, reset)
    local = crypto.generate(crypto.P256)
    key = client.import_key("erin", pw, crypto.export_pkcs8(local))
    digest = ctx.digest()
    signature = client.sign("erin", pw, key.key_id, digest)
    plaintext = b"attack at dawn " + ctx.secret(8)
    recovered = client.decrypt("erin", pw, key.key_id, crypto.encrypt_to(local.public_key(), plaintext))
    client.reset_password("erin", reset, new_pw)
    _attempt(lambda: client.sign("erin", b"not-the-password", key.key_id, digest))
    client.close()
    srv.stop()
    secrets = {
        "password": pw,
        "reset_password": reset,
        "new_password": new_pw,
        "plaintext": recovered,
        "signature": signature,
        "message_digest": digest,
        "private_scalar": local.private_numbers().private_value.to_bytes(32, "big"),
    }
    haystacks = _host_files(srv)
    haystacks["host log"] = srv.log_path.read_bytes()
    found = _search(haystacks, secrets)
    details = {"inspected": sorted(haystacks), "secrets_found": found, "decrypt_ok": recovered == plaintext}
    return Observation(Outcome("information_leaked") if found else Outcome(NO_GAIN), details)


def credentials_after_attestation(ctx: ScenarioContext) -> Observation:
    srv = ctx.server()
    honest = ctx.client(srv, on_get=None, on_post=None)
    honest.connect()
    honest.create_user("frank", ctx.secret(), ctx.secret())
    order = [m for m, _, _ in honest.transport.transcript]
    honest.close()

    impostor = EnclaveMeasurement(hashlib.sha256(b"look-alike enclave").digest())
    anchor = srv.anchor()

    def wrong_enclave(path, body):
        enclave_public, quote = parse_quote_body(body)
        fake = Quote(impostor, quote.report_data, quote.authority_signature)
        raw = fake.to_bytes()
        return struct.pack(">B32sH", body[0], enclave_public, len(raw)) + raw

    victim = ctx.client(srv, on_get=wrong_enclave)
    code = _attempt(lambda: victim.sign("frank", b"password", "00" * 32, b"\0" * 32))
    posts = [b for m, _, b in victim.transport.transcript if m == "POST"]
    victim.close()
    details = {
        "honest_order": order,
        "posts_after_bad_quote": len(posts),
        "anchor_measurement": anchor.expected_measurement.hex(),
    }
    if posts or order[0] != "GET":
        return Observation(Outcome("credentials_leaked"), details)
    return Observation(Outcome(REJECTED, code), details)


SCENARIOS: dict[str, AttackScenario] = {
    s.name: s
    for s in (
        AttackScenario("quote_substitution", "forged or foreign quote in place of the enclave's", quote_substitution, Outcome(REJECTED, "quote_invalid")),
        AttackScenario("pubkey_substitution", "attacker key swapped into a genuine quote body", pubkey_substitution, Outcome(REJECTED, "binding_mismatch")),
        AttackScenario("ciphertext_tamper", "bit flips in request and response bodies", ciphertext_tamper, Outcome(REJECTED, "decrypt_failure")),
        AttackScenario("replay", "captured sign request sent again", replay, Outcome(REJECTED, "replay_detected")),
        AttackScenario("reorder", "two requests delivered out of order", reorder, Outcome(REJECTED, "replay_detected")),
        AttackScenario("rollback", "earlier or missing sealed blob at restart", rollback, Outcome(FAILED_STATE, "rollback_detected")),
        AttackScenario("clock_reset", "trusted time source reset under the enclave", clock_reset, Outcome(FAILED_STATE, "clock_tampered")),
        AttackScenario("offline_grinding", "search and unseal the stolen blob", offline_grinding, Outcome(NO_GAIN)),
        AttackScenario("online_guessing", "10,000 guesses over a simulated hour", online_guessing, Outcome(REJECTED, "rate_limited")),
        AttackScenario("host_log_inspection", "secrets in host logs or files", host_log_inspection, Outcome(NO_GAIN)),
        AttackScenario(
            "credentials_after_attestation",
            "no request before the quote verifies",
            credentials_after_attestation,
            Outcome(REJECTED, "quote_invalid"),
        ),
    )
}


def run_scenario(scenario: AttackScenario, seed: int, workdir: Path) -> Verdict:
    workdir = Path(workdir) / scenario.name
    workdir.mkdir(parents=True, exist_ok=True)
    ctx = ScenarioContext(scenario.name, seed, workdir)
    try:
        obs = scenario.setup(ctx)
    except Exception as err:  # a crash is a failed verdict, not a harness error
        log.exception("scenario %s raised", scenario.name)
        obs = Observation(Outcome("error", _code(err)), {"error": f"{type(err).__name__}: {err}"})
    finally:
        ctx.close()
    passed = obs.outcome == scenario.expected_outcome
    return Verdict(scenario.name, str(scenario.expected_outcome), str(obs.outcome), passed, obs.details)
