import hashlib

import pytest

from cks import crypto
from cks.client.api import KeyStoreClient
from cks.client.config import TrustAnchor
from cks.client.local import LocalTransport
from cks.enclave import Enclave, PasswordHasher
from cks.errors import EnclaveFailed
from cks.platform import Platform

# low scrypt cost keeps the suite fast; production default is 2**14
FAST_KDF = 10


class Deployment:
    """One simulated machine: platform, enclave and the blobs it has sealed."""

    def __init__(self, root, time_offset=None, session_lifetime=None):
        self.root = root
        self.time_offset = time_offset
        self.session_lifetime = session_lifetime
        self.blobs: list[bytes] = []
        self.platform = Platform(root, manual_clock=True)
        self.enclave = None
        self.boot(None, time_offset)

    def boot(self, blob, offset=None):
        self.enclave = Enclave(
            self.platform,
            hasher=PasswordHasher(log2_n=FAST_KDF),
            blob_sink=self.blobs.append,
            session_lifetime=self.session_lifetime,
        )
        try:
            self.enclave.initialize(blob, offset)
        except EnclaveFailed:
            return self.enclave  # it records the failure and refuses all requests
        self.enclave.checkpoint()  # as the host does right after boot
        return self.enclave

    def restart(self, blob=None):
        """Stop (sealing if still serving) and boot from ``blob`` or the latest seal."""
        if self.enclave.state.value == "serving":
            self.enclave.shutdown()
        self.platform.close()
        self.platform = Platform(self.root, manual_clock=True)
        return self.boot(self.blobs[-1] if blob is None else blob)

    def anchor(self):
        return TrustAnchor(self.platform.authority_public_bytes(), self.enclave.measurement)

    def client(self):
        return KeyStoreClient(LocalTransport(self.enclave), self.anchor()).connect()

    def advance(self, seconds):
        self.platform.advance_clock(seconds)


@pytest.fixture
def deployment(tmp_path):
    d = Deployment(tmp_path / "host")
    yield d
    d.platform.close()


@pytest.fixture
def client(deployment):
    return deployment.client()


@pytest.fixture
def alice(client):
    """A registered user with one p256 key: ``(client, password, key_info)``."""
    client.create_user("alice", b"pw1", b"rpw1")
    key = client.gen_key("alice", b"pw1", crypto.P256)
    return client, b"pw1", key


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


# -- acceptance reporting ----------------------------------------------------
#
# Tests marked ``@pytest.mark.acceptance(n, "title")`` get one PASS/FAIL line in
# the terminal summary; ``record_measure`` adds the measured value to it.

_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion")


@pytest.fixture
def record_measure(request):
    def record(text: str) -> None:
        request.node.user_properties.append(("measure", text))

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or (rep.when != "call" and rep.passed):
        return
    number, title = marker.args
    measured = "; ".join(v for k, v in item.user_properties if k == "measure")
    _ACCEPTANCE[number] = ("PASS" if rep.passed else "FAIL", title, measured)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        verdict, title, measured = _ACCEPTANCE[number]
        line = f"[{verdict}] {number}. {title}"
        terminalreporter.write_line(line + (f" -- {measured}" if measured else ""))
