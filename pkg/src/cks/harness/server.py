"""Launch and steer a ``cks-server --unsafe-harness`` subprocess."""

from __future__ import annotations

import json
import os
import signal
import socket
import subprocess
import sys
import time
from pathlib import Path

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from ..client.config import TrustAnchor
from ..client.transport import HttpTransport
from ..errors import TransportError
from ..platform import measure_enclave

JSON = "application/json"


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


class ManagedServer:
    """A host process in harness mode with its own data directory and log file.

    The harness drives it only through what an adversary controlling the host
    has: the HTTP endpoints, the harness hooks (clock and fault injection), the
    files under ``data_dir`` and the process itself.
    """

    def __init__(
        self,
        data_dir: str | os.PathLike,
        *,
        kdf_cost: int = 10,
        host_rps: float = 1_000_000,
        time_offset: int | None = None,
        checkpoint_interval: float = 60.0,
        log_level: str = "DEBUG",
    ):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.kdf_cost = kdf_cost
        self.host_rps = host_rps
        self.time_offset = time_offset
        self.checkpoint_interval = checkpoint_interval
        self.log_level = log_level
        self.log_path = self.data_dir.parent / f"{self.data_dir.name}.log"
        self.port = free_port()
        self.proc: subprocess.Popen | None = None
        self._control: HttpTransport | None = None
        self.returncode: int | None = None

    @property
    def url(self) -> str:
        return f"http://127.0.0.1:{self.port}"

    def _argv(self, first_boot: bool) -> list[str]:
        argv = [
            sys.executable,
            "-m",
            "cks.host.cli",
            "--listen",
            f"127.0.0.1:{self.port}",
            "--data-dir",
            str(self.data_dir),
            "--host-rps",
            str(self.host_rps),
            "--kdf-cost",
            str(self.kdf_cost),
            "--checkpoint-interval",
            str(self.checkpoint_interval),
            "--log-level",
            self.log_level,
            "--unsafe-harness",
        ]
        if first_boot and self.time_offset is not None:
            argv += ["--time-offset", str(self.time_offset)]
        return argv

    def start(self, timeout: float = 30.0) -> "ManagedServer":
        first_boot = not (self.data_dir / "keydb.sealed").exists()
        log = open(self.log_path, "ab")
        self.proc = subprocess.Popen(self._argv(first_boot), stdout=log, stderr=subprocess.STDOUT)
        log.close()
        self.returncode = None
        self._control = HttpTransport(self.url, timeout=10)
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if self.proc.poll() is not None:
                raise RuntimeError(f"server exited early with code {self.proc.returncode}")
            try:
                self._control.exchange("GET", "/v1/harness/metrics")
                return self
            except TransportError:
                time.sleep(0.05)
        raise RuntimeError("server did not come up")

    def stop(self, sig: int = signal.SIGTERM, timeout: float = 15.0) -> int:
        if self._control is not None:
            self._control.close()
        if self.proc is None:
            return self.returncode or 0
        self.proc.send_signal(sig)
        try:
            self.returncode = self.proc.wait(timeout)
        except subprocess.TimeoutExpired:
            self.proc.kill()
            self.returncode = self.proc.wait()
        self.proc = None
        return self.returncode

    def kill(self) -> int:
        return self.stop(signal.SIGKILL)

    def restart(self) -> "ManagedServer":
        self.stop()
        return self.start()

    def __enter__(self) -> "ManagedServer":
        return self.start() if self.proc is None else self

    def __exit__(self, *exc) -> None:
        if self.proc is not None:
            self.stop()

    # -- harness hooks ------------------------------------------------------

    def _json(self, method: str, path: str, doc: dict | None = None) -> tuple[int, dict]:
        body = json.dumps(doc).encode() if doc is not None else b""
        status, raw = self._control.exchange(method, path, body, JSON)
        return status, json.loads(raw) if raw else {}

    def advance_clock(self, seconds: int) -> int:
        return self._json("POST", "/v1/harness/clock/advance", {"seconds": seconds})[1]["ticks"]

    def reset_clock(self) -> None:
        self._json("POST", "/v1/harness/clock/reset")

    def checkpoint(self) -> tuple[int, dict]:
        return self._json("POST", "/v1/harness/checkpoint")

    def arm_fault(self, point: str = "after_audit", count: int = 1) -> None:
        self._json("POST", "/v1/harness/fault", {"point": point, "count": count})

    def metrics(self) -> dict:
        return self._json("GET", "/v1/harness/metrics")[1]

    def probe(self, method: str, path: str, body: bytes = b"") -> tuple[int, dict | bytes]:
        """Raw call to a public endpoint; JSON error bodies are decoded."""
        status, raw = self._control.exchange(method, path, body)
        if status != 200:
            try:
                return status, json.loads(raw)
            except ValueError:
                return status, raw
        return status, raw

    def anchor(self) -> TrustAnchor:
        """The values an operator would publish with ``cks-server --print-anchor``."""
        raw = (self.data_dir / "platform" / "authority.key").read_bytes()
        public = Ed25519PrivateKey.from_private_bytes(raw).public_key().public_bytes_raw()
        return TrustAnchor(public, measure_enclave())
