"""In-process transport: talk to an ``Enclave`` object without HTTP.

Used for embedding and for tests that want the full client path (sealing,
canonical encoding, error mapping) without a server process.
"""

from __future__ import annotations


class LocalTransport:
    def __init__(self, enclave):
        self.enclave = enclave
        self.requests = 0

    def get(self, path: str) -> bytes:
        if path != "/v1/quote":
            raise ValueError(f"unknown path {path}")
        return self.enclave.quote_body()

    def post(self, path: str, body: bytes) -> bytes:
        if path != "/v1/process":
            raise ValueError(f"unknown path {path}")
        self.requests += 1
        return self.enclave.process(body)

    def close(self) -> None:
        pass
