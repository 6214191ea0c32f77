"""HTTP/1.1 transport for the attested channel.

The client speaks just enough HTTP to exchange opaque bodies with the host:
``Content-Length`` framing over one keep-alive socket. ``http.client`` would do,
but its import chain (``email``, ``ssl``) costs more than a localhost round
trip, and the CLI pays that on every invocation. No TLS is needed because the
attested channel already authenticates and encrypts every body.
"""

from __future__ import annotations

import socket
from typing import Protocol
from urllib.parse import urlsplit

from ..errors import CKSError, TransportError, error_from_code

OCTETS = "application/octet-stream"
MAX_HEADER_BYTES = 64 * 1024


class Transport(Protocol):
    def get(self, path: str) -> bytes: ...

    def post(self, path: str, body: bytes) -> bytes: ...

    def close(self) -> None: ...


def http_error(status: int, body: bytes) -> CKSError:
    """Map a non-200 host reply to an exception (JSON ``{"code", "message"}`` bodies)."""
    import json

    try:
        doc = json.loads(body)
        code, message = doc["code"], doc.get("message", "")
    except (ValueError, KeyError, TypeError):
        return TransportError(f"HTTP {status}")
    return error_from_code(code, message)


class _Disconnected(Exception):
    pass


class HttpTransport:
    """One persistent connection to the host; reconnects once if it drops."""

    def __init__(self, server_url: str, timeout: float = 30.0):
        parts = urlsplit(server_url)
        if parts.scheme != "http" or not parts.hostname:
            raise TransportError(f"unsupported server url {server_url!r} (expected http://host:port)")
        self.host = parts.hostname
        self.port = parts.port or 80
        self.prefix = parts.path.rstrip("/")
        self.timeout = timeout
        self._sock: socket.socket | None = None
        self._buf = b""

    def _connect(self) -> socket.socket:
        if self._sock is None:
            try:
                self._sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
            except OSError as exc:
                raise TransportError(f"cannot reach {self.host}:{self.port}: {exc}") from exc
            self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._buf = b""
        return self._sock

    def _recv(self) -> bytes:
        chunk = self._sock.recv(65536)
        if not chunk:
            raise _Disconnected()
        return chunk

    def _read_response(self) -> tuple[int, bytes]:
        while b"\r\n\r\n" not in self._buf:
            if len(self._buf) > MAX_HEADER_BYTES:
                raise TransportError("response headers too large")
            self._buf += self._recv()
        head, self._buf = self._buf.split(b"\r\n\r\n", 1)
        lines = head.decode("latin-1").split("\r\n")
        try:
            status = int(lines[0].split(" ", 2)[1])
        except (IndexError, ValueError):
            raise TransportError(f"malformed status line {lines[0]!r}") from None
        headers = {}
        for line in lines[1:]:
            name, _, value = line.partition(":")
            headers[name.strip().lower()] = value.strip()
        if "chunked" in headers.get("transfer-encoding", "").lower():
            raise TransportError("chunked responses are not supported")
        length = int(headers.get("content-length", "0"))
        while len(self._buf) < length:
            self._buf += self._recv()
        body, self._buf = self._buf[:length], self._buf[length:]
        if headers.get("connection", "").lower() == "close":
            self.close()
        return status, body

    def exchange(self, method: str, path: str, body: bytes = b"", content_type: str = OCTETS) -> tuple[int, bytes]:
        """Send one request and return ``(status, body)`` without interpreting the status."""
        head = (
            f"{method} {self.prefix}{path} HTTP/1.1\r\n"
            f"Host: {self.host}:{self.port}\r\n"
            f"Content-Type: {content_type}\r\n"
            f"Content-Length: {len(body)}\r\n\r\n"
        ).encode("latin-1")
        for attempt in (0, 1):
            fresh = self._sock is None
            sock = self._connect()
            try:
                sock.sendall(head + body)
                return self._read_response()
            except (_Disconnected, ConnectionResetError, BrokenPipeError) as exc:
                self.close()
                # a reused keep-alive socket may have been closed by the server
                if fresh or attempt:
                    raise TransportError(f"connection to {self.host}:{self.port} lost") from exc
            except OSError as exc:
                self.close()
                raise TransportError(f"transport failure talking to {self.host}:{self.port}: {exc}") from exc
        raise AssertionError("unreachable")

    def _request(self, method: str, path: str, body: bytes = b"") -> bytes:
        status, data = self.exchange(method, path, body)
        if status != 200:
            raise http_error(status, data)
        return data

    def get(self, path: str) -> bytes:
        return self._request("GET", path)

    def post(self, path: str, body: bytes) -> bytes:
        return self._request("POST", path, body)

    def close(self) -> None:
        if self._sock is not None:
            self._sock.close()
            self._sock = None
            self._buf = b""
