"""Client configuration: trust anchors, server address and password source.

The file is plain ``key = value`` text; ``#`` starts a comment. Trust anchors
are base64::

    server_url = http://127.0.0.1:8700
    authority_public_key = <base64 Ed25519 public key>
    expected_measurement = <base64 32-byte measurement>
    uid = alice
    password_source = prompt

Passwords are never read from or written to this file. With
``password_source = env`` they come from ``CKS_PASSWORD``, ``CKS_NEW_PASSWORD``,
``CKS_RESET_PASSWORD`` and ``CKS_NEW_RESET_PASSWORD``; with ``file`` from the
paths named by ``password_file`` (and ``new_password_file`` and so on).
"""

from __future__ import annotations

import base64
import binascii
import os
from typing import NamedTuple
from pathlib import Path

from ..platform import EnclaveMeasurement

PASSWORD_SOURCES = ("prompt", "env", "file")
PURPOSES = ("password", "new_password", "reset_password", "new_reset_password")
_PROMPTS = {
    "password": "Password: ",
    "new_password": "New password: ",
    "reset_password": "Reset password: ",
    "new_reset_password": "New reset password: ",
}


class ConfigError(ValueError):
    pass


class TrustAnchor(NamedTuple):
    authority_public_key: bytes
    expected_measurement: EnclaveMeasurement


class ClientConfig:
    def __init__(
        self,
        server_url: str,
        trust_anchor: TrustAnchor,
        uid: str | None = None,
        password_source: str = "prompt",
        password_files: dict[str, str] | None = None,
    ):
        self.server_url = server_url
        self.trust_anchor = trust_anchor
        self.uid = uid
        self.password_source = password_source
        self.password_files = dict(password_files or {})

    def __repr__(self) -> str:
        return f"ClientConfig(server_url={self.server_url!r}, uid={self.uid!r}, password_source={self.password_source!r})"

    def password(self, purpose: str = "password") -> bytes:
        if purpose not in PURPOSES:
            raise ValueError(f"unknown password purpose {purpose!r}")
        if self.password_source == "env":
            name = "CKS_" + purpose.upper()
            value = os.environ.get(name)
            if value is None:
                raise ConfigError(f"{name} is not set")
            return value.encode()
        if self.password_source == "file":
            path = self.password_files.get(purpose)
            if path is None:
                raise ConfigError(f"{purpose}_file is not configured")
            return Path(path).read_text().rstrip("\r\n").encode()
        import getpass

        return getpass.getpass(_PROMPTS[purpose]).encode()


def _b64(name: str, value: str) -> bytes:
    try:
        return base64.b64decode(value, validate=True)
    except binascii.Error as exc:
        raise ConfigError(f"{name} is not valid base64") from exc


def parse_config(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value")
        values[key.strip()] = value.strip()
    return values


def build_config(values: dict[str, str]) -> ClientConfig:
    for required in ("server_url", "authority_public_key", "expected_measurement"):
        if not values.get(required):
            raise ConfigError(f"{required} is required")
    measurement = _b64("expected_measurement", values["expected_measurement"])
    try:
        anchor = TrustAnchor(_b64("authority_public_key", values["authority_public_key"]), EnclaveMeasurement(measurement))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    source = values.get("password_source", "prompt")
    if source not in PASSWORD_SOURCES:
        raise ConfigError(f"password_source must be one of {', '.join(PASSWORD_SOURCES)}")
    files = {p: values[f"{p}_file"] for p in PURPOSES if values.get(f"{p}_file")}
    return ClientConfig(values["server_url"], anchor, values.get("uid") or None, source, files)


def load_config(path: str | os.PathLike) -> ClientConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return build_config(parse_config(text))
