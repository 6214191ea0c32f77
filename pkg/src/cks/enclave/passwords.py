"""Salted scrypt password verifiers.

Sealed state only ever holds verifiers. Because every request carries the
password, the enclave also keeps an in-memory keyed digest of the last
password that verified for each account, so repeat requests skip scrypt.
That cache is never sealed.
"""

from __future__ import annotations

import hashlib
import hmac
import os
import struct
import threading
from dataclasses import dataclass

SALT_LEN = 16
HASH_LEN = 32
MAX_PASSWORD_LEN = 128

_FMT = struct.Struct(">BBB16s32s")


@dataclass(frozen=True)
class Verifier:
    log2_n: int
    r: int
    p: int
    salt: bytes
    digest: bytes

    def to_bytes(self) -> bytes:
        return _FMT.pack(self.log2_n, self.r, self.p, self.salt, self.digest)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Verifier":
        return cls(*_FMT.unpack(raw))


def _scrypt(password: bytes, salt: bytes, log2_n: int, r: int, p: int) -> bytes:
    return hashlib.scrypt(password, salt=salt, n=1 << log2_n, r=r, p=p, maxmem=2**27, dklen=HASH_LEN)


class PasswordHasher:
    def __init__(self, log2_n: int = 14, r: int = 8, p: int = 1):
        self.log2_n, self.r, self.p = log2_n, r, p
        self._dummy = self.make(b"\0" * 16)
        self._cache_key = os.urandom(32)
        self._cache: dict[tuple[str, str], bytes] = {}
        self._cache_lock = threading.Lock()

    def make(self, password: bytes) -> Verifier:
        salt = os.urandom(SALT_LEN)
        return Verifier(self.log2_n, self.r, self.p, salt, _scrypt(password, salt, self.log2_n, self.r, self.p))

    def check(self, verifier: Verifier, password: bytes) -> bool:
        candidate = _scrypt(password, verifier.salt, verifier.log2_n, verifier.r, verifier.p)
        return hmac.compare_digest(candidate, verifier.digest)

    def burn(self, password: bytes) -> None:
        """Spend the same work as a real check, for accounts that do not exist."""
        self.check(self._dummy, password)

    def _tag(self, verifier: Verifier, password: bytes) -> bytes:
        return hmac.new(self._cache_key, verifier.salt + password, hashlib.sha256).digest()

    def check_cached(self, slot: tuple[str, str], verifier: Verifier, password: bytes) -> bool:
        tag = self._tag(verifier, password)
        with self._cache_lock:
            known = self._cache.get(slot)
        if known is not None and hmac.compare_digest(known, tag):
            return True
        if not self.check(verifier, password):
            return False
        with self._cache_lock:
            self._cache[slot] = tag
        return True

    def forget(self, uid: str) -> None:
        with self._cache_lock:
            for slot in [s for s in self._cache if s[0] == uid]:
                del self._cache[slot]
