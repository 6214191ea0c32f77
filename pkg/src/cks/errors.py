"""Error types shared by the enclave, host and client.

Every error carries a stable ``code`` string. Enclave errors travel inside the
encrypted response as a ``code`` atom; channel and platform errors surface as
plain HTTP error bodies.
"""

from __future__ import annotations


class CKSError(Exception):
    code = "internal_error"

    def __init__(self, message: str = "", **details):
        super().__init__(message or self.code.replace("_", " "))
        self.details = details

    @property
    def message(self) -> str:
        return str(self.args[0]) if self.args else self.code


# -- platform -----------------------------------------------------------------


class PlatformError(CKSError):
    code = "platform_error"


class SealMismatch(PlatformError):
    code = "seal_mismatch"


class IntegrityFailure(PlatformError):
    code = "integrity_failure"


class UnknownCounter(PlatformError):
    code = "unknown_counter"


# -- attested channel ---------------------------------------------------------


class ChannelError(CKSError):
    code = "channel_error"


class QuoteInvalid(ChannelError):
    code = "quote_invalid"


class BindingMismatch(ChannelError):
    code = "binding_mismatch"


class MalformedPoint(ChannelError):
    code = "malformed_point"


class ReplayDetected(ChannelError):
    code = "replay_detected"


class DecryptFailure(ChannelError):
    code = "decrypt_failure"


class VersionMismatch(ChannelError):
    code = "version_mismatch"


class SessionExpired(ChannelError):
    code = "session_expired"


class InvalidTag(CKSError):
    code = "invalid_tag"


class DecodeError(CKSError):
    code = "malformed_encoding"


# -- enclave lifecycle --------------------------------------------------------


class EnclaveFailed(CKSError):
    """The enclave hit an irrecoverable condition and refuses all requests."""

    code = "enclave_failed"


class RollbackDetected(EnclaveFailed):
    code = "rollback_detected"


class ClockTampered(EnclaveFailed):
    code = "clock_tampered"


class RefusedNotServing(CKSError):
    code = "not_serving"


# -- request handlers (returned to the client inside the channel) -------------


class EnclaveError(CKSError):
    pass


class AuthFailed(EnclaveError):
    code = "auth_failed"

    def __init__(self, message: str = "authentication failed", **details):
        super().__init__(message, **details)


class RateLimited(EnclaveError):
    code = "rate_limited"

    def __init__(self, retry_after: int, message: str = ""):
        super().__init__(message or f"too many attempts, retry after {retry_after}s")
        self.retry_after = retry_after


class PolicyViolation(EnclaveError):
    code = "policy_violation"


class PolicyInvalid(EnclaveError):
    code = "policy_invalid"


class UnknownKey(EnclaveError):
    code = "unknown_key"


class NotOwner(EnclaveError):
    code = "not_owner"


class MalformedRequest(EnclaveError):
    code = "malformed_request"


class UidTaken(EnclaveError):
    code = "uid_taken"


class WeakInput(EnclaveError):
    code = "weak_input"


class UnsupportedAlgorithm(EnclaveError):
    code = "unsupported_algorithm"


class MalformedKey(EnclaveError):
    code = "malformed_key"


class DecryptionFailed(EnclaveError):
    code = "decryption_failed"


class UnknownDelegatee(EnclaveError):
    code = "unknown_delegatee"


class InvalidRange(EnclaveError):
    code = "invalid_range"


class TransportError(CKSError):
    code = "transport"


class RemoteError(CKSError):
    """An error code received from the server that has no local class."""

    def __init__(self, code: str, message: str = "", **details):
        super().__init__(message or code, **details)
        self.code = code


def _all_subclasses(cls):
    for sub in cls.__subclasses__():
        yield sub
        yield from _all_subclasses(sub)


_BY_CODE: dict[str, type[CKSError]] = {}
for _cls in _all_subclasses(CKSError):
    _BY_CODE.setdefault(_cls.code, _cls)


def error_from_code(code: str, message: str = "", retry_after: int | None = None) -> CKSError:
    """Rebuild the most specific exception for a wire error code."""
    if code == RateLimited.code:
        return RateLimited(retry_after or 0, message)
    cls = _BY_CODE.get(code)
    if cls is None or cls is RemoteError:
        return RemoteError(code, message)
    err = cls(message) if message else cls()
    return err
