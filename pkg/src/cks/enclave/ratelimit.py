"""Per-account exponential back-off for password checks."""

from __future__ import annotations

from dataclasses import dataclass

MAX_LOCKOUT_S = 86400
DEFAULT_BASE_LOCKOUT_S = 1


@dataclass
class RateLimitState:
    consecutive_failures: int = 0
    locked_until: int = 0
    base_lockout_s: int = DEFAULT_BASE_LOCKOUT_S


def lockout_duration(base_lockout_s: int, failures: int) -> int:
    """``base * 2**(failures - 1)`` seconds, capped at one day."""
    if failures <= 0:
        return 0
    if failures > 64:
        return MAX_LOCKOUT_S
    return min(base_lockout_s * (1 << (failures - 1)), MAX_LOCKOUT_S)


def check_rate_limit(state: RateLimitState, now: int) -> int:
    """Return 0 if an attempt is allowed now, else the seconds to wait."""
    if now >= state.locked_until:
        return 0
    return state.locked_until - now


def record_failure(state: RateLimitState, now: int) -> int:
    state.consecutive_failures += 1
    lock = lockout_duration(state.base_lockout_s, state.consecutive_failures)
    state.locked_until = max(state.locked_until, now + lock)
    return lock


def record_success(state: RateLimitState) -> None:
    state.consecutive_failures = 0
    state.locked_until = 0
