"""Per-source token buckets applied before a request reaches the enclave."""

from __future__ import annotations

import threading
import time


class TokenBucketThrottle:
    """One bucket per source address; ``rate`` tokens/s, ``capacity`` burst.

    Buckets start full. Idle sources are dropped once their bucket would have
    refilled anyway, so memory stays proportional to recently active sources.
    """

    def __init__(self, rate: float, capacity: float | None = None, clock=time.monotonic):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.rate = float(rate)
        self.capacity = float(capacity if capacity is not None else rate)
        self._clock = clock
        self._buckets: dict[str, tuple[float, float]] = {}
        self._lock = threading.Lock()
        self._last_prune = 0.0

    def allow(self, source: str, now: float | None = None) -> bool:
        now = self._clock() if now is None else now
        with self._lock:
            tokens, last = self._buckets.get(source, (self.capacity, now))
            tokens = min(self.capacity, tokens + max(0.0, now - last) * self.rate)
            allowed = tokens >= 1.0
            if allowed:
                tokens -= 1.0
            self._buckets[source] = (tokens, now)
            if now - self._last_prune > 60:
                self._prune(now)
            return allowed

    def _prune(self, now: float) -> None:
        full_after = self.capacity / self.rate
        self._buckets = {s: b for s, b in self._buckets.items() if now - b[1] < full_after}
        self._last_prune = now

    def __len__(self) -> int:
        return len(self._buckets)
