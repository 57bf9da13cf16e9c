"""Injectable time source.

Production code uses ``SystemClock``; tests that exercise expiry, windows,
debounce and throttle inject a ``VirtualClock`` and advance it explicitly.
"""

from __future__ import annotations

import time


class SystemClock:
    def wall(self) -> float:
        """Epoch seconds."""
        return time.time()

    def mono(self) -> float:
        """Monotonic seconds, unrelated to wall time."""
        return time.monotonic()

    def sleep(self, seconds: float) -> None:
        time.sleep(seconds)


class VirtualClock(SystemClock):
    """Deterministic clock advanced only by the test."""

    def __init__(self, start_wall: float = 1_700_000_000.0):
        self._wall = start_wall
        self._mono = 0.0

    def wall(self) -> float:
        return self._wall

    def mono(self) -> float:
        return self._mono

    def sleep(self, seconds: float) -> None:
        self.advance(seconds)

    def advance(self, seconds: float) -> None:
        if seconds < 0:
            raise ValueError("cannot advance backwards")
        self._wall += seconds
        self._mono += seconds


SYSTEM_CLOCK = SystemClock()
