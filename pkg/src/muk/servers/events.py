"""Event kernel server: scheduled, debounced and throttled publishing.

Debounce is trailing-edge (the last event of a quiet period wins its whole
window); throttle is leading-edge (the first event of each window
publishes, the rest drop). Timers live in an internal heap fired by
``pump``, driven by a kernel housekeeping task in production and by a
virtual clock in tests. Per topic: emitted = published + dropped + pending.
"""

from __future__ import annotations

import heapq
import itertools
import threading
from typing import Optional

from ..clock import SYSTEM_CLOCK, SystemClock
from ..errors import ConflictingOpts


class EventServer:
    def __init__(self, bus, clock: SystemClock = SYSTEM_CLOCK):
        self._bus = bus
        self._clock = clock
        self._lock = threading.RLock()
        self._seq = itertools.count()
        self._timers: list[tuple[float, int, object]] = []  # (due_mono, seq, fn)
        # topic -> (due_mono, payload) awaiting its quiet period
        self._debounce: dict[str, Optional[bytes]] = {}
        self._throttle_until: dict[str, float] = {}
        self._counters: dict[str, dict[str, int]] = {}

    def _counter(self, topic: str) -> dict[str, int]:
        return self._counters.setdefault(
            topic, {"emitted": 0, "published": 0, "dropped": 0, "pending": 0})

    def emit(self, topic: str, payload: bytes, *, delay_ms: Optional[float] = None,
             debounce_ms: Optional[float] = None,
             throttle_ms: Optional[float] = None) -> None:
        if debounce_ms is not None and throttle_ms is not None:
            raise ConflictingOpts("set at most one of debounce_ms/throttle_ms")
        with self._lock:
            counter = self._counter(topic)
            counter["emitted"] += 1
            if delay_ms is not None:
                counter["pending"] += 1
                self._schedule(delay_ms, lambda: self._arrive(
                    topic, payload, debounce_ms, throttle_ms, deferred=True))
            else:
                self._arrive(topic, payload, debounce_ms, throttle_ms, deferred=False)

    def _arrive(self, topic: str, payload: bytes, debounce_ms, throttle_ms,
                deferred: bool) -> None:
        with self._lock:
            counter = self._counter(topic)
            if deferred:
                counter["pending"] -= 1
            if debounce_ms is not None:
                self._debounce_arrive(topic, payload, debounce_ms)
            elif throttle_ms is not None:
                self._throttle_arrive(topic, payload, throttle_ms)
            else:
                self._publish(topic, payload)

    def _debounce_arrive(self, topic: str, payload: bytes, debounce_ms: float) -> None:
        counter = self._counter(topic)
        if topic in self._debounce:
            counter["dropped"] += 1  # superseded pending event
        else:
            counter["pending"] += 1
        self._debounce[topic] = payload
        self._schedule(debounce_ms,
                       lambda p=payload: self._debounce_fire(topic, p, debounce_ms))

    def _debounce_fire(self, topic: str, payload: bytes, debounce_ms: float) -> None:
        with self._lock:
            # only the newest pending payload's timer publishes
            if self._debounce.get(topic) is not payload:
                return
            del self._debounce[topic]
            self._counter(topic)["pending"] -= 1
            self._publish(topic, payload)

    def _throttle_arrive(self, topic: str, payload: bytes, throttle_ms: float) -> None:
        now = self._clock.mono()
        if now >= self._throttle_until.get(topic, float("-inf")):
            self._throttle_until[topic] = now + throttle_ms / 1000.0
            self._publish(topic, payload)
        else:
            self._counter(topic)["dropped"] += 1

    def _publish(self, topic: str, payload: bytes) -> None:
        self._counter(topic)["published"] += 1
        self._bus.publish(topic, payload, source="kernel.event")

    def _schedule(self, delay_ms: float, fn) -> None:
        heapq.heappush(self._timers,
                       (self._clock.mono() + delay_ms / 1000.0, next(self._seq), fn))

    def pump(self) -> int:
        """Fire due timers; returns how many fired."""
        fired = 0
        while True:
            with self._lock:
                if not self._timers or self._timers[0][0] > self._clock.mono():
                    return fired
                _, _, fn = heapq.heappop(self._timers)
            fn()
            fired += 1

    def counters(self, topic: str) -> dict[str, int]:
        with self._lock:
            return dict(self._counter(topic))

    def isc_ops(self) -> dict:
        def _emit(args):
            self.emit(args["topic"], args.get("payload", "").encode("utf-8"),
                      delay_ms=args.get("delay_ms"),
                      debounce_ms=args.get("debounce_ms"),
                      throttle_ms=args.get("throttle_ms"))
            return {}

        return {
            "emit": _emit,
            "counters": lambda args: self.counters(args["topic"]),
        }
