"""Inter-service communication: framed envelope codec, topics, request/reply.

The envelope frame is the wire protocol spoken with subprocess modules over
stdio and with any TCP-attached service, so the byte layout is pinned:

    4-byte big-endian length N | N bytes of UTF-8 JSON

with exactly the keys ``id, corr, src, dst, kind, ct, body, ttl_ms, ts`` in
that order. ``body`` is base64 so a frame is always valid UTF-8; ``ts`` is
epoch milliseconds. Same envelope always encodes to the same bytes.
"""

from __future__ import annotations

import base64
import binascii
import json
import logging
import struct
import threading
import uuid
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import BinaryIO, Callable, Optional

from .clock import SYSTEM_CLOCK, SystemClock
from .errors import (
    BodyTooLarge,
    Exhausted,
    InvalidEnvelope,
    LengthMismatch,
    MalformedJson,
    QueueFull,
    Truncated,
    UnknownDestination,
    UnknownKind,
)

logger = logging.getLogger(__name__)

MAX_BODY_BYTES = 16 * 1024 * 1024
TOPIC_QUEUE_BOUND = 10_000
DEFAULT_TTL_MS = 60_000

_WIRE_KEYS = ("id", "corr", "src", "dst", "kind", "ct", "body", "ttl_ms", "ts")


class Kind(Enum):
    Request = "Request"
    Reply = "Reply"
    Event = "Event"
    Hello = "Hello"
    Probe = "Probe"
    ProbeOk = "ProbeOk"
    Heal = "Heal"
    HealOk = "HealOk"
    HealFail = "HealFail"


@dataclass
class Envelope:
    id: str
    correlation_id: str
    source: str
    destination: str
    kind: Kind
    content_type: str
    body: bytes
    ttl_ms: int
    created_at_ms: int

    def validate(self) -> None:
        if not self.id:
            raise InvalidEnvelope("empty id")
        if self.kind is Kind.Reply and not self.correlation_id:
            raise InvalidEnvelope("Reply requires a correlation_id")
        if self.ttl_ms <= 0:
            raise InvalidEnvelope("ttl_ms must be > 0")

    def json_body(self):
        return json.loads(self.body.decode("utf-8"))


def make_envelope(
    kind: Kind,
    destination: str,
    body: bytes = b"",
    *,
    source: str = "kernel",
    correlation_id: str = "",
    content_type: str = "application/json",
    ttl_ms: int = DEFAULT_TTL_MS,
    clock: SystemClock = SYSTEM_CLOCK,
) -> Envelope:
    return Envelope(
        id=uuid.uuid4().hex,
        correlation_id=correlation_id,
        source=source,
        destination=destination,
        kind=kind,
        content_type=content_type,
        body=body,
        ttl_ms=ttl_ms,
        created_at_ms=int(clock.wall() * 1000),
    )


def reply_to(env: Envelope, body: bytes, *, kind: Kind = Kind.Reply, source: str = "") -> Envelope:
    return make_envelope(
        kind,
        env.source,
        body,
        source=source or env.destination,
        correlation_id=env.id,
    )


# -- codec --------------------------------------------------------------------

def encode(env: Envelope) -> bytes:
    env.validate()
    if len(env.body) > MAX_BODY_BYTES:
        raise BodyTooLarge(f"body is {len(env.body)} bytes, cap is {MAX_BODY_BYTES}")
    obj = {
        "id": env.id,
        "corr": env.correlation_id,
        "src": env.source,
        "dst": env.destination,
        "kind": env.kind.value,
        "ct": env.content_type,
        "body": base64.b64encode(env.body).decode("ascii"),
        "ttl_ms": env.ttl_ms,
        "ts": env.created_at_ms,
    }
    payload = json.dumps(obj, separators=(",", ":")).encode("utf-8")
    return struct.pack(">I", len(payload)) + payload


def decode(frame: bytes) -> Envelope:
    if len(frame) < 4:
        raise Truncated("frame shorter than length header")
    (declared,) = struct.unpack(">I", frame[:4])
    payload = frame[4:]
    if len(payload) < declared:
        raise Truncated(f"declared {declared} bytes, got {len(payload)}")
    if len(payload) > declared:
        raise LengthMismatch(f"declared {declared} bytes, got {len(payload)}")
    return _decode_payload(payload)


def _decode_payload(payload: bytes) -> Envelope:
    try:
        obj = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedJson(str(exc)) from exc
    if not isinstance(obj, dict):
        raise MalformedJson("payload is not a JSON object")
    keys = set(obj)
    expected = set(_WIRE_KEYS)
    if keys - expected:
        raise MalformedJson(f"unknown keys: {sorted(keys - expected)}")
    if expected - keys:
        raise MalformedJson(f"missing keys: {sorted(expected - keys)}")
    for key in ("id", "corr", "src", "dst", "kind", "ct", "body"):
        if not isinstance(obj[key], str):
            raise MalformedJson(f"key {key!r} must be a string")
    for key in ("ttl_ms", "ts"):
        if not isinstance(obj[key], int) or isinstance(obj[key], bool):
            raise MalformedJson(f"key {key!r} must be an integer")
    try:
        kind = Kind(obj["kind"])
    except ValueError:
        raise UnknownKind(f"unknown kind {obj['kind']!r}") from None
    try:
        body = base64.b64decode(obj["body"].encode("ascii"), validate=True)
    except (binascii.Error, ValueError) as exc:
        raise MalformedJson(f"body is not valid base64: {exc}") from exc
    env = Envelope(
        id=obj["id"],
        correlation_id=obj["corr"],
        source=obj["src"],
        destination=obj["dst"],
        kind=kind,
        content_type=obj["ct"],
        body=body,
        ttl_ms=obj["ttl_ms"],
        created_at_ms=obj["ts"],
    )
    try:
        env.validate()
    except InvalidEnvelope as exc:
        raise MalformedJson(str(exc)) from exc
    return env


def write_frame(stream: BinaryIO, env: Envelope) -> None:
    stream.write(encode(env))
    stream.flush()


def read_frame(stream: BinaryIO) -> Optional[Envelope]:
    """Read one envelope off a blocking stream; None on clean EOF."""
    header = stream.read(4)
    if not header:
        return None
    if len(header) < 4:
        raise Truncated("EOF inside length header")
    (declared,) = struct.unpack(">I", header)
    payload = b""
    while len(payload) < declared:
        chunk = stream.read(declared - len(payload))
        if not chunk:
            raise Truncated(f"EOF after {len(payload)} of {declared} payload bytes")
        payload += chunk
    return _decode_payload(payload)


# -- retry policy ---------------------------------------------------------------

@dataclass
class RetryPolicy:
    max_attempts: int = 3
    base_backoff_ms: float = 100.0
    multiplier: float = 2.0

    def validate(self) -> None:
        if self.max_attempts < 1:
            raise InvalidEnvelope("max_attempts must be >= 1")
        if self.base_backoff_ms <= 0:
            raise InvalidEnvelope("base_backoff_ms must be > 0")
        if self.multiplier < 1:
            raise InvalidEnvelope("multiplier must be >= 1")

    def backoff_ms(self, attempt: int) -> float:
        """Delay before retry following *attempt* (1-based)."""
        return self.base_backoff_ms * self.multiplier ** (attempt - 1)


# -- topics ---------------------------------------------------------------------

class Subscription:
    """Per-subscriber FIFO delivery handle.

    Queue-based subscribers drain with :meth:`get`/:meth:`poll`; callback
    subscribers are invoked inline at publish time, in append order.
    """

    def __init__(self, topic: "_Topic", subscriber_id: str,
                 callback: Optional[Callable[[Envelope], None]]):
        self.topic_name = topic.name
        self.subscriber_id = subscriber_id
        self._topic = topic
        self._callback = callback
        self._queue: deque[Envelope] = deque()
        self._cond = threading.Condition()
        self._closed = False

    def _offer(self, env: Envelope) -> None:
        with self._cond:
            self._queue.append(env)
            self._cond.notify()

    def _has_room(self) -> bool:
        return self._callback is not None or len(self._queue) < TOPIC_QUEUE_BOUND

    def depth(self) -> int:
        return len(self._queue)

    def poll(self) -> Optional[Envelope]:
        with self._cond:
            return self._queue.popleft() if self._queue else None

    def get(self, timeout: Optional[float] = None) -> Optional[Envelope]:
        with self._cond:
            if not self._queue:
                self._cond.wait(timeout)
            return self._queue.popleft() if self._queue else None

    def close(self) -> None:
        self._topic._remove(self.subscriber_id)
        self._closed = True


class _Topic:
    def __init__(self, name: str, clock: SystemClock):
        self.name = name
        self._clock = clock
        self._lock = threading.RLock()
        self._subs: dict[str, Subscription] = {}
        # (expiry_mono, envelope); holds messages published with no subscriber
        self._retained: deque[tuple[float, Envelope]] = deque()

    def _expire_retained(self) -> None:
        now = self._clock.mono()
        while self._retained and self._retained[0][0] <= now:
            self._retained.popleft()

    def subscribe(self, subscriber_id: str,
                  callback: Optional[Callable[[Envelope], None]]) -> Subscription:
        with self._lock:
            existing = self._subs.get(subscriber_id)
            if existing is not None:
                return existing
            sub = Subscription(self, subscriber_id, callback)
            self._subs[subscriber_id] = sub
            return sub

    def _remove(self, subscriber_id: str) -> None:
        with self._lock:
            self._subs.pop(subscriber_id, None)

    def publish(self, env: Envelope) -> None:
        callbacks: list[Callable[[Envelope], None]] = []
        with self._lock:
            self._expire_retained()
            subs = list(self._subs.values())
            if not subs:
                if len(self._retained) >= TOPIC_QUEUE_BOUND:
                    raise QueueFull(f"topic {self.name!r} retained queue at bound")
                self._retained.append((self._clock.mono() + env.ttl_ms / 1000.0, env))
                return
            if not all(s._has_room() for s in subs):
                raise QueueFull(f"topic {self.name!r} subscriber queue at bound")
            for sub in subs:
                if sub._callback is None:
                    sub._offer(env)
                else:
                    callbacks.append(sub._callback)
            # Invoked while holding the topic's RLock: publishes stay in
            # append order per subscriber; re-publishing to this topic from a
            # callback is re-entrant, not a deadlock.
            for cb in callbacks:
                try:
                    cb(env)
                except Exception:
                    logger.exception("subscriber callback failed on topic %s", self.name)

    def depth(self) -> int:
        with self._lock:
            self._expire_retained()
            return len(self._retained) + sum(s.depth() for s in self._subs.values())


Endpoint = Callable[[Envelope, float], Envelope]


class Bus:
    """Kernel message bus: named request/reply endpoints plus pub/sub topics."""

    def __init__(self, clock: SystemClock = SYSTEM_CLOCK, source: str = "kernel"):
        self._clock = clock
        self._source = source
        self._endpoints: dict[str, Endpoint] = {}
        self._topics: dict[str, _Topic] = {}
        self._lock = threading.Lock()

    # -- request/reply --

    def register_endpoint(self, destination: str, endpoint: Endpoint) -> None:
        with self._lock:
            self._endpoints[destination] = endpoint

    def unregister_endpoint(self, destination: str) -> None:
        with self._lock:
            self._endpoints.pop(destination, None)

    def has_endpoint(self, destination: str) -> bool:
        return destination in self._endpoints

    def request(
        self,
        destination: str,
        body: bytes,
        policy: Optional[RetryPolicy] = None,
        timeout_ms: float = 10_000,
        *,
        source: str = "",
        content_type: str = "application/json",
    ) -> Envelope:
        """Send a Request, retrying with exponential backoff on failure.

        Each attempt sends a fresh envelope; the reply must correlate with
        the id of the attempt that produced it.
        """
        endpoint = self._endpoints.get(destination)
        if endpoint is None:
            raise UnknownDestination(f"no endpoint registered for {destination!r}")
        policy = policy or RetryPolicy()
        policy.validate()
        last_cause: BaseException | str = "no attempt made"
        for attempt in range(1, policy.max_attempts + 1):
            env = make_envelope(
                Kind.Request, destination, body,
                source=source or self._source, content_type=content_type,
                clock=self._clock,
            )
            try:
                reply = endpoint(env, timeout_ms / 1000.0)
                if reply.correlation_id != env.id:
                    raise InvalidEnvelope(
                        f"reply correlates {reply.correlation_id!r}, expected {env.id!r}")
                return reply
            except Exception as exc:
                last_cause = exc
                logger.debug("request to %s attempt %d/%d failed: %s",
                             destination, attempt, policy.max_attempts, exc)
            if attempt < policy.max_attempts:
                self._clock.sleep(policy.backoff_ms(attempt) / 1000.0)
        raise Exhausted(policy.max_attempts, last_cause)

    # -- pub/sub --

    def _topic(self, name: str) -> _Topic:
        with self._lock:
            topic = self._topics.get(name)
            if topic is None:
                topic = self._topics[name] = _Topic(name, self._clock)
            return topic

    def publish(self, topic: str, body: bytes, *, source: str = "",
                ttl_ms: int = DEFAULT_TTL_MS) -> Envelope:
        env = make_envelope(Kind.Event, topic, body,
                            source=source or self._source, ttl_ms=ttl_ms,
                            clock=self._clock)
        self._topic(topic).publish(env)
        return env

    def subscribe(self, topic: str, subscriber_id: str,
                  callback: Optional[Callable[[Envelope], None]] = None) -> Subscription:
        return self._topic(topic).subscribe(subscriber_id, callback)

    def topic_depths(self) -> dict[str, int]:
        with self._lock:
            topics = dict(self._topics)
        return {name: t.depth() for name, t in topics.items()}
