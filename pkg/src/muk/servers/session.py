"""Session kernel server: sliding-expiry sessions with unguessable ids."""

from __future__ import annotations

import secrets
import threading
from dataclasses import dataclass, field
from typing import Optional

from ..clock import SYSTEM_CLOCK, SystemClock
from ..errors import Expired, InvalidConfig, NotFound


@dataclass
class Session:
    session_id: str
    user_id: str
    created_at: float
    last_touched_at: float
    ttl_s: float
    data: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"session_id": self.session_id, "user_id": self.user_id,
                "created_at": self.created_at, "last_touched_at": self.last_touched_at,
                "ttl_s": self.ttl_s, "data": dict(self.data)}


class SessionServer:
    def __init__(self, default_ttl_s: float = 3600.0,
                 clock: SystemClock = SYSTEM_CLOCK):
        self._default_ttl = default_ttl_s
        self._clock = clock
        self._sessions: dict[str, Session] = {}
        self._lock = threading.Lock()

    def create(self, user_id: str, ttl_s: Optional[float] = None) -> Session:
        ttl = self._default_ttl if ttl_s is None else ttl_s
        if ttl <= 0:
            raise InvalidConfig("ttl_s", "must be > 0")
        now = self._clock.wall()
        session = Session(
            session_id=secrets.token_hex(16),  # 128 bits, CSPRNG
            user_id=user_id, created_at=now, last_touched_at=now, ttl_s=ttl)
        with self._lock:
            self._sessions[session.session_id] = session
        return session

    def get(self, session_id: str) -> Session:
        """Sliding expiry: a successful get refreshes last_touched_at."""
        now = self._clock.wall()
        with self._lock:
            session = self._sessions.get(session_id)
            if session is None:
                raise NotFound(f"no session {session_id!r}")
            if now - session.last_touched_at > session.ttl_s:
                del self._sessions[session_id]
                raise Expired(f"session {session_id!r} expired")
            session.last_touched_at = now
            return session

    def set_data(self, session_id: str, key: str, value) -> Session:
        session = self.get(session_id)
        with self._lock:
            session.data[key] = value
        return session

    def invalidate(self, session_id: str) -> None:
        with self._lock:
            self._sessions.pop(session_id, None)

    def count(self) -> int:
        with self._lock:
            return len(self._sessions)

    def isc_ops(self) -> dict:
        return {
            "create": lambda args: self.create(
                args["user_id"], args.get("ttl_s")).to_json(),
            "get": lambda args: self.get(args["session_id"]).to_json(),
            "set_data": lambda args: self.set_data(
                args["session_id"], args["key"], args["value"]).to_json(),
            "invalidate": lambda args: (self.invalidate(args["session_id"]), {})[1],
        }
