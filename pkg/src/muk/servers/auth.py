"""Authentication & authorization kernel server.

Stateless HMAC-signed tokens ("payload.signature"), RBAC with deny by
default, fixed-window rate limiting aligned to epoch multiples, and an
append-only audit log. The credential store is a text file of
``user_id:salt:hash[:role1,role2]`` records; the hash function is
pluggable (SHA-256 of salt||password at desk scale).
"""

from __future__ import annotations

import base64
import hashlib
import hmac
import json
import secrets
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

from ..clock import SYSTEM_CLOCK, SystemClock
from ..errors import (
    BadCredentials,
    BadSignature,
    ExpiredToken,
    Malformed,
    RateLimited,
)


class Action(Enum):
    Read = "Read"
    Write = "Write"
    Delete = "Delete"


Permission = tuple[str, Action]  # (resource or "*", action)


@dataclass
class RbacPolicy:
    roles: dict[str, set[Permission]] = field(default_factory=dict)

    def grant(self, role: str, resource: str, action: Action) -> None:
        self.roles.setdefault(role, set()).add((resource, action))


def authorize(roles, resource: str, action: Action, policy: RbacPolicy) -> bool:
    """Allow iff any role explicitly grants (resource, action); deny by default."""
    for role in roles:
        grants = policy.roles.get(role, set())
        if (resource, action) in grants or ("*", action) in grants:
            return True
    return False


def default_hash(salt: bytes, password: str) -> str:
    return hashlib.sha256(salt + password.encode("utf-8")).hexdigest()


class RateLimiter:
    """Fixed-window counters; windows start at epoch multiples of window_s."""

    def __init__(self, clock: SystemClock = SYSTEM_CLOCK):
        self._clock = clock
        self._windows: dict[str, tuple[int, int]] = {}  # key -> (window_id, count)
        self._lock = threading.Lock()

    def _window_id(self, window_s: float) -> int:
        return int(self._clock.wall() // window_s)

    def check(self, key: str, limit: int, window_s: float) -> bool:
        """Count one event; True iff it fits within the window's limit."""
        window = self._window_id(window_s)
        with self._lock:
            current, count = self._windows.get(key, (window, 0))
            if current != window:
                count = 0
            count += 1
            self._windows[key] = (window, count)
            return count <= limit

    def hit(self, key: str, window_s: float) -> None:
        window = self._window_id(window_s)
        with self._lock:
            current, count = self._windows.get(key, (window, 0))
            if current != window:
                count = 0
            self._windows[key] = (window, count + 1)

    def count(self, key: str, window_s: float) -> int:
        window = self._window_id(window_s)
        with self._lock:
            current, count = self._windows.get(key, (window, 0))
            return count if current == window else 0


class AuditLog:
    """Append-only; entries are never mutated or deleted through the API."""

    def __init__(self, clock: SystemClock = SYSTEM_CLOCK):
        self._clock = clock
        self._entries: list[dict] = []
        self._lock = threading.Lock()

    def append(self, actor: str, action: str, detail: str = "") -> dict:
        entry = {"at": self._clock.wall(), "actor": actor,
                 "action": action, "detail": detail}
        with self._lock:
            self._entries.append(entry)
        return dict(entry)

    def read_all(self) -> list[dict]:
        with self._lock:
            return [dict(e) for e in self._entries]

    def __len__(self) -> int:
        return len(self._entries)


class AuthServer:
    def __init__(self, secret: str, *, token_ttl_s: float = 3600.0,
                 login_limit: int = 5, login_window_s: float = 60.0,
                 credentials_path: Optional[str] = None,
                 hash_fn: Callable[[bytes, str], str] = default_hash,
                 clock: SystemClock = SYSTEM_CLOCK):
        self._secret = secret.encode("utf-8")
        self._token_ttl = token_ttl_s
        self._login_limit = login_limit
        self._login_window = login_window_s
        self._hash = hash_fn
        self._clock = clock
        self._users: dict[str, tuple[bytes, str, list[str]]] = {}
        self._lock = threading.Lock()
        self.limiter = RateLimiter(clock)
        self.audit = AuditLog(clock)
        self.policy = RbacPolicy()
        self._credentials_path = credentials_path
        if credentials_path:
            self._load_credentials(credentials_path)

    # -- credential store -------------------------------------------------

    def _load_credentials(self, path: str) -> None:
        try:
            with open(path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line or line.startswith("#"):
                        continue
                    parts = line.split(":")
                    user_id, salt_hex, digest = parts[0], parts[1], parts[2]
                    roles = parts[3].split(",") if len(parts) > 3 and parts[3] else []
                    self._users[user_id] = (bytes.fromhex(salt_hex), digest, roles)
        except FileNotFoundError:
            pass

    def add_user(self, user_id: str, password: str,
                 roles: Optional[list[str]] = None) -> None:
        salt = secrets.token_bytes(8)
        with self._lock:
            self._users[user_id] = (salt, self._hash(salt, password), roles or [])
        if self._credentials_path:
            with open(self._credentials_path, "a", encoding="utf-8") as fh:
                fh.write(f"{user_id}:{salt.hex()}:{self._hash(salt, password)}"
                         f":{','.join(roles or [])}\n")

    # -- tokens -------------------------------------------------------------

    def _sign(self, payload_b64: str) -> str:
        mac = hmac.new(self._secret, payload_b64.encode("ascii"), hashlib.sha256)
        return base64.urlsafe_b64encode(mac.digest()).decode("ascii")

    def issue_token(self, user_id: str, roles: list[str],
                    ttl_s: Optional[float] = None) -> str:
        exp = self._clock.wall() + (self._token_ttl if ttl_s is None else ttl_s)
        payload = base64.urlsafe_b64encode(json.dumps(
            {"user_id": user_id, "roles": roles, "exp": exp},
            separators=(",", ":")).encode("utf-8")).decode("ascii")
        return f"{payload}.{self._sign(payload)}"

    def verify_token(self, token: str) -> dict:
        """Signature first, then expiry. The signature is compared on the
        base64 text itself, so any single-character change fails."""
        parts = token.split(".")
        if len(parts) != 2 or not parts[0] or not parts[1]:
            raise Malformed("token must be payload.signature")
        payload_b64, signature = parts
        try:
            matches = hmac.compare_digest(self._sign(payload_b64), signature)
        except (TypeError, UnicodeEncodeError):  # non-ASCII corruption
            matches = False
        if not matches:
            raise BadSignature("token signature mismatch")
        try:
            payload = json.loads(base64.urlsafe_b64decode(payload_b64.encode("ascii")))
            user_id, roles, exp = payload["user_id"], payload["roles"], payload["exp"]
        except Exception as exc:
            raise Malformed(f"undecodable token payload: {exc}") from exc
        if exp < self._clock.wall():
            raise ExpiredToken("token expired")
        return {"user_id": user_id, "roles": roles}

    # -- login ------------------------------------------------------------------

    def login(self, user_id: str, credential: str) -> str:
        key = f"login:{user_id}"
        if self.limiter.count(key, self._login_window) >= self._login_limit:
            self.audit.append(user_id, "login.rate_limited")
            raise RateLimited(f"too many login failures for {user_id!r}")
        with self._lock:
            record = self._users.get(user_id)
        if record is None:
            self.limiter.hit(key, self._login_window)
            self.audit.append(user_id, "login.failure", "unknown user")
            raise BadCredentials("unknown user or bad password")
        salt, digest, roles = record
        if not hmac.compare_digest(self._hash(salt, credential), digest):
            self.limiter.hit(key, self._login_window)
            self.audit.append(user_id, "login.failure", "bad password")
            raise BadCredentials("unknown user or bad password")
        self.audit.append(user_id, "login.ok")
        return self.issue_token(user_id, roles)

    def rate_limit_check(self, key: str, limit: int, window_s: float) -> bool:
        return self.limiter.check(key, limit, window_s)

    # -- ISC surface ----------------------------------------------------------------

    def isc_ops(self) -> dict:
        def _authorize(args):
            return {"allow": authorize(args["roles"], args["resource"],
                                       Action(args["action"]), self.policy)}

        return {
            "login": lambda args: {"token": self.login(args["user_id"],
                                                       args["credential"])},
            "verify": lambda args: self.verify_token(args["token"]),
            "authorize": _authorize,
            "rate_limit_check": lambda args: {"allow": self.rate_limit_check(
                args["key"], args["limit"], args["window_s"])},
            "audit_append": lambda args: self.audit.append(
                args["actor"], args["action"], args.get("detail", "")),
        }
