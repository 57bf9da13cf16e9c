"""Resident kernel servers: session, auth, validation, event.

Each server is reachable in-process and as an ISC endpoint whose request
body is JSON ``{"op": ..., "args": {...}}``; replies are JSON
``{"ok": true, "result": ...}`` or ``{"ok": false, "code": ..., "error": ...}``.
"""

from __future__ import annotations

import json

from .. import isc
from ..errors import KernelError
from .auth import Action, AuthServer, RateLimiter, RbacPolicy, authorize
from .events import EventServer
from .session import SessionServer
from .validation import ValidationServer, sanitize

__all__ = [
    "Action", "AuthServer", "EventServer", "RateLimiter", "RbacPolicy",
    "SessionServer", "ValidationServer", "authorize", "sanitize",
    "isc_endpoint",
]


def isc_endpoint(server, server_id: str):
    """Wrap a kernel server's op table as a bus endpoint."""
    ops = server.isc_ops()

    def endpoint(env: isc.Envelope, timeout_s: float) -> isc.Envelope:
        try:
            request = json.loads(env.body.decode("utf-8"))
            op = ops.get(request.get("op"))
            if op is None:
                payload = {"ok": False, "code": "UnknownOp",
                           "error": f"no op {request.get('op')!r}"}
            else:
                payload = {"ok": True, "result": op(request.get("args", {}))}
        except KernelError as exc:
            payload = {"ok": False, "code": exc.code, "error": str(exc)}
        except Exception as exc:
            payload = {"ok": False, "code": "Internal", "error": str(exc)}
        return isc.reply_to(env, json.dumps(payload).encode("utf-8"), source=server_id)

    return endpoint
