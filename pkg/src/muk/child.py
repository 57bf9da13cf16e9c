"""Subprocess module runtime, run as ``python -m muk.child <handler>``.

Speaks the framed envelope protocol on stdin/stdout: sends Hello on start,
then serves Request/Probe/Heal envelopes until stdin closes. The bundled
handlers double as the kernel's test artifacts; with faults enabled (the
default) the runtime accepts fault-control requests on a reserved path and
exposes the "compact" and "reset-state" heal hooks.

Memory self-reports are synthetic and deterministic: a fixed base plus the
bytes currently held by the injected leak. Real modules would report RSS;
determinism is worth more than realism for a test artifact.
"""

from __future__ import annotations

import argparse
import json
import os
import random
import signal
import sys
import time

from . import isc
from .paradigms import (
    FAULT_CONTROL_PATH,
    decode_request_body,
    encode_response_body,
)

BASE_MEMORY_BYTES = 4 * 1024 * 1024
HEAL_HOOKS = ("compact", "reset-state")


class FaultLayer:
    """Deterministic fault injection driven by control requests."""

    def __init__(self):
        self.kind = None
        self.leak_rate = 0
        self.leaked: list[bytes] = []
        self.slow_factor = 0.0
        self.error_rate = 0.0
        self.rng = random.Random(0)
        self.crash_armed = False

    def apply(self, config: dict) -> None:
        kind = config.get("kind")
        if kind not in ("CrashLoop", "Leak", "SlowDown", "ErrorRate", "Clear"):
            raise ValueError(f"unknown fault kind {kind!r}")
        self.kind = None if kind == "Clear" else kind
        self.crash_armed = kind == "CrashLoop"
        self.leak_rate = int(config.get("rate_bytes_per_cycle", 0)) if kind == "Leak" else 0
        self.slow_factor = float(config.get("factor", 0)) if kind == "SlowDown" else 0.0
        if kind == "ErrorRate":
            self.error_rate = float(config.get("rate", 0))
            self.rng = random.Random(int(config.get("seed", 0)))
        else:
            self.error_rate = 0.0

    def on_probe(self) -> int:
        if self.crash_armed:
            os._exit(1)
        if self.leak_rate > 0:
            self.leaked.append(bytes(self.leak_rate))
        return BASE_MEMORY_BYTES + sum(len(b) for b in self.leaked)

    def before_request(self) -> int | None:
        """Returns an injected status, or None to proceed normally."""
        if self.crash_armed:
            os._exit(1)
        if self.slow_factor > 0:
            time.sleep(0.01 * self.slow_factor)
        if self.error_rate > 0 and self.rng.random() < self.error_rate:
            return 500
        return None

    def heal(self, hook: str) -> bool:
        if hook == "compact":
            # the paper-style "true" heal: free the leak and stop it at source
            self.leaked.clear()
            self.leak_rate = 0
            if self.kind == "Leak":
                self.kind = None
            return True
        if hook == "reset-state":
            self.error_rate = 0.0
            self.slow_factor = 0.0
            if self.kind in ("ErrorRate", "SlowDown"):
                self.kind = None
            return True
        return False


def handle_echo(method, path, headers, body, args):
    return 200, {"X-Handler": "echo"}, body


def handle_version_echo(method, path, headers, body, args):
    return 200, {"X-Handler": "version-echo"}, args.body.encode()


def handle_sleep(method, path, headers, body, args):
    time.sleep(args.sleep_ms / 1000.0)
    return 200, {"X-Handler": "sleep"}, body


HANDLERS = {
    "echo": handle_echo,
    "version-echo": handle_version_echo,
    "sleep": handle_sleep,
}


def real_memory_bytes() -> int:
    try:
        import resource
        return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024
    except Exception:
        return BASE_MEMORY_BYTES


def serve(args) -> int:
    stdin = sys.stdin.buffer
    stdout = sys.stdout.buffer
    module_id = os.environ.get("MUK_MODULE_ID", "unknown")
    instance_id = os.environ.get("MUK_INSTANCE_ID", "unknown")
    handler = HANDLERS[args.handler]
    faults = FaultLayer() if not args.plain else None

    if args.ignore_sigterm:
        signal.signal(signal.SIGTERM, signal.SIG_IGN)
    if args.exit_immediately:
        return 1
    if args.no_hello:
        time.sleep(3600)
        return 0

    hello = isc.make_envelope(
        isc.Kind.Hello, "kernel",
        json.dumps({
            "module_id": module_id,
            "instance_id": instance_id,
            "pid": os.getpid(),
            "handler": args.handler,
            "heals": list(HEAL_HOOKS) if faults else [],
            "faults": faults is not None,
        }).encode(),
        source=module_id,
    )
    isc.write_frame(stdout, hello)

    while True:
        env = isc.read_frame(stdin)
        if env is None:
            return 0

        if env.kind is isc.Kind.Probe:
            memory = faults.on_probe() if faults else real_memory_bytes()
            isc.write_frame(stdout, isc.reply_to(
                env, json.dumps({"memory_bytes": memory}).encode(),
                kind=isc.Kind.ProbeOk, source=module_id))

        elif env.kind is isc.Kind.Heal:
            hook = env.json_body().get("hook", "")
            ok = faults.heal(hook) if faults else False
            isc.write_frame(stdout, isc.reply_to(
                env, json.dumps({"detail": hook}).encode(),
                kind=isc.Kind.HealOk if ok else isc.Kind.HealFail,
                source=module_id))

        elif env.kind is isc.Kind.Request:
            method, path, headers, body = decode_request_body(env.body)
            if path == FAULT_CONTROL_PATH:
                if faults is None:
                    status, out = 501, b"fault control not supported"
                else:
                    try:
                        faults.apply(json.loads(body.decode() or "{}"))
                        status, out = 200, b"fault applied"
                    except (ValueError, KeyError) as exc:
                        status, out = 400, str(exc).encode()
            else:
                injected = faults.before_request() if faults else None
                if injected is not None:
                    status, resp_headers, out = injected, {}, b"injected fault"
                else:
                    status, resp_headers, out = handler(method, path, headers, body, args)
                isc.write_frame(stdout, isc.reply_to(
                    env, encode_response_body(status, resp_headers, out),
                    source=module_id))
                continue
            isc.write_frame(stdout, isc.reply_to(
                env, encode_response_body(status, {}, out), source=module_id))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="muk.child")
    parser.add_argument("handler", choices=sorted(HANDLERS))
    parser.add_argument("--body", default="", help="fixed response body (version-echo)")
    parser.add_argument("--sleep-ms", type=float, default=50.0)
    parser.add_argument("--plain", action="store_true",
                        help="no fault control, no heal hooks, real memory reports")
    parser.add_argument("--ignore-sigterm", action="store_true")
    parser.add_argument("--exit-immediately", action="store_true")
    parser.add_argument("--no-hello", action="store_true")
    args = parser.parse_args(argv)
    try:
        return serve(args)
    except (BrokenPipeError, KeyboardInterrupt):
        return 0


if __name__ == "__main__":
    sys.exit(main())
