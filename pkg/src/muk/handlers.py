"""Built-in InProcess handlers and the handler factory registry.

An InProcess module's ``artifact_ref`` names a factory registered here,
optionally with a colon argument ("sleep:100"). Factories receive the
module id and deployed version so version-aware handlers need no extra
plumbing.
"""

from __future__ import annotations

import random
import threading
import time
from typing import Callable

from .errors import StartFailure

BASE_MEMORY_BYTES = 4 * 1024 * 1024


class EchoHandler:
    heals: tuple[str, ...] = ()

    def handle(self, req):
        return 200, {"X-Handler": "echo"}, req.body


class VersionEchoHandler:
    heals: tuple[str, ...] = ()

    def __init__(self, version: str):
        self.version = version

    def handle(self, req):
        return 200, {"X-Handler": "version-echo"}, self.version.encode()


class SleepEchoHandler:
    heals: tuple[str, ...] = ()

    def __init__(self, sleep_ms: float):
        self.sleep_ms = sleep_ms

    def handle(self, req):
        time.sleep(self.sleep_ms / 1000.0)
        return 200, {"X-Handler": "sleep"}, req.body


class FaultEchoHandler:
    """Fault-capable echo, the InProcess twin of the subprocess runtime."""

    heals = ("compact", "reset-state")

    def __init__(self):
        self._lock = threading.Lock()
        self.kind = None
        self.leak_rate = 0
        self.leaked = 0
        self.slow_factor = 0.0
        self.error_rate = 0.0
        self.rng = random.Random(0)

    def control_fault(self, config: dict) -> bool:
        kind = config.get("kind")
        if kind not in ("CrashLoop", "Leak", "SlowDown", "ErrorRate", "Clear"):
            return False
        with self._lock:
            self.kind = None if kind == "Clear" else kind
            self.leak_rate = int(config.get("rate_bytes_per_cycle", 0)) if kind == "Leak" else 0
            self.slow_factor = float(config.get("factor", 0)) if kind == "SlowDown" else 0.0
            self.error_rate = float(config.get("rate", 0)) if kind == "ErrorRate" else 0.0
            if kind == "ErrorRate":
                self.rng = random.Random(int(config.get("seed", 0)))
        return True

    def health(self) -> int:
        with self._lock:
            if self.leak_rate > 0:
                self.leaked += self.leak_rate
            return BASE_MEMORY_BYTES + self.leaked

    def heal(self, name: str) -> bool:
        with self._lock:
            if name == "compact":
                self.leaked = 0
                self.leak_rate = 0
                if self.kind == "Leak":
                    self.kind = None
                return True
            if name == "reset-state":
                self.error_rate = 0.0
                self.slow_factor = 0.0
                if self.kind in ("ErrorRate", "SlowDown"):
                    self.kind = None
                return True
        return False

    def handle(self, req):
        with self._lock:
            slow, err = self.slow_factor, self.error_rate
        if slow > 0:
            time.sleep(0.01 * slow)
        if err > 0 and self.rng.random() < err:
            return 500, {}, b"injected fault"
        return 200, {"X-Handler": "fault-echo"}, req.body


HandlerFactory = Callable[[str, str], object]

_FACTORIES: dict[str, HandlerFactory] = {
    "echo": lambda module_id, version: EchoHandler(),
    "version-echo": lambda module_id, version: VersionEchoHandler(version),
    "fault-echo": lambda module_id, version: FaultEchoHandler(),
}


def register_handler(name: str, factory: HandlerFactory) -> None:
    _FACTORIES[name] = factory


def create_handler(artifact_ref: str, module_id: str, version: str):
    name, _, arg = artifact_ref.partition(":")
    if name == "sleep":
        return SleepEchoHandler(float(arg or 50))
    factory = _FACTORIES.get(name)
    if factory is None:
        raise StartFailure(f"no InProcess handler registered as {name!r}")
    return factory(module_id, version)
