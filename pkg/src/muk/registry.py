"""Module/instance registry: the kernel's source of truth.

Many concurrent readers, one exclusive writer path. Reads hand out
snapshots; the route table is rebuilt copy-on-write on every mutation and
swapped atomically so the dispatch hot path never takes the registry lock.
"""

from __future__ import annotations

import json
import logging
import re
import threading
import time
import uuid
from dataclasses import dataclass
from enum import Enum
from typing import Optional

from .errors import (
    DuplicateId,
    IllegalTransition,
    InvalidDescriptor,
    ProtectedModule,
    RouteCollision,
    UnknownModule,
)

logger = logging.getLogger(__name__)

KERNEL_SERVER_IDS = ("kernel.session", "kernel.auth", "kernel.validate", "kernel.event")

_VERSION_RE = re.compile(r"^\d+\.\d+(\.\d+)?$")


def parse_version(version: str) -> tuple[int, ...]:
    if not _VERSION_RE.match(version or ""):
        raise InvalidDescriptor(f"version {version!r} must be 2-3 dotted non-negative integers")
    return tuple(int(p) for p in version.split("."))


class Paradigm(Enum):
    InProcess = "InProcess"
    Subprocess = "Subprocess"


class Strategy(Enum):
    RoundRobin = "RoundRobin"
    LeastConnections = "LeastConnections"


class InstanceState(Enum):
    Starting = "Starting"
    Ready = "Ready"
    Degraded = "Degraded"
    Unhealthy = "Unhealthy"
    Stopping = "Stopping"
    Stopped = "Stopped"


# Declared lifecycle edges plus three operational additions: aborting a
# failed start (Starting->Stopping) and taking a Degraded instance to
# Unhealthy (probe threshold) or into a drain (Degraded->Stopping).
ALLOWED_TRANSITIONS: dict[InstanceState, frozenset[InstanceState]] = {
    InstanceState.Starting: frozenset({InstanceState.Ready, InstanceState.Stopping}),
    InstanceState.Ready: frozenset({InstanceState.Degraded, InstanceState.Unhealthy,
                                    InstanceState.Stopping}),
    InstanceState.Degraded: frozenset({InstanceState.Ready, InstanceState.Unhealthy,
                                       InstanceState.Stopping, InstanceState.Stopped}),
    InstanceState.Unhealthy: frozenset({InstanceState.Stopping, InstanceState.Stopped}),
    InstanceState.Stopping: frozenset({InstanceState.Stopped}),
    InstanceState.Stopped: frozenset(),
}

SELECTABLE_STATES = (InstanceState.Ready, InstanceState.Degraded)


@dataclass(frozen=True)
class RouteRule:
    method: str  # HTTP verb or "*"
    path_prefix: str
    strategy: Strategy = Strategy.RoundRobin

    def validate(self) -> None:
        if not self.path_prefix or not self.path_prefix.startswith("/"):
            raise InvalidDescriptor(f"path_prefix {self.path_prefix!r} must start with '/'")
        if not self.method:
            raise InvalidDescriptor("route method must be a verb or '*'")

    def to_json(self) -> dict:
        return {"method": self.method, "path_prefix": self.path_prefix,
                "strategy": self.strategy.value}

    @classmethod
    def from_json(cls, data: dict) -> "RouteRule":
        try:
            return cls(method=data["method"], path_prefix=data["path_prefix"],
                       strategy=Strategy(data.get("strategy", "RoundRobin")))
        except (KeyError, ValueError) as exc:
            raise InvalidDescriptor(f"bad route rule: {exc}") from exc


@dataclass(frozen=True)
class ResourceQuota:
    max_memory_bytes: int = 256 * 1024 * 1024
    max_concurrent_requests: int = 64

    def validate(self) -> None:
        if self.max_memory_bytes <= 0:
            raise InvalidDescriptor("max_memory_bytes must be > 0")
        if self.max_concurrent_requests <= 0:
            raise InvalidDescriptor("max_concurrent_requests must be > 0")

    def to_json(self) -> dict:
        return {"max_memory_bytes": self.max_memory_bytes,
                "max_concurrent_requests": self.max_concurrent_requests}

    @classmethod
    def from_json(cls, data: dict) -> "ResourceQuota":
        return cls(max_memory_bytes=data.get("max_memory_bytes", cls.max_memory_bytes),
                   max_concurrent_requests=data.get("max_concurrent_requests",
                                                    cls.max_concurrent_requests))


@dataclass(frozen=True)
class ModuleDescriptor:
    module_id: str
    name: str
    version: str
    paradigm: Paradigm
    artifact_ref: str
    routes: tuple[RouteRule, ...] = ()
    quota: ResourceQuota = ResourceQuota()
    demand_loaded: bool = False
    idle_ttl_s: Optional[float] = None
    replicas_desired: int = 1

    def validate(self) -> None:
        if not self.module_id:
            raise InvalidDescriptor("module_id must be non-empty")
        if self.replicas_desired < 1:
            raise InvalidDescriptor("replicas_desired must be >= 1")
        parse_version(self.version)
        if self.demand_loaded:
            if self.idle_ttl_s is None or self.idle_ttl_s <= 0:
                raise InvalidDescriptor("demand_loaded modules need idle_ttl_s > 0")
        elif self.idle_ttl_s is not None:
            raise InvalidDescriptor("idle_ttl_s only applies to demand_loaded modules")
        self.quota.validate()
        seen = set()
        for rule in self.routes:
            rule.validate()
            key = (rule.method, rule.path_prefix)
            if key in seen:
                raise InvalidDescriptor(f"duplicate route {key} within descriptor")
            seen.add(key)

    def to_json(self) -> dict:
        return {
            "module_id": self.module_id,
            "name": self.name,
            "version": self.version,
            "paradigm": self.paradigm.value,
            "artifact_ref": self.artifact_ref,
            "routes": [r.to_json() for r in self.routes],
            "quota": self.quota.to_json(),
            "demand_loaded": self.demand_loaded,
            "idle_ttl_s": self.idle_ttl_s,
            "replicas_desired": self.replicas_desired,
        }

    @classmethod
    def from_json(cls, data: dict) -> "ModuleDescriptor":
        try:
            desc = cls(
                module_id=data["module_id"],
                name=data.get("name", data["module_id"]),
                version=data["version"],
                paradigm=Paradigm(data["paradigm"]),
                artifact_ref=data["artifact_ref"],
                routes=tuple(RouteRule.from_json(r) for r in data.get("routes", [])),
                quota=ResourceQuota.from_json(data.get("quota", {})),
                demand_loaded=data.get("demand_loaded", False),
                idle_ttl_s=data.get("idle_ttl_s"),
                replicas_desired=data.get("replicas_desired", 1),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise InvalidDescriptor(f"bad descriptor: {exc}") from exc
        desc.validate()
        return desc


class ServiceInstance:
    """Live execution environment of a module; mutable, lock-guarded."""

    def __init__(self, module_id: str, version: str, endpoint=None,
                 restart_count: int = 0):
        self.instance_id = f"{module_id}-{uuid.uuid4().hex[:8]}"
        self.module_id = module_id
        self.version = version
        self.state = InstanceState.Starting
        self.endpoint = endpoint
        self.started_at = time.time()
        self.restart_count = restart_count
        self.last_dispatch_mono = time.monotonic()
        self.consecutive_failures = 0
        self.heals: tuple[str, ...] = ()
        self.supports_fault_control = False
        self._active = 0
        self._lock = threading.Lock()

    @property
    def active_requests(self) -> int:
        return self._active

    def inc_active(self) -> int:
        with self._lock:
            self._active += 1
            return self._active

    def dec_active(self) -> int:
        with self._lock:
            self._active -= 1
            if self._active < 0:
                raise AssertionError(f"active_requests underflow on {self.instance_id}")
            return self._active

    def transition(self, new_state: InstanceState) -> None:
        with self._lock:
            if new_state not in ALLOWED_TRANSITIONS[self.state]:
                raise IllegalTransition(self.instance_id, self.state, new_state)
            self.state = new_state

    def snapshot(self) -> "InstanceSnapshot":
        with self._lock:
            return InstanceSnapshot(
                instance_id=self.instance_id,
                module_id=self.module_id,
                version=self.version,
                state=self.state,
                started_at=self.started_at,
                active_requests=self._active,
                restart_count=self.restart_count,
                consecutive_failures=self.consecutive_failures,
                heals=self.heals,
            )


@dataclass(frozen=True)
class InstanceSnapshot:
    instance_id: str
    module_id: str
    version: str
    state: InstanceState
    started_at: float
    active_requests: int
    restart_count: int
    consecutive_failures: int
    heals: tuple[str, ...]

    def to_json(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "module_id": self.module_id,
            "version": self.version,
            "state": self.state.value,
            "started_at": self.started_at,
            "active_requests": self.active_requests,
            "restart_count": self.restart_count,
            "consecutive_failures": self.consecutive_failures,
            "heals": list(self.heals),
        }


@dataclass(frozen=True)
class Route:
    method: str
    path_prefix: str
    strategy: Strategy
    module_id: str


class _Entry:
    def __init__(self, descriptor: ModuleDescriptor, resident: bool):
        self.descriptor = descriptor
        self.resident = resident
        self.instances: list[ServiceInstance] = []  # registration order
        self.draining = False
        self.restarts_total = 0
        self.start_count = 0
        self.fault_config: Optional[dict] = None


class Registry:
    def __init__(self):
        self._lock = threading.RLock()
        self._entries: dict[str, _Entry] = {}
        self._routes: tuple[Route, ...] = ()

    # -- mutations (single exclusive writer path) -------------------------

    def register(self, descriptor: ModuleDescriptor, *, resident: bool = False) -> None:
        descriptor.validate()
        with self._lock:
            if descriptor.module_id in self._entries:
                raise DuplicateId(f"module {descriptor.module_id!r} already registered")
            claimed = {(r.method, r.path_prefix) for r in self._routes}
            for rule in descriptor.routes:
                if (rule.method, rule.path_prefix) in claimed:
                    raise RouteCollision(rule.method, rule.path_prefix)
            self._entries[descriptor.module_id] = _Entry(descriptor, resident)
            self._rebuild_routes_locked()
            logger.info("registered module %s v%s (%s)", descriptor.module_id,
                        descriptor.version, descriptor.paradigm.value)

    def begin_unregister(self, module_id: str) -> list[ServiceInstance]:
        """Atomically remove routes and mark draining; returns live instances."""
        with self._lock:
            entry = self._entry(module_id)
            if entry.resident:
                raise ProtectedModule(f"{module_id} is a kernel server")
            entry.draining = True
            self._rebuild_routes_locked()
            return list(entry.instances)

    def finish_unregister(self, module_id: str) -> None:
        with self._lock:
            self._entries.pop(module_id, None)
            self._rebuild_routes_locked()

    def set_descriptor(self, module_id: str, descriptor: ModuleDescriptor) -> None:
        with self._lock:
            entry = self._entry(module_id)
            entry.descriptor = descriptor
            self._rebuild_routes_locked()

    def add_instance(self, instance: ServiceInstance) -> None:
        with self._lock:
            entry = self._entry(instance.module_id)
            entry.instances.append(instance)
            entry.start_count += 1

    def remove_instance(self, instance: ServiceInstance) -> None:
        with self._lock:
            entry = self._entries.get(instance.module_id)
            if entry and instance in entry.instances:
                entry.instances.remove(instance)

    def _rebuild_routes_locked(self) -> None:
        routes = []
        for entry in self._entries.values():
            if entry.draining:
                continue
            for rule in entry.descriptor.routes:
                routes.append(Route(rule.method, rule.path_prefix,
                                    rule.strategy, entry.descriptor.module_id))
        # longest prefix first makes resolution a linear scan to first hit;
        # method-specific rules outrank wildcards at equal prefix length
        routes.sort(key=lambda r: (-len(r.path_prefix), r.path_prefix,
                                   r.method == "*", r.method))
        self._routes = tuple(routes)

    # -- reads --------------------------------------------------------------

    def _entry(self, module_id: str) -> _Entry:
        entry = self._entries.get(module_id)
        if entry is None:
            raise UnknownModule(f"module {module_id!r} not registered")
        return entry

    def lookup(self, module_id: str) -> tuple[ModuleDescriptor, list[InstanceSnapshot]]:
        with self._lock:
            entry = self._entry(module_id)
            return entry.descriptor, [i.snapshot() for i in entry.instances]

    def descriptor(self, module_id: str) -> ModuleDescriptor:
        with self._lock:
            return self._entry(module_id).descriptor

    def live_instances(self, module_id: str) -> list[ServiceInstance]:
        """Internal handles in registration order; kernel-side use only."""
        with self._lock:
            return list(self._entry(module_id).instances)

    def all_live_instances(self) -> list[ServiceInstance]:
        with self._lock:
            return [i for e in self._entries.values() for i in e.instances]

    def module_ids(self) -> list[str]:
        with self._lock:
            return list(self._entries)

    def has_module(self, module_id: str) -> bool:
        with self._lock:
            return module_id in self._entries

    def is_resident(self, module_id: str) -> bool:
        with self._lock:
            return self._entry(module_id).resident

    def entry_stats(self, module_id: str) -> dict:
        with self._lock:
            entry = self._entry(module_id)
            return {"restarts_total": entry.restarts_total,
                    "start_count": entry.start_count,
                    "draining": entry.draining}

    def tally_restart(self, module_id: str) -> int:
        with self._lock:
            entry = self._entry(module_id)
            entry.restarts_total += 1
            return entry.restarts_total

    def get_fault_config(self, module_id: str) -> Optional[dict]:
        with self._lock:
            return self._entry(module_id).fault_config

    def set_fault_config(self, module_id: str, config: Optional[dict]) -> None:
        with self._lock:
            self._entry(module_id).fault_config = config

    def routes(self) -> tuple[Route, ...]:
        return self._routes  # atomic reference read; tuple is immutable

    # -- persistence ----------------------------------------------------------

    def persist(self, path: str) -> None:
        with self._lock:
            payload = {"modules": [e.descriptor.to_json()
                                   for e in self._entries.values() if not e.resident]}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2)

    @staticmethod
    def load_descriptors(path: str) -> list[ModuleDescriptor]:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        return [ModuleDescriptor.from_json(d) for d in payload.get("modules", [])]
