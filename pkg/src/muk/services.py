"""Module lifecycle: deployment, scaling, probing, demand loading, recovery.

Lifecycle mutations are serialized per module (one exclusive lane each);
probing and eviction run as scheduler tasks concurrent with dispatch.
Rolling replacement keeps at least one selectable instance serving through
every deploy/rollback, and a per-module single-flight latch makes demand
loading start exactly one instance no matter how many callers race.
"""

from __future__ import annotations

import logging
import threading
import time
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

from .config import KernelConfig
from .errors import (
    AboveMax,
    InvalidReplicas,
    NothingToRollBackTo,
    StartFailure,
    StartTimeout,
    UnsupportedFault,
    VersionNotNewer,
)
from .handlers import create_handler
from .monitor import Level, Metric, MetricSample, Monitor
from .paradigms import InProcessEndpoint, SubprocessEndpoint
from .registry import (
    InstanceState,
    ModuleDescriptor,
    Paradigm,
    Registry,
    SELECTABLE_STATES,
    ServiceInstance,
    parse_version,
)

logger = logging.getLogger(__name__)


class DeploymentStatus(Enum):
    Active = "Active"
    Superseded = "Superseded"
    RolledBack = "RolledBack"


@dataclass
class Deployment:
    module_id: str
    version: str
    artifact_ref: str
    deployed_at: float
    status: DeploymentStatus

    def to_json(self) -> dict:
        return {"module_id": self.module_id, "version": self.version,
                "artifact_ref": self.artifact_ref, "deployed_at": self.deployed_at,
                "status": self.status.value}


class ProbeOutcome(Enum):
    Ok = "Ok"
    Fail = "Fail"


@dataclass(frozen=True)
class ProbeReport:
    instance_id: str
    at: float
    outcome: ProbeOutcome
    cause: str
    memory_bytes_selfreport: int
    consecutive_failures: int


class ServiceManager:
    def __init__(self, registry: Registry, monitor: Monitor, config: KernelConfig,
                 mode_getter: Optional[Callable[[], str]] = None):
        self._registry = registry
        self._monitor = monitor
        self._config = config
        self._mode = mode_getter or (lambda: "baseline")
        self._lanes: dict[str, threading.RLock] = {}
        self._lanes_guard = threading.Lock()
        self._deployments: dict[str, list[Deployment]] = {}
        self._deploy_lock = threading.Lock()
        self._flight: dict[str, threading.Event] = {}
        self._flight_error: dict[str, Exception] = {}
        self._flight_guard = threading.Lock()
        self._restart_events: dict[str, deque] = {}

    def _lane(self, module_id: str) -> threading.RLock:
        with self._lanes_guard:
            lane = self._lanes.get(module_id)
            if lane is None:
                lane = self._lanes[module_id] = threading.RLock()
            return lane

    # -- instance start/stop -------------------------------------------------

    def _start_instance(self, module_id: str, version: str, artifact_ref: str,
                        restart_count: int = 0) -> ServiceInstance:
        descriptor = self._registry.descriptor(module_id)
        instance = ServiceInstance(module_id, version, restart_count=restart_count)
        if descriptor.paradigm is Paradigm.InProcess:
            handler = create_handler(artifact_ref, module_id, version)
            endpoint = InProcessEndpoint(handler)
        else:
            endpoint = SubprocessEndpoint.spawn(
                artifact_ref, module_id, instance.instance_id,
                self._config.hello_timeout_s)
        instance.endpoint = endpoint
        instance.heals = endpoint.heals
        instance.supports_fault_control = endpoint.supports_faults
        fault = self._registry.get_fault_config(module_id)
        if fault and endpoint.supports_faults:
            try:
                endpoint.set_fault(fault, self._config.probe_timeout_s)
            except Exception as exc:
                logger.warning("re-applying fault to %s failed: %s",
                               instance.instance_id, exc)
        self._registry.add_instance(instance)
        instance.transition(InstanceState.Ready)
        self._monitor.append_log(Level.Info, "service-manager",
                                 f"started {instance.instance_id} v{version}")
        return instance

    def drain_and_stop(self, instance: ServiceInstance) -> None:
        """No new selections, in-flight requests finish (or time out), stop."""
        if instance.state is InstanceState.Stopped:
            return
        if instance.state is not InstanceState.Stopping:
            instance.transition(InstanceState.Stopping)
        deadline = time.monotonic() + self._config.drain_timeout_s
        while instance.active_requests > 0 and time.monotonic() < deadline:
            time.sleep(0.005)
        if instance.endpoint is not None:
            instance.endpoint.terminate(self._config.subprocess_grace_s)
        instance.transition(InstanceState.Stopped)
        self._registry.remove_instance(instance)
        self._monitor.append_log(Level.Info, "service-manager",
                                 f"stopped {instance.instance_id}")

    def start_replicas(self, module_id: str) -> list[ServiceInstance]:
        """Bring the module up to its desired replica count. Start failures
        are logged, not raised: the module stays registered with whatever
        capacity came up."""
        descriptor = self._registry.descriptor(module_id)
        started = []
        with self._lane(module_id):
            self._ensure_initial_deployment(module_id, descriptor)
            if descriptor.demand_loaded:
                return started
            live = [i for i in self._registry.live_instances(module_id)
                    if i.state in SELECTABLE_STATES or i.state is InstanceState.Starting]
            for _ in range(descriptor.replicas_desired - len(live)):
                try:
                    started.append(self._start_instance(
                        module_id, descriptor.version, descriptor.artifact_ref))
                except StartFailure as exc:
                    self._monitor.append_log(Level.Error, "service-manager",
                                             f"start failed for {module_id}: {exc}")
        return started

    def _ensure_initial_deployment(self, module_id: str,
                                   descriptor: ModuleDescriptor) -> None:
        with self._deploy_lock:
            if module_id not in self._deployments:
                self._deployments[module_id] = [Deployment(
                    module_id, descriptor.version, descriptor.artifact_ref,
                    time.time(), DeploymentStatus.Active)]

    def stop_module(self, module_id: str) -> None:
        with self._lane(module_id):
            for instance in self._registry.live_instances(module_id):
                self.drain_and_stop(instance)

    def forget_module(self, module_id: str) -> None:
        with self._deploy_lock:
            self._deployments.pop(module_id, None)
        self._restart_events.pop(module_id, None)

    # -- deployments ------------------------------------------------------------

    def deployments(self, module_id: str) -> list[Deployment]:
        self._registry.descriptor(module_id)  # raises UnknownModule
        with self._deploy_lock:
            # value copies: status flips stay invisible until the same lock
            # also admits the paired Active append
            return [Deployment(d.module_id, d.version, d.artifact_ref,
                               d.deployed_at, d.status)
                    for d in self._deployments.get(module_id, [])]

    def active_deployment(self, module_id: str) -> Deployment:
        for d in reversed(self.deployments(module_id)):
            if d.status is DeploymentStatus.Active:
                return d
        raise StartFailure(f"{module_id} has no active deployment")

    def deploy(self, module_id: str, version: str, artifact_ref: str) -> Deployment:
        descriptor = self._registry.descriptor(module_id)
        with self._lane(module_id):
            self._ensure_initial_deployment(module_id, descriptor)
            active = self.active_deployment(module_id)
            if parse_version(version) <= parse_version(active.version):
                raise VersionNotNewer(
                    f"{version} is not newer than active {active.version}")
            return self._roll_to(module_id, version, artifact_ref,
                                 old_status=DeploymentStatus.Superseded)

    def rollback(self, module_id: str) -> Deployment:
        self._registry.descriptor(module_id)
        with self._lane(module_id):
            with self._deploy_lock:
                history = self._deployments.get(module_id, [])
                target = next((d for d in reversed(history)
                               if d.status is DeploymentStatus.Superseded), None)
            if target is None:
                raise NothingToRollBackTo(f"{module_id} has no superseded deployment")
            return self._roll_to(module_id, target.version, target.artifact_ref,
                                 old_status=DeploymentStatus.RolledBack)

    def _roll_to(self, module_id: str, version: str, artifact_ref: str,
                 old_status: DeploymentStatus) -> Deployment:
        """Rolling replacement: new instances Ready before old ones drain.
        On start failure the old deployment stays Active."""
        descriptor = self._registry.descriptor(module_id)
        old_instances = [i for i in self._registry.live_instances(module_id)
                         if i.state in SELECTABLE_STATES
                         or i.state is InstanceState.Starting]
        replicas = 0 if descriptor.demand_loaded else max(
            descriptor.replicas_desired, 1)
        new_instances: list[ServiceInstance] = []
        try:
            for _ in range(replicas):
                new_instances.append(
                    self._start_instance(module_id, version, artifact_ref))
        except StartFailure:
            for instance in new_instances:
                self.drain_and_stop(instance)
            raise

        with self._deploy_lock:
            history = self._deployments.setdefault(module_id, [])
            for d in history:
                if d.status is DeploymentStatus.Active:
                    d.status = old_status
            record = Deployment(module_id, version, artifact_ref, time.time(),
                                DeploymentStatus.Active)
            history.append(record)

        self._registry.set_descriptor(module_id, ModuleDescriptor(
            module_id=descriptor.module_id, name=descriptor.name, version=version,
            paradigm=descriptor.paradigm, artifact_ref=artifact_ref,
            routes=descriptor.routes, quota=descriptor.quota,
            demand_loaded=descriptor.demand_loaded, idle_ttl_s=descriptor.idle_ttl_s,
            replicas_desired=descriptor.replicas_desired))

        for instance in old_instances:
            self.drain_and_stop(instance)
        self._monitor.append_log(Level.Info, "service-manager",
                                 f"{module_id} now serving v{version}")
        return record

    # -- scaling -------------------------------------------------------------------

    def scale(self, module_id: str, replicas: int) -> None:
        descriptor = self._registry.descriptor(module_id)
        if replicas < 1:
            raise InvalidReplicas("replicas must be >= 1 (unregister to remove)")
        if replicas > self._config.max_replicas:
            raise AboveMax(f"replicas {replicas} above max {self._config.max_replicas}")
        with self._lane(module_id):
            self._ensure_initial_deployment(module_id, descriptor)
            active = self.active_deployment(module_id)
            live = [i for i in self._registry.live_instances(module_id)
                    if i.state in SELECTABLE_STATES]
            for _ in range(replicas - len(live)):
                self._start_instance(module_id, active.version, active.artifact_ref)
            for instance in live[replicas:]:
                self.drain_and_stop(instance)
            self._registry.set_descriptor(module_id, ModuleDescriptor(
                module_id=descriptor.module_id, name=descriptor.name,
                version=descriptor.version, paradigm=descriptor.paradigm,
                artifact_ref=descriptor.artifact_ref, routes=descriptor.routes,
                quota=descriptor.quota, demand_loaded=descriptor.demand_loaded,
                idle_ttl_s=descriptor.idle_ttl_s, replicas_desired=replicas))

    # -- probing ---------------------------------------------------------------------

    def probe_once(self, instance: ServiceInstance) -> ProbeReport:
        now = time.time()
        descriptor = self._registry.descriptor(instance.module_id)
        try:
            memory = instance.endpoint.probe(self._config.probe_timeout_s)
            instance.consecutive_failures = 0
            self._monitor.record_sample(MetricSample(
                at=now, module_id=instance.module_id,
                instance_id=instance.instance_id,
                metric=Metric.MemoryBytes, value=float(memory)))
            if memory > descriptor.quota.max_memory_bytes \
                    and instance.state in SELECTABLE_STATES:
                # self-reported memory over quota: the orchestrator-style
                # OOM rule takes the instance out of service
                instance.transition(InstanceState.Unhealthy)
                self._monitor.append_log(
                    Level.Warn, "service-manager",
                    f"{instance.instance_id} over memory quota "
                    f"({memory} > {descriptor.quota.max_memory_bytes})")
            return ProbeReport(instance.instance_id, now, ProbeOutcome.Ok, "",
                               memory, 0)
        except Exception as exc:
            instance.consecutive_failures += 1
            if instance.consecutive_failures >= self._config.probe_failure_threshold \
                    and instance.state in SELECTABLE_STATES:
                instance.transition(InstanceState.Unhealthy)
                self._monitor.append_log(
                    Level.Warn, "service-manager",
                    f"{instance.instance_id} unhealthy after "
                    f"{instance.consecutive_failures} probe failures")
            return ProbeReport(instance.instance_id, now, ProbeOutcome.Fail,
                               str(exc), 0, instance.consecutive_failures)

    def sweep_probes(self) -> list[ProbeReport]:
        reports = []
        for instance in self._registry.all_live_instances():
            if instance.state in SELECTABLE_STATES:
                reports.append(self.probe_once(instance))
        if self._mode() != "off":
            for instance in self._registry.all_live_instances():
                if instance.state is InstanceState.Unhealthy:
                    try:
                        self.recover_unhealthy(instance)
                    except StartFailure as exc:
                        self._monitor.append_log(
                            Level.Error, "service-manager",
                            f"recovery of {instance.instance_id} failed: {exc}")
        return reports

    # -- recovery (the baseline comparator) ----------------------------------------

    def recover_unhealthy(self, instance: ServiceInstance) -> ServiceInstance:
        """Replace an Unhealthy instance: no diagnosis, no action selection."""
        if instance.state is not InstanceState.Unhealthy:
            raise StartFailure(
                f"{instance.instance_id} is {instance.state.value}, not Unhealthy")
        with self._lane(instance.module_id):
            active = self.active_deployment(instance.module_id)
            replacement = self._start_instance(
                instance.module_id, active.version, active.artifact_ref,
                restart_count=instance.restart_count + 1)
            self._note_restart(instance.module_id, instance.instance_id)
            instance.transition(InstanceState.Stopping)
            instance.endpoint.terminate(self._config.subprocess_grace_s)
            instance.transition(InstanceState.Stopped)
            self._registry.remove_instance(instance)
            self._registry.tally_restart(instance.module_id)
            self._monitor.append_log(
                Level.Warn, "service-manager",
                f"replaced {instance.instance_id} with {replacement.instance_id}")
            return replacement

    def baseline_recover(self, instance: ServiceInstance) -> ServiceInstance:
        if self._mode() != "baseline":
            raise StartFailure("baseline_recover requires baseline mode")
        return self.recover_unhealthy(instance)

    def restart_instance(self, instance: ServiceInstance) -> ServiceInstance:
        """MAPE-K Restart action: replace a live instance with a fresh one."""
        with self._lane(instance.module_id):
            if instance.state in SELECTABLE_STATES:
                instance.transition(InstanceState.Unhealthy)
            return self.recover_unhealthy(instance)

    def _note_restart(self, module_id: str, instance_id: str) -> None:
        events = self._restart_events.setdefault(module_id, deque(maxlen=256))
        events.append((time.monotonic(), instance_id))

    def restarts_within(self, module_id: str, window_s: float) -> int:
        events = self._restart_events.get(module_id)
        if not events:
            return 0
        cutoff = time.monotonic() - window_s
        return sum(1 for at, _ in events if at >= cutoff)

    def restarts_total(self, module_id: str) -> int:
        return self._registry.entry_stats(module_id)["restarts_total"]

    # -- demand loading -----------------------------------------------------------------

    def ensure_loaded(self, module_id: str) -> ServiceInstance:
        """Blocking demand load; concurrent callers share a single start."""
        descriptor = self._registry.descriptor(module_id)
        deadline = time.monotonic() + self._config.start_timeout_s
        while True:
            live = [i for i in self._registry.live_instances(module_id)
                    if i.state in SELECTABLE_STATES]
            if live:
                return live[0]
            with self._flight_guard:
                event = self._flight.get(module_id)
                starter = event is None
                if starter:
                    event = self._flight[module_id] = threading.Event()
                    self._flight_error.pop(module_id, None)
            if starter:
                try:
                    with self._lane(module_id):
                        self._ensure_initial_deployment(module_id, descriptor)
                        active = self.active_deployment(module_id)
                        return self._start_instance(module_id, active.version,
                                                    active.artifact_ref)
                except Exception as exc:
                    with self._flight_guard:
                        self._flight_error[module_id] = exc
                    raise StartTimeout(f"demand load of {module_id} failed: {exc}") \
                        from exc
                finally:
                    with self._flight_guard:
                        self._flight.pop(module_id, None)
                    event.set()
            else:
                remaining = deadline - time.monotonic()
                if remaining <= 0 or not event.wait(remaining):
                    raise StartTimeout(f"demand load of {module_id} timed out")
                with self._flight_guard:
                    error = self._flight_error.get(module_id)
                if error is not None:
                    raise StartTimeout(
                        f"demand load of {module_id} failed: {error}") from error
                # loop re-checks: the started instance should now be live

    def evict_idle(self, now_mono: Optional[float] = None) -> list[str]:
        """Drain demand-loaded instances idle past their TTL. Kernel servers
        and non-demand modules are never evicted."""
        now_mono = time.monotonic() if now_mono is None else now_mono
        evicted = []
        for module_id in self._registry.module_ids():
            if self._registry.is_resident(module_id):
                continue
            descriptor = self._registry.descriptor(module_id)
            if not descriptor.demand_loaded:
                continue
            with self._lane(module_id):
                for instance in self._registry.live_instances(module_id):
                    if instance.state not in SELECTABLE_STATES:
                        continue
                    idle_s = now_mono - instance.last_dispatch_mono
                    if instance.active_requests == 0 and idle_s >= descriptor.idle_ttl_s:
                        self.drain_and_stop(instance)
                        evicted.append(instance.instance_id)
                        self._monitor.append_log(
                            Level.Info, "service-manager",
                            f"evicted idle {instance.instance_id} "
                            f"(idle {idle_s:.1f}s >= ttl {descriptor.idle_ttl_s}s)")
        return evicted

    # -- fault injection ------------------------------------------------------------------

    def inject_fault(self, module_id: str, config: dict) -> list[str]:
        self._registry.descriptor(module_id)
        instances = [i for i in self._registry.live_instances(module_id)
                     if i.state in SELECTABLE_STATES]
        capable = [i for i in instances if i.supports_fault_control]
        if not capable:
            raise UnsupportedFault(
                f"{module_id} has no fault-capable instance")
        self._registry.set_fault_config(
            module_id, None if config.get("kind") == "Clear" else config)
        touched = []
        for instance in capable:
            if instance.endpoint.set_fault(config, self._config.probe_timeout_s):
                touched.append(instance.instance_id)
        self._monitor.append_log(Level.Warn, "service-manager",
                                 f"fault {config.get('kind')} injected into {module_id}")
        return touched
