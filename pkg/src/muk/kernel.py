"""Kernel boot, wiring, and shutdown.

``boot`` composes the registry, bus, scheduler, monitor, service manager,
dispatcher, MAPE-K loop and the four resident kernel servers, binds the
two HTTP listeners, and starts the periodic housekeeping tasks (probes,
eviction, alert evaluation, MAPE-K cycles). The four kernel servers are
registered as resident modules: they are never demand-unloaded or evicted.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from typing import Optional

from . import httpapi
from .config import KernelConfig
from .dispatcher import Dispatcher, Request, Response
from .errors import InvalidConfig, UnknownModule
from .isc import Bus
from .mapek import KnowledgeBase, MapeK
from .monitor import Level, Monitor
from .registry import (
    InstanceState,
    KERNEL_SERVER_IDS,
    ModuleDescriptor,
    Paradigm,
    Registry,
    ResourceQuota,
    ServiceInstance,
)
from .scheduler import Scheduler, schedule_periodic
from .servers import (
    AuthServer,
    EventServer,
    SessionServer,
    ValidationServer,
    isc_endpoint,
)
from .services import ServiceManager

logger = logging.getLogger(__name__)


class _KernelServerHandler:
    """Minimal InProcess handler wrapping a resident kernel server."""

    heals: tuple[str, ...] = ()

    def __init__(self, server_id: str):
        self.server_id = server_id

    def handle(self, req):
        return 200, {"Content-Type": "application/json"}, json.dumps(
            {"server": self.server_id, "ok": True}).encode()

    def health(self) -> int:
        return 1024 * 1024


class Kernel:
    def __init__(self, config: KernelConfig):
        config.validate()
        self.config = config
        self.bus = Bus()
        self.monitor = Monitor(history_path=config.history_path,
                               window_s=config.snapshot_window_s)
        self.registry = Registry()
        self.scheduler = Scheduler(
            bus=self.bus,
            log=lambda level, msg: self.monitor.append_log(
                Level[level], "scheduler", msg))
        self._mode = config.mapek_mode if config.mapek_enabled else "baseline"
        self.services = ServiceManager(self.registry, self.monitor, config,
                                       mode_getter=lambda: self._mode)
        self.dispatcher = Dispatcher(self.registry, self.monitor, config,
                                     self.services)
        self.mapek = MapeK(self.registry, self.monitor, self.services, self.bus,
                           config, KnowledgeBase(config.knowledge_path))
        self.sessions = SessionServer(default_ttl_s=config.session_ttl_s)
        self.auth = AuthServer(config.secret,
                               token_ttl_s=config.token_ttl_s,
                               login_limit=config.rate_limit_login_attempts,
                               login_window_s=config.rate_limit_window_s,
                               credentials_path=config.credentials_path)
        self.validation = ValidationServer()
        self.events = EventServer(self.bus)
        self.monitor.bind(registry=self.registry, bus=self.bus,
                          scheduler=self.scheduler, mode_getter=lambda: self._mode)
        self._edge_server = None
        self._admin_server = None
        self._periodic = []
        self._pump_stop = threading.Event()
        self._pump_thread: Optional[threading.Thread] = None
        self._running = False
        self._shutdown_lock = threading.Lock()

    # -- boot ----------------------------------------------------------------

    def start(self) -> "Kernel":
        self._register_kernel_servers()
        self._edge_server = httpapi.serve_edge(self, self.config.listen_addr)
        try:
            self._admin_server = httpapi.serve_admin(self, self.config.admin_addr)
        except Exception:
            self._edge_server.shutdown()
            self._edge_server.server_close()
            raise
        if self.config.registry_path and os.path.exists(self.config.registry_path):
            self._reload_registry(self.config.registry_path)
        self.scheduler.start()
        self._periodic = [
            schedule_periodic(self.scheduler, "probe-sweep",
                              self.config.probe_interval_s,
                              self.services.sweep_probes, priority=7),
            schedule_periodic(self.scheduler, "evict-idle",
                              self.config.probe_interval_s,
                              self.services.evict_idle, priority=6),
            schedule_periodic(self.scheduler, "alert-eval", 1.0,
                              self.monitor.evaluate_alerts, priority=6),
            schedule_periodic(self.scheduler, "mapek-cycle",
                              self.config.mapek_period_s,
                              self._mapek_tick, priority=8),
        ]
        self._pump_thread = threading.Thread(target=self._pump_loop,
                                             name="muk-event-pump", daemon=True)
        self._pump_thread.start()
        self._running = True
        self.monitor.append_log(Level.Info, "kernel",
                                f"booted on {self.listen_addr} (admin {self.admin_addr})")
        return self

    def _mapek_tick(self) -> None:
        if self._mode == "mapek":
            self.mapek.run_cycle()

    def _pump_loop(self) -> None:
        while not self._pump_stop.wait(0.005):
            self.events.pump()

    def _register_kernel_servers(self) -> None:
        servers = {
            "kernel.session": self.sessions,
            "kernel.auth": self.auth,
            "kernel.validate": self.validation,
            "kernel.event": self.events,
        }
        assert set(servers) == set(KERNEL_SERVER_IDS)
        for server_id, server in servers.items():
            descriptor = ModuleDescriptor(
                module_id=server_id, name=server_id, version="1.0.0",
                paradigm=Paradigm.InProcess, artifact_ref="kernel-server",
                routes=(), quota=ResourceQuota(), demand_loaded=False,
                replicas_desired=1)
            self.registry.register(descriptor, resident=True)
            instance = ServiceInstance(server_id, "1.0.0")
            from .paradigms import InProcessEndpoint
            instance.endpoint = InProcessEndpoint(_KernelServerHandler(server_id))
            self.registry.add_instance(instance)
            instance.transition(InstanceState.Ready)
            self.bus.register_endpoint(server_id, isc_endpoint(server, server_id))

    def _reload_registry(self, path: str) -> None:
        try:
            descriptors = Registry.load_descriptors(path)
        except Exception as exc:
            self.monitor.append_log(Level.Error, "kernel",
                                    f"registry reload failed: {exc}")
            return
        for descriptor in descriptors:
            try:
                self.register_module(descriptor)
            except Exception as exc:
                self.monitor.append_log(Level.Error, "kernel",
                                        f"reload of {descriptor.module_id} failed: {exc}")

    # -- addresses (resolved after bind, so port 0 works in tests) -----------------

    @property
    def listen_addr(self) -> str:
        host, port = self._edge_server.server_address[:2]
        return f"{host}:{port}"

    @property
    def admin_addr(self) -> str:
        host, port = self._admin_server.server_address[:2]
        return f"{host}:{port}"

    @property
    def console_dir(self) -> Optional[str]:
        path = os.environ.get(httpapi.ENV_CONSOLE_DIR)
        if path and os.path.isdir(path):
            return path
        bundled = os.path.join(os.path.dirname(__file__), "..", "..",
                               "frontend", "dist")
        bundled = os.path.realpath(bundled)
        return bundled if os.path.isdir(bundled) else None

    # -- module lifecycle -------------------------------------------------------------

    def register_module(self, descriptor: ModuleDescriptor) -> dict:
        self.registry.register(descriptor)
        started = self.services.start_replicas(descriptor.module_id)
        self.auth.audit.append("admin", "module.register", descriptor.module_id)
        return {"module_id": descriptor.module_id,
                "instances": [i.instance_id for i in started]}

    def unregister_module(self, module_id: str) -> dict:
        instances = self.registry.begin_unregister(module_id)
        failures = {}
        for instance in instances:
            try:
                self.services.drain_and_stop(instance)
            except Exception as exc:
                failures[instance.instance_id] = str(exc)
        self.registry.finish_unregister(module_id)
        self.services.forget_module(module_id)
        self.auth.audit.append("admin", "module.unregister", module_id)
        return {"module_id": module_id, "failures": failures}

    def lookup(self, module_id: str):
        return self.registry.lookup(module_id)

    def restart_instance(self, instance_id: str) -> ServiceInstance:
        for instance in self.registry.all_live_instances():
            if instance.instance_id == instance_id:
                return self.services.restart_instance(instance)
        raise UnknownModule(f"no live instance {instance_id!r}")

    def list_modules(self) -> list[dict]:
        out = []
        for module_id in self.registry.module_ids():
            descriptor, instances = self.registry.lookup(module_id)
            out.append({
                "descriptor": descriptor.to_json(),
                "resident": self.registry.is_resident(module_id),
                "instances": [i.to_json() for i in instances],
                "restarts_total": self.registry.entry_stats(module_id)["restarts_total"],
            })
        return out

    def module_detail(self, module_id: str) -> dict:
        descriptor, instances = self.registry.lookup(module_id)
        return {
            "descriptor": descriptor.to_json(),
            "resident": self.registry.is_resident(module_id),
            "instances": [i.to_json() for i in instances],
            "deployments": [d.to_json() for d in self.services.deployments(module_id)],
            "restarts_total": self.registry.entry_stats(module_id)["restarts_total"],
        }

    # -- dispatch & modes ------------------------------------------------------------------

    def dispatch(self, req: Request) -> Response:
        return self.dispatcher.dispatch(req)

    @property
    def mapek_mode(self) -> str:
        return self._mode

    def set_mapek_mode(self, mode: str) -> None:
        if mode not in ("mapek", "baseline", "off"):
            raise InvalidConfig("mapek_mode", "must be mapek|baseline|off")
        self._mode = mode
        self.monitor.append_log(Level.Info, "kernel", f"mapek mode set to {mode}")
        self.auth.audit.append("admin", "mapek.mode", mode)

    # -- shutdown --------------------------------------------------------------------------

    def shutdown(self) -> dict:
        """Drain everything and stop; idempotent, reports per-module failures."""
        with self._shutdown_lock:
            if not self._running:
                return {"ok": True, "already_stopped": True, "failures": {}}
            self._running = False
        for handle in self._periodic:
            handle.cancel()
        self._pump_stop.set()
        if self._pump_thread is not None:
            self._pump_thread.join(2)
        for server in (self._edge_server, self._admin_server):
            if server is not None:
                threading.Thread(target=server.shutdown, daemon=True).start()
        failures: dict[str, str] = {}
        resident, apps = [], []
        for module_id in self.registry.module_ids():
            (resident if self.registry.is_resident(module_id) else apps).append(module_id)
        for module_id in apps + resident:
            try:
                self.services.stop_module(module_id)
            except Exception as exc:
                failures[module_id] = str(exc)
        if self.config.registry_path:
            try:
                self.registry.persist(self.config.registry_path)
            except OSError as exc:
                failures["<registry>"] = str(exc)
        self.mapek.kb.persist()
        self.scheduler.stop()
        for server in (self._edge_server, self._admin_server):
            if server is not None:
                server.server_close()
        self.monitor.append_log(Level.Info, "kernel", "shutdown complete")
        self.monitor.close()
        return {"ok": not failures, "failures": failures}


def boot(config: KernelConfig) -> Kernel:
    """Boot a kernel: servers resident, loops running, HTTP listening."""
    return Kernel(config).start()
