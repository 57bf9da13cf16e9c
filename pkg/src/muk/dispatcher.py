"""Request entry point: route resolution, load balancing, forwarding.

``dispatch`` never raises for routing/capacity failures; it returns an
edge-ready ``Response`` (404/503/504/429/502) so the HTTP front end maps
one-to-one. Every dispatch, success or failure, records exactly one
latency sample and one I/O record.
"""

from __future__ import annotations

import itertools
import logging
import threading
import time
import uuid
from dataclasses import dataclass, field
from .errors import (
    KernelError,
    NoReadyInstance,
    NoRoute,
    QuotaExceeded,
    StartTimeout,
    UpstreamTimeout,
)
from .monitor import Metric, MetricSample, Monitor, make_io_record
from .registry import (
    InstanceState,
    Registry,
    Route,
    SELECTABLE_STATES,
    ServiceInstance,
    Strategy,
)

logger = logging.getLogger(__name__)


@dataclass
class Request:
    method: str
    path: str
    headers: dict[str, str] = field(default_factory=dict)
    body: bytes = b""
    request_id: str = ""
    received_at: float = field(default_factory=time.time)


@dataclass
class Response:
    status: int
    headers: dict[str, str] = field(default_factory=dict)
    body: bytes = b""
    served_by: str = ""
    latency_us: int = 0


def resolve(routes: tuple[Route, ...], method: str, path: str) -> Route:
    """Longest-prefix match among rules whose method matches ('*' matches all).

    *routes* is pre-sorted longest-prefix-first, so the first hit wins.
    """
    for route in routes:
        if route.method != "*" and route.method != method:
            continue
        if path.startswith(route.path_prefix):
            return route
    raise NoRoute(f"no route for {method} {path}")


def select_instance(instances: list[ServiceInstance], strategy: Strategy,
                    cursor: int) -> ServiceInstance:
    """Pick among selectable (Ready/Degraded) instances, registration order.

    RoundRobin cycles via *cursor*; LeastConnections picks the fewest
    active requests, preferring Ready over Degraded, ties by registration
    order.
    """
    eligible = [i for i in instances if i.state in SELECTABLE_STATES]
    if not eligible:
        raise NoReadyInstance("no Ready or Degraded instance")
    if strategy is Strategy.RoundRobin:
        return eligible[cursor % len(eligible)]
    ready = [i for i in eligible if i.state is InstanceState.Ready]
    pool = ready or eligible
    return min(pool, key=lambda i: (i.active_requests, instances.index(i)))


class Dispatcher:
    def __init__(self, registry: Registry, monitor: Monitor, config,
                 service_manager=None):
        self._registry = registry
        self._monitor = monitor
        self._config = config
        self._services = service_manager
        self._cursors: dict[str, itertools.count] = {}
        self._inflight: dict[str, int] = {}
        self._lock = threading.Lock()

    def bind_service_manager(self, service_manager) -> None:
        self._services = service_manager

    def resolve(self, method: str, path: str) -> str:
        return resolve(self._registry.routes(), method, path).module_id

    def _next_cursor(self, module_id: str) -> int:
        with self._lock:
            counter = self._cursors.get(module_id)
            if counter is None:
                counter = self._cursors[module_id] = itertools.count()
            return next(counter)

    def _acquire_quota(self, module_id: str, limit: int) -> None:
        with self._lock:
            current = self._inflight.get(module_id, 0)
            if current >= limit:
                raise QuotaExceeded(f"{module_id} at {limit} concurrent requests")
            self._inflight[module_id] = current + 1

    def _release_quota(self, module_id: str) -> None:
        with self._lock:
            self._inflight[module_id] = self._inflight.get(module_id, 1) - 1

    def inflight(self, module_id: str) -> int:
        with self._lock:
            return self._inflight.get(module_id, 0)

    def dispatch(self, req: Request) -> Response:
        if not req.request_id:
            req.request_id = uuid.uuid4().hex
        start = time.perf_counter()
        module_id = "-"
        instance_id = "-"
        transport_failure = False
        try:
            route = resolve(self._registry.routes(), req.method, req.path)
            module_id = route.module_id
            descriptor = self._registry.descriptor(module_id)

            instances = self._registry.live_instances(module_id)
            if descriptor.demand_loaded and not any(
                    i.state in SELECTABLE_STATES for i in instances):
                if self._services is not None:
                    self._services.ensure_loaded(module_id)
                instances = self._registry.live_instances(module_id)

            self._acquire_quota(module_id, descriptor.quota.max_concurrent_requests)
            try:
                instance = select_instance(instances, route.strategy,
                                           self._next_cursor(module_id))
                instance_id = instance.instance_id
                instance.inc_active()
                try:
                    status, headers, body = instance.endpoint.invoke(
                        req, self._config.upstream_timeout_s)
                finally:
                    instance.dec_active()
                    instance.last_dispatch_mono = time.monotonic()
                response = Response(status=status, headers=dict(headers), body=body,
                                    served_by=instance.instance_id)
            finally:
                self._release_quota(module_id)
        except NoRoute as exc:
            response = self._error_response(404, exc)
        except StartTimeout as exc:
            response = self._error_response(503, exc)
            self._log_error(req, f"demand load failed: {exc}")
        except NoReadyInstance as exc:
            response = self._error_response(503, exc)
        except QuotaExceeded as exc:
            response = self._error_response(429, exc)
        except UpstreamTimeout as exc:
            transport_failure = True
            response = self._error_response(504, exc)
            self._log_error(req, f"upstream timeout from {instance_id}")
        except ConnectionError as exc:
            transport_failure = True
            response = self._error_response(502, exc)
            self._log_error(req, f"transport failure from {instance_id}: {exc}")
        except Exception as exc:  # handler bug: surfaced as 500
            logger.exception("handler error for %s %s", req.method, req.path)
            response = self._error_response(500, exc)
            self._log_error(req, f"handler error: {exc}")

        latency_us = int((time.perf_counter() - start) * 1_000_000)
        response.latency_us = latency_us
        response.headers.setdefault("X-Muk-Request-Id", req.request_id)
        if response.served_by:
            response.headers.setdefault("X-Muk-Instance", response.served_by)

        now = time.time()
        self._monitor.record_sample(MetricSample(
            at=now, module_id=module_id, instance_id=instance_id,
            metric=Metric.LatencyUs, value=float(latency_us)))
        self._monitor.record_io(make_io_record(
            at=now, instance_id=instance_id, request_id=req.request_id,
            method=req.method, path=req.path, body=req.body,
            output_status=response.status, output_body=response.body,
            transport_failure=transport_failure))
        return response

    @staticmethod
    def _error_response(status: int, exc: Exception) -> Response:
        code = exc.code if isinstance(exc, KernelError) else type(exc).__name__
        return Response(status=status, headers={"Content-Type": "text/plain"},
                        body=f"{code}: {exc}".encode())

    def _log_error(self, req: Request, message: str) -> None:
        from .monitor import Level
        self._monitor.append_log(Level.Error, "dispatcher", message,
                                 request_id=req.request_id)
