"""HTTP front ends: the public edge on listen_addr, admin API on admin_addr.

Plain HTTP/1.1 over stdlib threading servers. The edge translates between
HTTP and the dispatcher's Request/Response; the admin server exposes the
registry, lifecycle commands, monitor views, the MAPE-K knowledge base,
the long-poll event feed, and the console's static files.
"""

from __future__ import annotations

import json
import logging
import mimetypes
import os
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

from .config import parse_addr
from .dispatcher import Request
from .errors import AddrInUse, KernelError
from .monitor import Aggregation, AlertRule

logger = logging.getLogger(__name__)

ENV_CONSOLE_DIR = "MUK_CONSOLE_DIR"


def _make_server(addr: str, handler_cls) -> ThreadingHTTPServer:
    host, port = parse_addr(addr)
    try:
        server = ThreadingHTTPServer((host, port), handler_cls)
    except OSError as exc:
        raise AddrInUse(addr) from exc
    server.daemon_threads = True
    return server


class _QuietHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        logger.debug("%s %s", self.address_string(), fmt % args)

    def _read_body(self) -> bytes:
        length = int(self.headers.get("Content-Length") or 0)
        return self.rfile.read(length) if length else b""

    def _send(self, status: int, body: bytes, headers: dict | None = None) -> None:
        self.send_response(status)
        for key, value in (headers or {}).items():
            if key.lower() not in ("content-length", "connection"):
                self.send_header(key, value)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        try:
            self.wfile.write(body)
        except (BrokenPipeError, ConnectionResetError):
            pass

    def _send_json(self, status: int, obj) -> None:
        self._send(status, json.dumps(obj).encode("utf-8"),
                   {"Content-Type": "application/json"})


class EdgeHandler(_QuietHandler):
    kernel = None  # set by subclassing in serve_edge

    def _forward(self):
        parsed = urlparse(self.path)
        req = Request(method=self.command, path=parsed.path,
                      headers={k: v for k, v in self.headers.items()},
                      body=self._read_body())
        response = self.kernel.dispatch(req)
        self._send(response.status, response.body, response.headers)

    do_GET = do_POST = do_PUT = do_DELETE = do_PATCH = _forward


class AdminHandler(_QuietHandler):
    kernel = None

    ROUTES = [
        ("GET", r"^/admin/modules$", "modules_list"),
        ("POST", r"^/admin/modules$", "modules_create"),
        ("GET", r"^/admin/modules/([^/]+)$", "module_get"),
        ("DELETE", r"^/admin/modules/([^/]+)$", "module_delete"),
        ("POST", r"^/admin/modules/([^/]+)/deploy$", "module_deploy"),
        ("POST", r"^/admin/modules/([^/]+)/rollback$", "module_rollback"),
        ("POST", r"^/admin/modules/([^/]+)/scale$", "module_scale"),
        ("POST", r"^/admin/modules/([^/]+)/fault$", "module_fault"),
        ("GET", r"^/admin/modules/([^/]+)/deployments$", "module_deployments"),
        ("GET", r"^/admin/instances$", "instances_list"),
        ("POST", r"^/admin/instances/([^/]+)/restart$", "instance_restart"),
        ("GET", r"^/admin/tasks$", "tasks"),
        ("GET", r"^/admin/snapshot$", "snapshot"),
        ("GET", r"^/admin/metrics$", "metrics"),
        ("GET", r"^/admin/trace/([^/]+)$", "trace"),
        ("GET", r"^/admin/alerts$", "alerts_get"),
        ("POST", r"^/admin/alerts$", "alerts_post"),
        ("DELETE", r"^/admin/alerts/([^/]+)$", "alerts_delete"),
        ("GET", r"^/admin/events$", "events"),
        ("GET", r"^/admin/mapek/knowledge$", "mapek_knowledge"),
        ("GET", r"^/admin/mapek/cycles$", "mapek_cycles"),
        ("POST", r"^/admin/mapek/mode$", "mapek_mode"),
    ]

    def _route(self):
        parsed = urlparse(self.path)
        if parsed.path == "/console" or parsed.path.startswith("/console/"):
            if self.command == "GET":
                return self._console(parsed.path)
            return self._send_json(405, {"error": "method not allowed"})
        query = {k: v[0] for k, v in parse_qs(parsed.query).items()}
        for method, pattern, name in self.ROUTES:
            if method != self.command:
                continue
            match = re.match(pattern, parsed.path)
            if match:
                try:
                    return getattr(self, name)(*match.groups(), query=query)
                except KernelError as exc:
                    return self._send_json(exc.http_status,
                                           {"error": str(exc), "code": exc.code})
                except json.JSONDecodeError as exc:
                    return self._send_json(400, {"error": f"bad JSON: {exc}",
                                                 "code": "MalformedJson"})
                except Exception as exc:
                    logger.exception("admin handler %s failed", name)
                    return self._send_json(500, {"error": str(exc),
                                                 "code": "Internal"})
        self._send_json(404, {"error": f"no admin route {self.command} {parsed.path}",
                              "code": "NoRoute"})

    do_GET = do_POST = do_PUT = do_DELETE = _route

    def _json_body(self) -> dict:
        raw = self._read_body()
        return json.loads(raw.decode("utf-8")) if raw else {}

    # -- module routes ------------------------------------------------------

    def modules_list(self, query=None):
        self._send_json(200, {"modules": self.kernel.list_modules()})

    def modules_create(self, query=None):
        from .registry import ModuleDescriptor
        descriptor = ModuleDescriptor.from_json(self._json_body())
        self.kernel.register_module(descriptor)
        self._send_json(201, {"registered": descriptor.module_id})

    def module_get(self, module_id, query=None):
        self._send_json(200, self.kernel.module_detail(module_id))

    def module_delete(self, module_id, query=None):
        self.kernel.unregister_module(module_id)
        self._send_json(200, {"unregistered": module_id})

    def module_deploy(self, module_id, query=None):
        body = self._json_body()
        deployment = self.kernel.services.deploy(
            module_id, body["version"], body["artifact_ref"])
        self._send_json(200, deployment.to_json())

    def module_rollback(self, module_id, query=None):
        self._send_json(200, self.kernel.services.rollback(module_id).to_json())

    def module_scale(self, module_id, query=None):
        replicas = int(self._json_body()["replicas"])
        self.kernel.services.scale(module_id, replicas)
        self._send_json(200, {"module_id": module_id, "replicas": replicas})

    def module_fault(self, module_id, query=None):
        touched = self.kernel.services.inject_fault(module_id, self._json_body())
        self._send_json(200, {"module_id": module_id, "instances": touched})

    def module_deployments(self, module_id, query=None):
        self._send_json(200, {"deployments": [
            d.to_json() for d in self.kernel.services.deployments(module_id)]})

    def instances_list(self, query=None):
        self._send_json(200, {"instances": [
            i.snapshot().to_json() for i in self.kernel.registry.all_live_instances()]})

    def instance_restart(self, instance_id, query=None):
        replacement = self.kernel.restart_instance(instance_id)
        self._send_json(200, {"replaced": instance_id,
                              "replacement": replacement.instance_id})

    # -- observability routes ---------------------------------------------------

    def tasks(self, query=None):
        stats = self.kernel.scheduler.stats()
        stats["ledger"] = self.kernel.scheduler.ledger()
        self._send_json(200, stats)

    def snapshot(self, query=None):
        self._send_json(200, self.kernel.monitor.snapshot())

    def metrics(self, query=None):
        query = query or {}
        series = self.kernel.monitor.query_history(
            query.get("metric", "LatencyUs"), query.get("target", "*"),
            float(query["from"]), float(query["to"]),
            Aggregation(query.get("agg", "Mean")))
        self._send_json(200, {"series": series})

    def trace(self, request_id, query=None):
        self._send_json(200, {"request_id": request_id,
                              "events": self.kernel.monitor.trace_request(request_id)})

    def alerts_get(self, query=None):
        self._send_json(200, {"rules": [r.to_json() for r in self.kernel.monitor.rules()],
                              "states": self.kernel.monitor.alert_states()})

    def alerts_post(self, query=None):
        body = self._json_body()
        rules = body if isinstance(body, list) else [body]
        for data in rules:
            self.kernel.monitor.put_rule(AlertRule.from_json(data))
        self._send_json(200, {"rules": len(rules)})

    def alerts_delete(self, rule_id, query=None):
        self.kernel.monitor.delete_rule(rule_id)
        self._send_json(200, {"deleted": rule_id})

    def events(self, query=None):
        query = query or {}
        since = int(query.get("since", 0))
        timeout = min(float(query.get("timeout", 25.0)), 30.0)
        self._send_json(200, self.kernel.monitor.feed.wait_since(since, timeout))

    # -- MAPE-K routes ---------------------------------------------------------------

    def mapek_knowledge(self, query=None):
        self._send_json(200, self.kernel.mapek.kb.to_json())

    def mapek_cycles(self, query=None):
        query = query or {}
        last = int(query.get("last", 20))
        self._send_json(200, {"cycles": [
            r.to_json() for r in self.kernel.mapek.history(last)]})

    def mapek_mode(self, query=None):
        mode = self._json_body()["mode"]
        self.kernel.set_mapek_mode(mode)
        self._send_json(200, {"mode": mode})

    # -- console static files -----------------------------------------------------------

    def _console(self, path: str):
        root = self.kernel.console_dir
        if not root:
            return self._send_json(404, {"error": "console assets not installed",
                                         "code": "NotFound"})
        rel = path[len("/console"):].lstrip("/") or "index.html"
        full = os.path.realpath(os.path.join(root, rel))
        if not full.startswith(os.path.realpath(root)) or not os.path.isfile(full):
            return self._send_json(404, {"error": f"no asset {rel}", "code": "NotFound"})
        ctype = mimetypes.guess_type(full)[0] or "application/octet-stream"
        with open(full, "rb") as fh:
            self._send(200, fh.read(), {"Content-Type": ctype})


def serve_edge(kernel, addr: str) -> ThreadingHTTPServer:
    handler = type("BoundEdgeHandler", (EdgeHandler,), {"kernel": kernel})
    server = _make_server(addr, handler)
    thread = threading.Thread(target=server.serve_forever, name="muk-edge",
                              daemon=True)
    thread.start()
    return server


def serve_admin(kernel, addr: str) -> ThreadingHTTPServer:
    handler = type("BoundAdminHandler", (AdminHandler,), {"kernel": kernel})
    server = _make_server(addr, handler)
    thread = threading.Thread(target=server.serve_forever, name="muk-admin",
                              daemon=True)
    thread.start()
    return server
