"""Execution paradigms: in-process handlers and managed subprocesses.

Both paradigms sit behind the same endpoint surface (invoke/probe/heal/
set_fault/terminate) so the dispatcher, prober and MAPE-K executor never
care which one they are talking to. Subprocess endpoints speak the framed
envelope protocol over the child's stdio.
"""

from __future__ import annotations

import base64
import json
import logging
import os
import shlex
import subprocess
import sys
import threading
from concurrent.futures import Future
from concurrent.futures import TimeoutError as FutureTimeout
from typing import Optional

from . import isc
from .errors import StartFailure, UpstreamTimeout

logger = logging.getLogger(__name__)

FAULT_CONTROL_PATH = "/__muk/fault"
DEFAULT_INPROC_MEMORY = 1 * 1024 * 1024


def encode_request_body(method: str, path: str, headers: dict, body: bytes) -> bytes:
    return json.dumps({
        "method": method,
        "path": path,
        "headers": headers,
        "body_b64": base64.b64encode(body).decode("ascii"),
    }).encode("utf-8")


def decode_request_body(data: bytes) -> tuple[str, str, dict, bytes]:
    obj = json.loads(data.decode("utf-8"))
    return (obj["method"], obj["path"], obj.get("headers", {}),
            base64.b64decode(obj.get("body_b64", "")))


def encode_response_body(status: int, headers: dict, body: bytes) -> bytes:
    return json.dumps({
        "status": status,
        "headers": headers,
        "body_b64": base64.b64encode(body).decode("ascii"),
    }).encode("utf-8")


def decode_response_body(data: bytes) -> tuple[int, dict, bytes]:
    obj = json.loads(data.decode("utf-8"))
    return (obj["status"], obj.get("headers", {}),
            base64.b64decode(obj.get("body_b64", "")))


class InProcessEndpoint:
    """Direct-call endpoint wrapping a registered handler object."""

    def __init__(self, handler):
        self.handler = handler

    @property
    def heals(self) -> tuple[str, ...]:
        return tuple(getattr(self.handler, "heals", ()))

    @property
    def supports_faults(self) -> bool:
        return hasattr(self.handler, "control_fault")

    def invoke(self, req, timeout_s: float) -> tuple[int, dict, bytes]:
        return self.handler.handle(req)

    def probe(self, timeout_s: float) -> int:
        health = getattr(self.handler, "health", None)
        return int(health()) if health else DEFAULT_INPROC_MEMORY

    def heal(self, name: str, timeout_s: float) -> bool:
        heal = getattr(self.handler, "heal", None)
        return bool(heal(name)) if heal else False

    def set_fault(self, config: dict, timeout_s: float) -> bool:
        if not self.supports_faults:
            return False
        return bool(self.handler.control_fault(config))

    def alive(self) -> bool:
        return True

    def terminate(self, grace_s: float) -> None:
        close = getattr(self.handler, "close", None)
        if close:
            close()


class SubprocessEndpoint:
    """Envelope transport to a child process over stdin/stdout pipes.

    A single reader thread demultiplexes replies by correlation id. If the
    child exits, every pending call fails fast with ConnectionError.
    """

    def __init__(self, proc: subprocess.Popen, module_id: str, instance_id: str,
                 hello: dict):
        self._proc = proc
        self._module_id = module_id
        self._instance_id = instance_id
        self.hello = hello
        self._pending: dict[str, Future] = {}
        self._lock = threading.Lock()
        self._write_lock = threading.Lock()
        self._closed = False
        self._reader = threading.Thread(target=self._read_loop,
                                        name=f"muk-io-{instance_id}", daemon=True)
        self._reader.start()

    # -- spawn -------------------------------------------------------------

    @classmethod
    def spawn(cls, artifact_ref: str, module_id: str, instance_id: str,
              hello_timeout_s: float) -> "SubprocessEndpoint":
        argv = shlex.split(artifact_ref)
        env = dict(os.environ, MUK_MODULE_ID=module_id, MUK_INSTANCE_ID=instance_id)
        try:
            proc = subprocess.Popen(argv, stdin=subprocess.PIPE,
                                    stdout=subprocess.PIPE, env=env)
        except OSError as exc:
            raise StartFailure(f"cannot spawn {argv!r}: {exc}") from exc

        hello_future: Future = Future()
        endpoint = cls.__new__(cls)
        endpoint._proc = proc
        endpoint._module_id = module_id
        endpoint._instance_id = instance_id
        endpoint.hello = {}
        endpoint._pending = {"__hello__": hello_future}
        endpoint._lock = threading.Lock()
        endpoint._write_lock = threading.Lock()
        endpoint._closed = False
        endpoint._reader = threading.Thread(target=endpoint._read_loop,
                                            name=f"muk-io-{instance_id}", daemon=True)
        endpoint._reader.start()
        try:
            endpoint.hello = hello_future.result(hello_timeout_s)
        except (FutureTimeout, ConnectionError) as exc:
            endpoint.terminate(0.5)
            raise StartFailure(
                f"{module_id}: no Hello within {hello_timeout_s}s ({exc})") from exc
        return endpoint

    @property
    def heals(self) -> tuple[str, ...]:
        return tuple(self.hello.get("heals", ()))

    @property
    def supports_faults(self) -> bool:
        return bool(self.hello.get("faults", False))

    @property
    def pid(self) -> Optional[int]:
        return self._proc.pid

    # -- reader ------------------------------------------------------------

    def _read_loop(self) -> None:
        stream = self._proc.stdout
        try:
            while True:
                env = isc.read_frame(stream)
                if env is None:
                    break
                if env.kind is isc.Kind.Hello:
                    fut = self._take_pending("__hello__")
                    if fut is not None:
                        fut.set_result(env.json_body())
                    continue
                fut = self._take_pending(env.correlation_id)
                if fut is not None:
                    fut.set_result(env)
        except Exception as exc:
            logger.debug("reader for %s stopped: %s", self._instance_id, exc)
        finally:
            self._fail_pending(ConnectionError(f"{self._instance_id} transport closed"))

    def _take_pending(self, key: str) -> Optional[Future]:
        with self._lock:
            return self._pending.pop(key, None)

    def _fail_pending(self, exc: Exception) -> None:
        with self._lock:
            pending, self._pending = self._pending, {}
        for fut in pending.values():
            if not fut.done():
                fut.set_exception(exc)

    # -- calls ---------------------------------------------------------------

    def _call(self, env: isc.Envelope, timeout_s: float) -> isc.Envelope:
        if self._closed or self._proc.poll() is not None:
            raise ConnectionError(f"{self._instance_id} process has exited")
        fut: Future = Future()
        with self._lock:
            self._pending[env.id] = fut
        try:
            with self._write_lock:
                isc.write_frame(self._proc.stdin, env)
        except (OSError, ValueError) as exc:
            self._take_pending(env.id)
            raise ConnectionError(f"{self._instance_id} stdin broken: {exc}") from exc
        try:
            return fut.result(timeout_s)
        except FutureTimeout:
            self._take_pending(env.id)
            raise UpstreamTimeout(
                f"{self._instance_id} gave no reply within {timeout_s}s") from None

    def invoke(self, req, timeout_s: float) -> tuple[int, dict, bytes]:
        env = isc.make_envelope(
            isc.Kind.Request, self._module_id,
            encode_request_body(req.method, req.path, req.headers, req.body))
        reply = self._call(env, timeout_s)
        if reply.kind is not isc.Kind.Reply:
            raise ConnectionError(f"expected Reply, got {reply.kind.value}")
        return decode_response_body(reply.body)

    def probe(self, timeout_s: float) -> int:
        env = isc.make_envelope(isc.Kind.Probe, self._module_id)
        reply = self._call(env, timeout_s)
        if reply.kind is not isc.Kind.ProbeOk:
            raise ConnectionError(f"expected ProbeOk, got {reply.kind.value}")
        return int(reply.json_body()["memory_bytes"])

    def heal(self, name: str, timeout_s: float) -> bool:
        env = isc.make_envelope(isc.Kind.Heal, self._module_id,
                                json.dumps({"hook": name}).encode())
        reply = self._call(env, timeout_s)
        return reply.kind is isc.Kind.HealOk

    def set_fault(self, config: dict, timeout_s: float) -> bool:
        if not self.supports_faults:
            return False
        env = isc.make_envelope(
            isc.Kind.Request, self._module_id,
            encode_request_body("POST", FAULT_CONTROL_PATH, {},
                                json.dumps(config).encode()))
        status, _, _ = decode_response_body(self._call(env, timeout_s).body)
        return status == 200

    def alive(self) -> bool:
        return not self._closed and self._proc.poll() is None

    def terminate(self, grace_s: float) -> None:
        """SIGTERM, wait out the grace period, then SIGKILL."""
        self._closed = True
        try:
            if self._proc.stdin:
                self._proc.stdin.close()
        except OSError:
            pass
        if self._proc.poll() is None:
            self._proc.terminate()
            try:
                self._proc.wait(grace_s)
            except subprocess.TimeoutExpired:
                logger.warning("instance %s ignored SIGTERM; killing", self._instance_id)
                self._proc.kill()
                try:
                    self._proc.wait(5)
                except subprocess.TimeoutExpired:
                    pass
        self._fail_pending(ConnectionError(f"{self._instance_id} terminated"))


def child_artifact(handler: str, *args: str) -> str:
    """artifact_ref for a bundled subprocess handler run via ``-m muk.child``."""
    argv = [sys.executable, "-m", "muk.child", handler, *args]
    return " ".join(shlex.quote(a) for a in argv)
