"""Kernel configuration.

Loaded from a JSON file whose keys match the ``KernelConfig`` field names
one-to-one. The ``MUK_CONFIG`` environment variable overrides the config
file path, ``MUK_SECRET`` overrides the token-signing secret.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

from .errors import InvalidConfig

ENV_CONFIG = "MUK_CONFIG"
ENV_SECRET = "MUK_SECRET"
ENV_ADMIN = "MUK_ADMIN"


@dataclass
class KernelConfig:
    listen_addr: str = "127.0.0.1:8080"
    admin_addr: str = "127.0.0.1:8081"

    probe_interval_s: float = 5.0
    probe_failure_threshold: int = 3
    probe_timeout_s: float = 2.0

    mapek_period_s: float = 5.0
    mapek_enabled: bool = True
    # "mapek" | "baseline" | "off"; mapek_enabled=False boots into "baseline"
    mapek_mode: str = "mapek"
    mapek_grace_cycles: int = 5
    mapek_crashloop_restarts: int = 3
    mapek_crashloop_window_s: float = 60.0
    mapek_leak_min_increases: int = 5
    mapek_leak_growth_fraction: float = 0.20
    mapek_latency_factor: float = 3.0
    mapek_latency_baseline_samples: int = 50
    mapek_error_rate: float = 0.10
    mapek_error_min_requests: int = 20
    mapek_allow_restart: bool = True
    mapek_cycle_history: int = 512

    session_ttl_s: float = 3600.0
    token_ttl_s: float = 3600.0
    rate_limit_login_attempts: int = 5
    rate_limit_window_s: float = 60.0

    retry_max_attempts: int = 3
    retry_base_backoff_ms: float = 100.0
    retry_multiplier: float = 2.0

    upstream_timeout_s: float = 10.0
    hello_timeout_s: float = 3.0
    start_timeout_s: float = 10.0
    drain_timeout_s: float = 15.0
    subprocess_grace_s: float = 5.0
    max_replicas: int = 16

    snapshot_window_s: float = 60.0

    secret: str = "muk-dev-secret"
    credentials_path: str | None = None
    history_path: str | None = None
    registry_path: str | None = None
    knowledge_path: str | None = None

    def __post_init__(self):
        if os.environ.get(ENV_SECRET):
            self.secret = os.environ[ENV_SECRET]

    def validate(self) -> None:
        for name in ("probe_interval_s", "probe_timeout_s", "mapek_period_s",
                     "session_ttl_s", "token_ttl_s", "rate_limit_window_s",
                     "upstream_timeout_s", "hello_timeout_s", "start_timeout_s",
                     "drain_timeout_s", "snapshot_window_s"):
            if getattr(self, name) <= 0:
                raise InvalidConfig(name, "must be > 0")
        for name in ("probe_failure_threshold", "rate_limit_login_attempts",
                     "retry_max_attempts", "max_replicas", "mapek_grace_cycles"):
            if getattr(self, name) < 1:
                raise InvalidConfig(name, "must be >= 1")
        if self.retry_base_backoff_ms <= 0:
            raise InvalidConfig("retry_base_backoff_ms", "must be > 0")
        if self.retry_multiplier < 1:
            raise InvalidConfig("retry_multiplier", "must be >= 1")
        if self.subprocess_grace_s < 0:
            raise InvalidConfig("subprocess_grace_s", "must be >= 0")
        if self.mapek_mode not in ("mapek", "baseline", "off"):
            raise InvalidConfig("mapek_mode", "must be mapek|baseline|off")
        for name in ("listen_addr", "admin_addr"):
            addr = getattr(self, name)
            host, sep, port = addr.rpartition(":")
            if not sep or not host or not port.isdigit() or not 0 <= int(port) <= 65535:
                raise InvalidConfig(name, "expected host:port")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


_FIELDS = {f.name for f in dataclasses.fields(KernelConfig)}


def config_from_dict(data: dict) -> KernelConfig:
    unknown = set(data) - _FIELDS
    if unknown:
        raise InvalidConfig(sorted(unknown)[0], "unknown field")
    cfg = KernelConfig(**data)
    cfg.validate()
    return cfg


def load_config(path: str | None = None) -> KernelConfig:
    """Read config from *path*, honoring the MUK_CONFIG override."""
    path = os.environ.get(ENV_CONFIG, path)
    if path is None:
        cfg = KernelConfig()
        cfg.validate()
        return cfg
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidConfig("<file>", f"not valid JSON: {exc}") from exc
    return config_from_dict(data)


def parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host, int(port)
