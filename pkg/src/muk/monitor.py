"""Continuous observation: metrics, I/O capture, logs, alerts, history.

Recording never blocks beyond a bounded append; each record type lives in
its own ring whose overflow drops the oldest entry and bumps a drop
counter. I/O digests use 64-bit FNV-1a so they are reproducible across
implementations. On-disk history (optional) is newline-delimited JSON.
"""

from __future__ import annotations

import json
import math
import threading
import time
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Optional

from .errors import BadRange

SAMPLE_RING_CAPACITY = 65_536
IO_RING_CAPACITY = 65_536
LOG_RING_CAPACITY = 16_384

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def request_digest(method: str, path: str, body: bytes) -> int:
    return fnv1a64(method.encode() + b"\n" + path.encode() + b"\n" + body)


class Metric(Enum):
    LatencyUs = "LatencyUs"
    Throughput = "Throughput"
    MemoryBytes = "MemoryBytes"
    CpuPermille = "CpuPermille"
    QueueDepth = "QueueDepth"


class Aggregation(Enum):
    P95 = "P95"
    Mean = "Mean"
    Max = "Max"
    Rate = "Rate"


class Direction(Enum):
    Above = "Above"
    Below = "Below"


class Level(Enum):
    Debug = "Debug"
    Info = "Info"
    Warn = "Warn"
    Error = "Error"


@dataclass(frozen=True)
class MetricSample:
    at: float
    module_id: str
    instance_id: str
    metric: Metric
    value: float

    def validate(self) -> None:
        if self.value < 0:
            raise ValueError("metric value must be >= 0")


@dataclass(frozen=True)
class IoRecord:
    at: float
    instance_id: str
    request_id: str
    input_digest: int
    output_status: int
    output_digest: int
    error: bool


def make_io_record(at: float, instance_id: str, request_id: str, method: str,
                   path: str, body: bytes, output_status: int, output_body: bytes,
                   transport_failure: bool = False) -> IoRecord:
    return IoRecord(
        at=at,
        instance_id=instance_id,
        request_id=request_id,
        input_digest=request_digest(method, path, body),
        output_status=output_status,
        output_digest=fnv1a64(output_body),
        error=transport_failure or output_status >= 500,
    )


@dataclass(frozen=True)
class LogRecord:
    at: float
    level: Level
    source: str
    message: str
    request_id: Optional[str] = None


@dataclass(frozen=True)
class AlertRule:
    rule_id: str
    metric: Metric
    aggregation: Aggregation
    window_s: float
    threshold: float
    direction: Direction
    target: str = "*"

    def validate(self) -> None:
        if self.window_s <= 0:
            raise BadRange("window_s must be > 0")

    def to_json(self) -> dict:
        return {"rule_id": self.rule_id, "metric": self.metric.value,
                "aggregation": self.aggregation.value, "window_s": self.window_s,
                "threshold": self.threshold, "direction": self.direction.value,
                "target": self.target}

    @classmethod
    def from_json(cls, data: dict) -> "AlertRule":
        rule = cls(rule_id=data["rule_id"], metric=Metric(data["metric"]),
                   aggregation=Aggregation(data["aggregation"]),
                   window_s=float(data["window_s"]), threshold=float(data["threshold"]),
                   direction=Direction(data["direction"]), target=data.get("target", "*"))
        rule.validate()
        return rule


@dataclass(frozen=True)
class AlertEvent:
    rule_id: str
    at: float
    value: float
    threshold: float
    direction: Direction
    target: str

    def to_json(self) -> dict:
        return {"rule_id": self.rule_id, "at": self.at, "value": self.value,
                "threshold": self.threshold, "direction": self.direction.value,
                "target": self.target}


def nearest_rank(sorted_values: list[float], percentile: float) -> float:
    """Nearest-rank percentile over an already-sorted non-empty list."""
    rank = max(1, math.ceil(percentile / 100.0 * len(sorted_values)))
    return sorted_values[rank - 1]


class _Ring:
    def __init__(self, capacity: int):
        self._items: deque = deque(maxlen=capacity)
        self._lock = threading.Lock()
        self.dropped = 0

    def append(self, item) -> None:
        with self._lock:
            if len(self._items) == self._items.maxlen:
                self.dropped += 1
            self._items.append(item)

    def view(self) -> list:
        with self._lock:
            return list(self._items)

    def __len__(self) -> int:
        return len(self._items)


class EventFeed:
    """Sequence-numbered feed of alert/MAPE-K events for long-polling."""

    def __init__(self, capacity: int = 4096):
        self._cond = threading.Condition()
        self._events: deque[dict] = deque(maxlen=capacity)
        self._seq = 0

    def append(self, kind: str, payload: dict) -> int:
        with self._cond:
            self._seq += 1
            self._events.append({"seq": self._seq, "kind": kind,
                                 "at": time.time(), "payload": payload})
            self._cond.notify_all()
            return self._seq

    def wait_since(self, since: int, timeout: float = 25.0) -> dict:
        deadline = time.monotonic() + timeout
        with self._cond:
            if since > self._seq:
                # client cursor is ahead of us: it came from a previous epoch
                return {"reset": True, "next": self._seq, "events": []}
            while self._seq <= since:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    break
                self._cond.wait(remaining)
            events = [e for e in self._events if e["seq"] > since]
            return {"reset": False, "next": self._seq, "events": events}

    @property
    def latest_seq(self) -> int:
        return self._seq


class Monitor:
    def __init__(self, history_path: Optional[str] = None, window_s: float = 60.0):
        self._samples = _Ring(SAMPLE_RING_CAPACITY)
        self._ios = _Ring(IO_RING_CAPACITY)
        self._logs = _Ring(LOG_RING_CAPACITY)
        self._rules: dict[str, AlertRule] = {}
        self._breached: dict[str, bool] = {}
        self._rules_lock = threading.Lock()
        self._window_s = window_s
        self._history_path = history_path
        self._history_lock = threading.Lock()
        self._history_fh = open(history_path, "a", encoding="utf-8") if history_path else None
        self.feed = EventFeed()
        # bound by the kernel at boot; unit tests may leave these unset
        self._registry = None
        self._bus = None
        self._scheduler = None
        self._mode_getter = None

    def bind(self, registry=None, bus=None, scheduler=None, mode_getter=None) -> None:
        self._registry = registry
        self._bus = bus
        self._scheduler = scheduler
        self._mode_getter = mode_getter

    # -- recording ----------------------------------------------------------

    def record_sample(self, sample: MetricSample) -> None:
        sample.validate()
        self._samples.append(sample)
        self._persist("sample", {"at": sample.at, "module_id": sample.module_id,
                                 "instance_id": sample.instance_id,
                                 "metric": sample.metric.value, "value": sample.value})

    def record_io(self, record: IoRecord) -> None:
        self._ios.append(record)
        self._persist("io", {"at": record.at, "instance_id": record.instance_id,
                             "request_id": record.request_id,
                             "input_digest": record.input_digest,
                             "output_status": record.output_status,
                             "output_digest": record.output_digest,
                             "error": record.error})

    def append_log(self, level: Level, source: str, message: str,
                   request_id: Optional[str] = None, at: Optional[float] = None) -> None:
        rec = LogRecord(at=time.time() if at is None else at, level=level,
                        source=source, message=message, request_id=request_id)
        self._logs.append(rec)
        self._persist("log", {"at": rec.at, "level": rec.level.value, "source": rec.source,
                              "message": rec.message, "request_id": rec.request_id})

    def _persist(self, kind: str, obj: dict) -> None:
        if self._history_fh is None:
            return
        line = json.dumps({"type": kind, **obj}, separators=(",", ":"))
        with self._history_lock:
            self._history_fh.write(line + "\n")

    def flush(self) -> None:
        if self._history_fh is not None:
            with self._history_lock:
                self._history_fh.flush()

    def close(self) -> None:
        if self._history_fh is not None:
            with self._history_lock:
                self._history_fh.flush()
                self._history_fh.close()
                self._history_fh = None

    def drop_counts(self) -> dict:
        return {"samples": self._samples.dropped, "ios": self._ios.dropped,
                "logs": self._logs.dropped}

    # -- alert rules ----------------------------------------------------------

    def put_rule(self, rule: AlertRule) -> None:
        rule.validate()
        with self._rules_lock:
            self._rules[rule.rule_id] = rule
            self._breached.setdefault(rule.rule_id, False)

    def delete_rule(self, rule_id: str) -> None:
        with self._rules_lock:
            self._rules.pop(rule_id, None)
            self._breached.pop(rule_id, None)

    def rules(self) -> list[AlertRule]:
        with self._rules_lock:
            return list(self._rules.values())

    def alert_states(self) -> dict[str, bool]:
        with self._rules_lock:
            return dict(self._breached)

    def _window_values(self, metric: Metric, target: str, since: float,
                       until: Optional[float] = None) -> list[float]:
        out = []
        for s in self._samples.view():
            if s.metric is metric and s.at >= since and (until is None or s.at <= until) \
                    and (target == "*" or s.module_id == target or s.instance_id == target):
                out.append(s.value)
        return out

    @staticmethod
    def _aggregate(values: list[float], agg: Aggregation, window_s: float) -> Optional[float]:
        if agg is Aggregation.Rate:
            return len(values) / window_s
        if not values:
            return None
        if agg is Aggregation.Mean:
            return sum(values) / len(values)
        if agg is Aggregation.Max:
            return max(values)
        return nearest_rank(sorted(values), 95.0)

    def evaluate_alerts(self, now: Optional[float] = None) -> list[AlertEvent]:
        """Edge-triggered: one event per continuous breach episode."""
        now = time.time() if now is None else now
        events = []
        with self._rules_lock:
            rules = list(self._rules.values())
        for rule in rules:
            values = self._window_values(rule.metric, rule.target, now - rule.window_s, now)
            value = self._aggregate(values, rule.aggregation, rule.window_s)
            if value is None:
                breached = False
            elif rule.direction is Direction.Above:
                breached = value > rule.threshold
            else:
                breached = value < rule.threshold
            with self._rules_lock:
                was = self._breached.get(rule.rule_id, False)
                self._breached[rule.rule_id] = breached
            if breached and not was:
                event = AlertEvent(rule.rule_id, now, value, rule.threshold,
                                   rule.direction, rule.target)
                events.append(event)
                self.append_log(Level.Warn, "monitor",
                                f"alert {rule.rule_id}: {rule.metric.value} "
                                f"{rule.aggregation.value}={value:.1f} "
                                f"{rule.direction.value.lower()} {rule.threshold}")
                self.feed.append("alert", event.to_json())
                if self._bus is not None:
                    self._bus.publish("alerts", json.dumps(event.to_json()).encode())
        return events

    # -- history queries ---------------------------------------------------------

    def query_history(self, metric, target: str, time_from: float, time_to: float,
                      aggregation: Aggregation) -> list[dict]:
        """Aggregate into fixed 1 s buckets. *metric* is a Metric, or the
        pseudo-metric "IoErrors" counting error I/O records."""
        if time_from > time_to:
            raise BadRange(f"from {time_from} > to {time_to}")
        if time_to - time_from > 86_400:
            raise BadRange("range wider than 86400 s")
        first, last = int(time_from), int(time_to)  # bucket = [n, n+1)
        buckets: dict[int, list[float]] = {}
        if metric == "IoErrors":
            for rec in self._ios.view():
                if first <= int(rec.at) <= last and rec.error \
                        and (target == "*" or rec.instance_id == target):
                    buckets.setdefault(int(rec.at), []).append(1.0)
        else:
            metric = Metric(metric) if isinstance(metric, str) else metric
            for s in self._samples.view():
                if s.metric is metric and first <= int(s.at) <= last \
                        and (target == "*" or s.module_id == target
                             or s.instance_id == target):
                    buckets.setdefault(int(s.at), []).append(s.value)
        series = []
        for start in range(first, last + 1):
            values = buckets.get(start, [])
            value = self._aggregate(values, aggregation, 1.0)
            series.append({"bucket": start, "value": value})
        return series

    # -- tracing ---------------------------------------------------------------

    def trace_request(self, request_id: str) -> list[dict]:
        events = []
        for rec in self._logs.view():
            if rec.request_id == request_id:
                events.append({"component": rec.source, "event": rec.message,
                               "at": rec.at, "error": rec.level is Level.Error})
        for rec in self._ios.view():
            if rec.request_id == request_id:
                events.append({"component": rec.instance_id,
                               "event": f"io status={rec.output_status}",
                               "at": rec.at, "error": rec.error})
        events.sort(key=lambda e: e["at"])
        return events

    # -- instance views used by MAPE-K -------------------------------------------

    def samples_for_instance(self, instance_id: str, metric: Metric,
                             limit: Optional[int] = None) -> list[MetricSample]:
        out = [s for s in self._samples.view()
               if s.instance_id == instance_id and s.metric is metric]
        return out[-limit:] if limit else out

    def io_for_instance(self, instance_id: str, since: float) -> list[IoRecord]:
        return [r for r in self._ios.view()
                if r.instance_id == instance_id and r.at >= since]

    def io_count(self) -> int:
        return len(self._ios)

    def io_view(self) -> list[IoRecord]:
        return self._ios.view()

    def log_view(self) -> list[LogRecord]:
        return self._logs.view()

    # -- snapshot -----------------------------------------------------------------

    def snapshot(self) -> dict:
        now = time.time()
        since = now - self._window_s
        modules: dict[str, dict] = {}
        if self._registry is not None:
            for module_id in self._registry.module_ids():
                descriptor, instances = self._registry.lookup(module_id)
                states: dict[str, int] = {}
                for inst in instances:
                    states[inst.state.value] = states.get(inst.state.value, 0) + 1
                latencies = sorted(self._window_values(Metric.LatencyUs, module_id, since))
                ios = [r for r in self._ios.view() if r.at >= since
                       and any(r.instance_id == i.instance_id for i in instances)]
                errors = sum(1 for r in ios if r.error)
                modules[module_id] = {
                    "name": descriptor.name,
                    "version": descriptor.version,
                    "paradigm": descriptor.paradigm.value,
                    "demand_loaded": descriptor.demand_loaded,
                    "resident": self._registry.is_resident(module_id),
                    "states": states,
                    "instances": [i.to_json() for i in instances],
                    "p50_latency_us": nearest_rank(latencies, 50.0) if latencies else None,
                    "p95_latency_us": nearest_rank(latencies, 95.0) if latencies else None,
                    "throughput_rps": len(latencies) / self._window_s,
                    "error_rate": errors / len(ios) if ios else 0.0,
                    "restarts_total": self._registry.entry_stats(module_id)["restarts_total"],
                }
        queue_depths = {}
        if self._scheduler is not None:
            stats = self._scheduler.stats()
            queue_depths["scheduler_ready"] = stats["ready_depth"]
            queue_depths["scheduler_timers"] = stats["timer_depth"]
        if self._bus is not None:
            for topic, depth in self._bus.topic_depths().items():
                queue_depths[f"topic:{topic}"] = depth
        return {
            "at": now,
            "window_s": self._window_s,
            "modules": modules,
            "alerts": {"rules": [r.to_json() for r in self.rules()],
                       "states": self.alert_states()},
            "queue_depths": queue_depths,
            "mapek_mode": self._mode_getter() if self._mode_getter else "off",
            "drops": self.drop_counts(),
            "event_seq": self.feed.latest_seq,
        }
