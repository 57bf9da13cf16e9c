"""MAPE-K loop over execution environments.

Each cycle: observe every selectable instance (resource consumption plus
request inputs/outputs), analyze against rule thresholds, plan a healing
action ranked by knowledge scores, execute through the service manager or
the module's own heal hooks, and learn from the outcome. At most one
action per instance per cycle; an executed action opens a grace watch and
is judged Resolved only if its symptom stays absent throughout.

Knowledge scores use Laplace smoothing, (successes+1)/(attempts+2), so
untried actions rank neutrally at 0.5 and ties fall back to the per-class
default action order.
"""

from __future__ import annotations

import json
import logging
import statistics
import threading
import time
import uuid
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .errors import ActionFailed, NoData, NoViableAction
from .monitor import Level, Metric, nearest_rank
from .registry import SELECTABLE_STATES, ServiceInstance
from .services import DeploymentStatus

logger = logging.getLogger(__name__)


class SymptomClass(Enum):
    CrashLoop = "CrashLoop"
    LatencyDegradation = "LatencyDegradation"
    MemoryLeak = "MemoryLeak"
    OutputAnomaly = "OutputAnomaly"


# acted on first when one instance shows several symptoms at once
SEVERITY_ORDER = (SymptomClass.CrashLoop, SymptomClass.OutputAnomaly,
                  SymptomClass.MemoryLeak, SymptomClass.LatencyDegradation)


class ActionKind(Enum):
    Restart = "Restart"
    ReloadConfig = "ReloadConfig"
    HealHook = "HealHook"
    RollbackVersion = "RollbackVersion"
    ScaleOut = "ScaleOut"


class Outcome(Enum):
    Resolved = "Resolved"
    Unresolved = "Unresolved"
    ActionFailed = "ActionFailed"


@dataclass(frozen=True)
class HealingAction:
    kind: ActionKind
    target: str
    hook_name: str = ""

    def label(self) -> str:
        if self.kind is ActionKind.HealHook:
            return f"HealHook({self.hook_name})"
        return self.kind.value

    def to_json(self) -> dict:
        return {"kind": self.kind.value, "target": self.target,
                "hook_name": self.hook_name}


@dataclass(frozen=True)
class Symptom:
    instance_id: str
    module_id: str
    cls: SymptomClass
    evidence: tuple[str, ...]
    detected_at: float

    def to_json(self) -> dict:
        return {"instance_id": self.instance_id, "module_id": self.module_id,
                "class": self.cls.value, "evidence": list(self.evidence),
                "detected_at": self.detected_at}


@dataclass
class AdaptationPlan:
    plan_id: str
    symptom: Symptom
    chosen: HealingAction
    alternates: tuple[HealingAction, ...]
    rationale: str
    created_at: float

    def to_json(self) -> dict:
        return {"plan_id": self.plan_id, "symptom": self.symptom.to_json(),
                "chosen": self.chosen.to_json(),
                "alternates": [a.to_json() for a in self.alternates],
                "rationale": self.rationale, "created_at": self.created_at}


@dataclass
class KnowledgeEntry:
    symptom_class: str
    action_kind: str
    attempts: int = 0
    successes: int = 0
    last_outcome_at: float = 0.0

    def score(self) -> float:
        return (self.successes + 1) / (self.attempts + 2)


class KnowledgeBase:
    """Per (symptom class, action kind) success statistics, JSON-persisted."""

    def __init__(self, path: Optional[str] = None):
        self._path = path
        self._entries: dict[str, KnowledgeEntry] = {}
        self._lock = threading.Lock()
        if path:
            self._load(path)

    @staticmethod
    def _key(symptom_class: SymptomClass, action_kind: ActionKind) -> str:
        return f"{symptom_class.value}/{action_kind.value}"

    def _load(self, path: str) -> None:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            return
        for key, data in raw.items():
            cls_name, kind_name = key.split("/", 1)
            self._entries[key] = KnowledgeEntry(
                symptom_class=cls_name, action_kind=kind_name,
                attempts=data["attempts"], successes=data["successes"],
                last_outcome_at=data.get("last_outcome_at", 0.0))

    def persist(self) -> None:
        if not self._path:
            return
        with self._lock:
            payload = {key: {"attempts": e.attempts, "successes": e.successes,
                             "last_outcome_at": e.last_outcome_at}
                       for key, e in self._entries.items()}
        with open(self._path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)

    def score(self, symptom_class: SymptomClass, action_kind: ActionKind) -> float:
        with self._lock:
            entry = self._entries.get(self._key(symptom_class, action_kind))
            return entry.score() if entry else 0.5

    def learn(self, symptom_class: SymptomClass, action_kind: ActionKind,
              outcome: Outcome) -> KnowledgeEntry:
        key = self._key(symptom_class, action_kind)
        with self._lock:
            entry = self._entries.get(key)
            if entry is None:
                entry = self._entries[key] = KnowledgeEntry(
                    symptom_class.value, action_kind.value)
            entry.attempts += 1
            if outcome is Outcome.Resolved:
                entry.successes += 1
            entry.last_outcome_at = time.time()
        self.persist()
        return entry

    def to_json(self) -> dict:
        with self._lock:
            return {key: {"attempts": e.attempts, "successes": e.successes,
                          "score": e.score()}
                    for key, e in self._entries.items()}

    def set(self, symptom_class: SymptomClass, action_kind: ActionKind,
            attempts: int, successes: int) -> None:
        key = self._key(symptom_class, action_kind)
        with self._lock:
            self._entries[key] = KnowledgeEntry(symptom_class.value,
                                                action_kind.value,
                                                attempts, successes, time.time())


@dataclass
class ObservationWindow:
    instance_id: str
    module_id: str
    memory_series: list[float]
    latency_us: list[float]
    baseline_latency_us: Optional[float]
    io_total: int
    io_errors: int
    restarts_in_window: int
    quota_memory_bytes: int
    consecutive_probe_failures: int


@dataclass
class _Watch:
    plan: AdaptationPlan
    action: HealingAction
    module_scope: bool
    instance_id: str
    module_id: str
    until_cycle: int


@dataclass
class CycleReport:
    cycle: int
    at: float
    symptoms: list[Symptom] = field(default_factory=list)
    plans: list[AdaptationPlan] = field(default_factory=list)
    actions: list[dict] = field(default_factory=list)
    outcomes: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"cycle": self.cycle, "at": self.at,
                "symptoms": [s.to_json() for s in self.symptoms],
                "plans": [p.to_json() for p in self.plans],
                "actions": self.actions, "outcomes": self.outcomes}

    @property
    def empty(self) -> bool:
        return not (self.symptoms or self.plans or self.actions or self.outcomes)


class MapeK:
    def __init__(self, registry, monitor, services, bus, config,
                 knowledge: Optional[KnowledgeBase] = None):
        self._registry = registry
        self._monitor = monitor
        self._services = services
        self._bus = bus
        self._config = config
        self.kb = knowledge or KnowledgeBase(config.knowledge_path)
        self._cycle = 0
        self._baselines: dict[str, float] = {}  # instance -> median of first N latencies
        self._watches: dict[tuple[str, str], _Watch] = {}  # (scope key, class)
        self._escalation: dict[tuple[str, str], dict] = {}
        self._history: deque[CycleReport] = deque(maxlen=config.mapek_cycle_history)
        self._lock = threading.Lock()

    # -- M: observe ----------------------------------------------------------

    def observe(self, instance: ServiceInstance) -> ObservationWindow:
        memory = [s.value for s in self._monitor.samples_for_instance(
            instance.instance_id, Metric.MemoryBytes, limit=64)]
        latency_all = self._monitor.samples_for_instance(
            instance.instance_id, Metric.LatencyUs)
        now = time.time()
        window = [s.value for s in latency_all if s.at >= now - self._config.snapshot_window_s]
        baseline = self._baselines.get(instance.instance_id)
        if baseline is None and len(latency_all) >= self._config.mapek_latency_baseline_samples:
            first = [s.value for s in
                     latency_all[:self._config.mapek_latency_baseline_samples]]
            baseline = statistics.median(first)
            self._baselines[instance.instance_id] = baseline
        ios = self._monitor.io_for_instance(
            instance.instance_id, now - self._config.snapshot_window_s)
        descriptor = self._registry.descriptor(instance.module_id)
        if not memory and not window and not ios:
            raise NoData(f"no observations yet for {instance.instance_id}")
        return ObservationWindow(
            instance_id=instance.instance_id,
            module_id=instance.module_id,
            memory_series=memory,
            latency_us=window,
            baseline_latency_us=baseline,
            io_total=len(ios),
            io_errors=sum(1 for r in ios if r.error),
            restarts_in_window=self._services.restarts_within(
                instance.module_id, self._config.mapek_crashloop_window_s),
            quota_memory_bytes=descriptor.quota.max_memory_bytes,
            consecutive_probe_failures=instance.consecutive_failures,
        )

    # -- A: analyze -------------------------------------------------------------

    def analyze(self, window: ObservationWindow) -> list[Symptom]:
        cfg = self._config
        now = time.time()
        symptoms = []

        if window.restarts_in_window >= cfg.mapek_crashloop_restarts:
            symptoms.append(Symptom(
                window.instance_id, window.module_id, SymptomClass.CrashLoop,
                (f"{window.restarts_in_window} restarts within "
                 f"{cfg.mapek_crashloop_window_s:.0f}s",), now))

        leak = self._leak_evidence(window.memory_series, window.quota_memory_bytes)
        if leak:
            symptoms.append(Symptom(window.instance_id, window.module_id,
                                    SymptomClass.MemoryLeak, (leak,), now))

        if window.baseline_latency_us and window.latency_us:
            p95 = nearest_rank(sorted(window.latency_us), 95.0)
            if p95 > cfg.mapek_latency_factor * window.baseline_latency_us:
                symptoms.append(Symptom(
                    window.instance_id, window.module_id,
                    SymptomClass.LatencyDegradation,
                    (f"window P95 {p95:.0f}us > {cfg.mapek_latency_factor}x "
                     f"baseline {window.baseline_latency_us:.0f}us",), now))

        if window.io_total >= cfg.mapek_error_min_requests:
            rate = window.io_errors / window.io_total
            if rate > cfg.mapek_error_rate:
                symptoms.append(Symptom(
                    window.instance_id, window.module_id, SymptomClass.OutputAnomaly,
                    (f"error rate {window.io_errors}/{window.io_total} "
                     f"= {rate:.0%} > {cfg.mapek_error_rate:.0%}",), now))

        return symptoms

    def _leak_evidence(self, series: list[float], quota: int) -> Optional[str]:
        """Maximal strictly-increasing suffix: enough consecutive increases
        with total growth past the configured fraction of the memory quota."""
        if len(series) < 2:
            return None
        start = len(series) - 1
        while start > 0 and series[start - 1] < series[start]:
            start -= 1
        increases = len(series) - 1 - start
        growth = series[-1] - series[start]
        threshold = self._config.mapek_leak_growth_fraction * quota
        if increases >= self._config.mapek_leak_min_increases and growth >= threshold:
            return (f"memory rose {increases} consecutive cycles, "
                    f"+{growth:.0f}B >= {threshold:.0f}B "
                    f"({self._config.mapek_leak_growth_fraction:.0%} of quota)")
        return None

    # -- P: plan ---------------------------------------------------------------------

    def plan_context(self, symptom: Symptom) -> dict:
        descriptor = self._registry.descriptor(symptom.module_id)
        instances = self._registry.live_instances(symptom.module_id)
        instance = next((i for i in instances
                         if i.instance_id == symptom.instance_id), None)
        has_superseded = any(
            d.status is DeploymentStatus.Superseded
            for d in self._services.deployments(symptom.module_id))
        return {
            "heals": tuple(instance.heals) if instance else (),
            "has_superseded": has_superseded,
            "replicas": len([i for i in instances if i.state in SELECTABLE_STATES]),
            "max_replicas": self._config.max_replicas,
            "allow_restart": self._config.mapek_allow_restart,
        }

    def plan(self, symptom: Symptom, kb: KnowledgeBase, context: dict) -> AdaptationPlan:
        candidates = self._candidates(symptom, context)
        if not candidates:
            raise NoViableAction(f"no applicable action for {symptom.cls.value} "
                                 f"on {symptom.instance_id}")
        scored = sorted(candidates,
                        key=lambda a: -kb.score(symptom.cls, a.kind))  # stable: ties keep default order
        chosen, alternates = scored[0], tuple(scored[1:])
        rationale = "; ".join(
            f"{a.label()} score={kb.score(symptom.cls, a.kind):.3f}" for a in scored)
        return AdaptationPlan(
            plan_id=uuid.uuid4().hex[:12], symptom=symptom, chosen=chosen,
            alternates=alternates, rationale=rationale, created_at=time.time())

    def _candidates(self, symptom: Symptom, context: dict) -> list[HealingAction]:
        cls = symptom.cls
        instance_target = symptom.instance_id
        module_target = symptom.module_id
        out: list[HealingAction] = []
        if cls is SymptomClass.CrashLoop:
            if context["has_superseded"]:
                out.append(HealingAction(ActionKind.RollbackVersion, module_target))
            elif context["allow_restart"]:
                out.append(HealingAction(ActionKind.Restart, instance_target))
        elif cls is SymptomClass.MemoryLeak:
            if "compact" in context["heals"]:
                out.append(HealingAction(ActionKind.HealHook, instance_target, "compact"))
            if context["allow_restart"]:
                out.append(HealingAction(ActionKind.Restart, instance_target))
        elif cls is SymptomClass.LatencyDegradation:
            if context["replicas"] < context["max_replicas"]:
                out.append(HealingAction(ActionKind.ScaleOut, module_target))
            if context["allow_restart"]:
                out.append(HealingAction(ActionKind.Restart, instance_target))
        elif cls is SymptomClass.OutputAnomaly:
            if "reset-state" in context["heals"]:
                out.append(HealingAction(ActionKind.HealHook, instance_target,
                                         "reset-state"))
            if context["has_superseded"]:
                out.append(HealingAction(ActionKind.RollbackVersion, module_target))
            if context["allow_restart"]:
                out.append(HealingAction(ActionKind.Restart, instance_target))
        return out

    # -- E: execute --------------------------------------------------------------------

    def apply_action(self, action: HealingAction, instance: ServiceInstance) -> None:
        if action.kind is ActionKind.HealHook:
            ok = instance.endpoint.heal(action.hook_name,
                                        self._config.probe_timeout_s)
            if not ok:
                raise ActionFailed(f"heal hook {action.hook_name!r} replied HealFail")
        elif action.kind is ActionKind.ReloadConfig:
            ok = instance.endpoint.heal("reload-config", self._config.probe_timeout_s)
            if not ok:
                raise ActionFailed("reload-config hook replied HealFail")
        elif action.kind is ActionKind.Restart:
            try:
                self._services.restart_instance(instance)
            except Exception as exc:
                raise ActionFailed(f"restart failed: {exc}") from exc
        elif action.kind is ActionKind.RollbackVersion:
            try:
                self._services.rollback(instance.module_id)
            except Exception as exc:
                raise ActionFailed(f"rollback failed: {exc}") from exc
        elif action.kind is ActionKind.ScaleOut:
            try:
                replicas = len([i for i in
                                self._registry.live_instances(instance.module_id)
                                if i.state in SELECTABLE_STATES])
                self._services.scale(instance.module_id, replicas + 1)
            except Exception as exc:
                raise ActionFailed(f"scale-out failed: {exc}") from exc

    def execute_plan(self, plan: AdaptationPlan,
                     instance: ServiceInstance) -> Outcome:
        """Apply the chosen action and open the grace watch. The Resolved/
        Unresolved verdict lands in a later cycle when the watch closes."""
        try:
            self.apply_action(plan.chosen, instance)
        except ActionFailed as exc:
            self.kb.learn(plan.symptom.cls, plan.chosen.kind, Outcome.ActionFailed)
            self._advance_escalation(plan, reason=str(exc))
            raise
        module_scope = plan.chosen.kind in (
            ActionKind.Restart, ActionKind.RollbackVersion, ActionKind.ScaleOut)
        key = ((plan.symptom.module_id if module_scope else plan.symptom.instance_id),
               plan.symptom.cls.value)
        self._watches[key] = _Watch(
            plan=plan, action=plan.chosen, module_scope=module_scope,
            instance_id=plan.symptom.instance_id,
            module_id=plan.symptom.module_id,
            until_cycle=self._cycle + self._config.mapek_grace_cycles)
        return Outcome.Resolved  # provisional; the watch may overturn it

    def _advance_escalation(self, plan: AdaptationPlan, reason: str) -> None:
        key = (plan.symptom.instance_id, plan.symptom.cls.value)
        ordered = [plan.chosen, *plan.alternates]
        state = self._escalation.get(key)
        if state is None or state["actions"] != ordered:
            state = {"actions": ordered, "index": 0}
        state["index"] += 1
        state["reason"] = reason
        self._escalation[key] = state

    # -- K: learn -------------------------------------------------------------------------

    def learn(self, symptom_class: SymptomClass, action_kind: ActionKind,
              outcome: Outcome) -> KnowledgeEntry:
        return self.kb.learn(symptom_class, action_kind, outcome)

    # -- the loop ----------------------------------------------------------------------------

    def run_cycle(self, now: Optional[float] = None) -> CycleReport:
        with self._lock:
            self._cycle += 1
            report = CycleReport(cycle=self._cycle, at=now or time.time())
            instances = [i for i in self._registry.all_live_instances()
                         if i.state in SELECTABLE_STATES]
            symptoms_by_instance: dict[str, list[Symptom]] = {}
            for instance in instances:
                try:
                    window = self.observe(instance)
                except NoData:
                    continue
                except Exception as exc:
                    logger.debug("observe %s failed: %s", instance.instance_id, exc)
                    continue
                found = self.analyze(window)
                symptoms_by_instance[instance.instance_id] = found
                report.symptoms.extend(found)

            self._close_watches(report, instances, symptoms_by_instance)

            for instance in instances:
                if instance.state not in SELECTABLE_STATES:
                    continue  # replaced earlier in this same cycle
                if self._watched(instance):
                    continue  # stability: no new action while a watch is open
                found = symptoms_by_instance.get(instance.instance_id, [])
                if not found:
                    continue
                found.sort(key=lambda s: SEVERITY_ORDER.index(s.cls))
                symptom = found[0]
                self._act_on(symptom, instance, report)

            if not report.empty:
                payload = json.dumps(report.to_json()).encode()
                self._bus.publish("mapek", payload)
                self._monitor.feed.append("mapek", report.to_json())
                self._monitor.append_log(
                    Level.Info, "mapek",
                    f"cycle {report.cycle}: {len(report.symptoms)} symptoms, "
                    f"{len(report.actions)} actions")
            self._history.append(report)
            return report

    def _watched(self, instance: ServiceInstance) -> bool:
        for (scope, _cls), watch in self._watches.items():
            if scope == instance.instance_id or \
                    (watch.module_scope and scope == instance.module_id):
                return True
        return False

    def _close_watches(self, report: CycleReport, instances,
                       symptoms_by_instance: dict[str, list[Symptom]]) -> None:
        live_ids = {i.instance_id for i in instances}
        live_modules = {i.module_id for i in instances}
        for key in list(self._watches):
            watch = self._watches[key]
            cls = watch.plan.symptom.cls
            if watch.module_scope:
                recurred = any(s.cls is cls
                               for found in symptoms_by_instance.values()
                               for s in found
                               if s.module_id == watch.module_id)
                gone = watch.module_id not in live_modules
            else:
                recurred = any(s.cls is cls for s in
                               symptoms_by_instance.get(watch.instance_id, []))
                gone = watch.instance_id not in live_ids
            if gone:
                del self._watches[key]  # target vanished: nothing to learn from
                continue
            if recurred:
                del self._watches[key]
                self.kb.learn(cls, watch.action.kind, Outcome.Unresolved)
                self._advance_escalation(watch.plan, reason="symptom recurred")
                report.outcomes.append({
                    "instance_id": watch.instance_id, "module_id": watch.module_id,
                    "class": cls.value, "action": watch.action.label(),
                    "outcome": Outcome.Unresolved.value})
            elif self._cycle >= watch.until_cycle:
                del self._watches[key]
                self.kb.learn(cls, watch.action.kind, Outcome.Resolved)
                self._escalation.pop((watch.instance_id, cls.value), None)
                report.outcomes.append({
                    "instance_id": watch.instance_id, "module_id": watch.module_id,
                    "class": cls.value, "action": watch.action.label(),
                    "outcome": Outcome.Resolved.value})

    def _act_on(self, symptom: Symptom, instance: ServiceInstance,
                report: CycleReport) -> None:
        esc_key = (symptom.instance_id, symptom.cls.value)
        state = self._escalation.get(esc_key)
        try:
            if state is not None and state["index"] < len(state["actions"]):
                action = state["actions"][state["index"]]
                plan = AdaptationPlan(
                    plan_id=uuid.uuid4().hex[:12], symptom=symptom, chosen=action,
                    alternates=tuple(a for a in state["actions"] if a != action),
                    rationale=f"escalation after: {state.get('reason', 'failure')}",
                    created_at=time.time())
            else:
                if state is not None:  # alternates exhausted: plan afresh
                    self._escalation.pop(esc_key, None)
                plan = self.plan(symptom, self.kb, self.plan_context(symptom))
        except NoViableAction as exc:
            self._monitor.append_log(Level.Warn, "mapek", str(exc))
            return
        report.plans.append(plan)
        entry = {"instance_id": symptom.instance_id, "module_id": symptom.module_id,
                 "class": symptom.cls.value, "action": plan.chosen.label()}
        try:
            self.execute_plan(plan, instance)
            entry["applied"] = True
        except ActionFailed as exc:
            entry["applied"] = False
            entry["error"] = str(exc)
            report.outcomes.append({
                "instance_id": symptom.instance_id, "module_id": symptom.module_id,
                "class": symptom.cls.value, "action": plan.chosen.label(),
                "outcome": Outcome.ActionFailed.value, "error": str(exc)})
        report.actions.append(entry)

    # -- introspection ----------------------------------------------------------------------

    def history(self, last: int = 50) -> list[CycleReport]:
        return list(self._history)[-last:]

    @property
    def cycle_count(self) -> int:
        return self._cycle

    def executed_actions(self) -> list[dict]:
        """Applied actions across all recorded cycles, oldest first."""
        return [a for r in self._history for a in r.actions if a.get("applied")]
