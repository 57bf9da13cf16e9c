"""MAPE-K: analyze rules, knowledge-ranked planning, execution, learning."""

from __future__ import annotations

import time

import pytest

from conftest import fast_config, make_descriptor
from muk.errors import NoData, NoViableAction
from muk.handlers import FaultEchoHandler, register_handler
from muk.isc import Bus
from muk.mapek import (
    ActionKind,
    AdaptationPlan,
    HealingAction,
    KnowledgeBase,
    MapeK,
    ObservationWindow,
    Outcome,
    Symptom,
    SymptomClass,
)
from muk.monitor import Metric, MetricSample, Monitor, make_io_record
from muk.registry import InstanceState, Registry
from muk.services import ServiceManager

MB = 1024 * 1024


def build(mode="mapek", **overrides):
    registry = Registry()
    monitor = Monitor()
    config = fast_config(**overrides)
    services = ServiceManager(registry, monitor, config, mode_getter=lambda: mode)
    bus = Bus()
    mapek = MapeK(registry, monitor, services, bus, config, KnowledgeBase())
    return registry, monitor, services, bus, mapek


def window(instance_id="i-1", module_id="m", memory=(), latency=(),
           baseline=None, io_total=0, io_errors=0, restarts=0,
           quota=50 * MB) -> ObservationWindow:
    return ObservationWindow(
        instance_id=instance_id, module_id=module_id,
        memory_series=list(memory), latency_us=list(latency),
        baseline_latency_us=baseline, io_total=io_total, io_errors=io_errors,
        restarts_in_window=restarts, quota_memory_bytes=quota,
        consecutive_probe_failures=0)


def classes(symptoms):
    return [s.cls for s in symptoms]


# -- analyze rule arithmetic ---------------------------------------------------

def test_leak_rule_six_rising_samples_at_twenty_percent_quota():
    # 10,12,14,16,18,20 MB over 6 cycles with a 50 MB quota:
    # 5 consecutive increases, growth 10 MB = exactly 20% of quota
    *_, mapek = build()
    w = window(memory=[10 * MB, 12 * MB, 14 * MB, 16 * MB, 18 * MB, 20 * MB])
    assert classes(mapek.analyze(w)) == [SymptomClass.MemoryLeak]


def test_leak_rule_below_growth_threshold():
    *_, mapek = build()
    w = window(memory=[10 * MB, 11 * MB, 12 * MB, 13 * MB, 14 * MB, 15 * MB])
    assert mapek.analyze(w) == []  # growth 5 MB < 10 MB (20% of 50 MB)


def test_leak_rule_needs_five_consecutive_increases():
    *_, mapek = build()
    w = window(memory=[10 * MB, 12 * MB, 14 * MB, 16 * MB, 20 * MB])
    assert mapek.analyze(w) == []  # only 4 increases
    # a late dip restarts the increasing run from scratch
    w = window(memory=[10 * MB, 12 * MB, 14 * MB, 16 * MB, 18 * MB,
                       20 * MB, 9 * MB, 22 * MB])
    assert mapek.analyze(w) == []


def test_crashloop_rule_threshold():
    *_, mapek = build()
    assert mapek.analyze(window(restarts=2)) == []
    assert classes(mapek.analyze(window(restarts=3))) == [SymptomClass.CrashLoop]


def test_output_anomaly_rule():
    *_, mapek = build()
    # 3/20 = 15% > 10%
    assert classes(mapek.analyze(window(io_total=20, io_errors=3))) == \
        [SymptomClass.OutputAnomaly]
    # 2/20 = 10% is not strictly above the threshold
    assert mapek.analyze(window(io_total=20, io_errors=2)) == []
    # too few requests to judge
    assert mapek.analyze(window(io_total=19, io_errors=19)) == []


def test_latency_degradation_rule():
    *_, mapek = build()
    w = window(latency=[400.0] * 10, baseline=100.0)
    assert classes(mapek.analyze(w)) == [SymptomClass.LatencyDegradation]
    assert mapek.analyze(window(latency=[250.0] * 10, baseline=100.0)) == []
    assert mapek.analyze(window(latency=[400.0] * 10, baseline=None)) == []


# -- plan -----------------------------------------------------------------------

def symptom(cls=SymptomClass.MemoryLeak, instance_id="i-1", module_id="m"):
    return Symptom(instance_id, module_id, cls, ("evidence",), time.time())


def context(heals=("compact", "reset-state"), has_superseded=False, replicas=1,
            max_replicas=16, allow_restart=True):
    return {"heals": heals, "has_superseded": has_superseded,
            "replicas": replicas, "max_replicas": max_replicas,
            "allow_restart": allow_restart}


def test_plan_equal_scores_fall_back_to_default_order():
    *_, mapek = build()
    plan = mapek.plan(symptom(), KnowledgeBase(), context())
    assert plan.chosen.kind is ActionKind.HealHook
    assert plan.chosen.hook_name == "compact"
    assert [a.kind for a in plan.alternates] == [ActionKind.Restart]
    assert plan.chosen not in plan.alternates


def test_plan_prefers_higher_laplace_score():
    *_, mapek = build()
    kb = KnowledgeBase()
    kb.set(SymptomClass.MemoryLeak, ActionKind.HealHook, attempts=5, successes=1)
    kb.set(SymptomClass.MemoryLeak, ActionKind.Restart, attempts=5, successes=4)
    assert abs(kb.score(SymptomClass.MemoryLeak, ActionKind.HealHook) - 2 / 7) < 1e-9
    assert abs(kb.score(SymptomClass.MemoryLeak, ActionKind.Restart) - 5 / 7) < 1e-9
    plan = mapek.plan(symptom(), kb, context())
    assert plan.chosen.kind is ActionKind.Restart


def test_plan_crashloop_prefers_rollback_else_restart():
    *_, mapek = build()
    plan = mapek.plan(symptom(SymptomClass.CrashLoop), KnowledgeBase(),
                      context(has_superseded=True))
    assert plan.chosen.kind is ActionKind.RollbackVersion
    plan = mapek.plan(symptom(SymptomClass.CrashLoop), KnowledgeBase(),
                      context(has_superseded=False))
    assert plan.chosen.kind is ActionKind.Restart


def test_plan_no_viable_action():
    *_, mapek = build()
    with pytest.raises(NoViableAction):
        mapek.plan(symptom(SymptomClass.CrashLoop), KnowledgeBase(),
                   context(has_superseded=False, allow_restart=False))


def test_plan_latency_scale_out_capped_by_max_replicas():
    *_, mapek = build()
    plan = mapek.plan(symptom(SymptomClass.LatencyDegradation), KnowledgeBase(),
                      context(replicas=2))
    assert plan.chosen.kind is ActionKind.ScaleOut
    plan = mapek.plan(symptom(SymptomClass.LatencyDegradation), KnowledgeBase(),
                      context(replicas=16))
    assert plan.chosen.kind is ActionKind.Restart


def test_plan_is_deterministic_for_fixed_inputs():
    *_, mapek = build()
    kb = KnowledgeBase()
    kb.set(SymptomClass.OutputAnomaly, ActionKind.HealHook, 3, 2)
    s, c = symptom(SymptomClass.OutputAnomaly), context(has_superseded=True)
    first = mapek.plan(s, kb, c)
    second = mapek.plan(s, kb, c)
    assert (first.chosen, first.alternates, first.rationale) == \
        (second.chosen, second.alternates, second.rationale)


# -- learn --------------------------------------------------------------------------

def test_learn_counts_and_persistence_roundtrip(tmp_path):
    path = tmp_path / "kb.json"
    kb = KnowledgeBase(str(path))
    entry = kb.learn(SymptomClass.MemoryLeak, ActionKind.HealHook, Outcome.Resolved)
    assert (entry.attempts, entry.successes) == (1, 1)
    entry = kb.learn(SymptomClass.MemoryLeak, ActionKind.HealHook, Outcome.Unresolved)
    assert (entry.attempts, entry.successes) == (2, 1)
    reloaded = KnowledgeBase(str(path))
    assert reloaded.score(SymptomClass.MemoryLeak, ActionKind.HealHook) == \
        kb.score(SymptomClass.MemoryLeak, ActionKind.HealHook)


# -- observe + run_cycle integration ---------------------------------------------------

def start_faulty_module(registry, services, module_id="m", quota=20 * MB):
    descriptor = make_descriptor(module_id, artifact_ref="fault-echo",
                                 max_memory=quota)
    registry.register(descriptor)
    services.start_replicas(module_id)
    return registry.live_instances(module_id)[0]


def test_observe_new_instance_raises_nodata():
    registry, _, services, _, mapek = build()
    instance = start_faulty_module(registry, services)
    with pytest.raises(NoData):
        mapek.observe(instance)


def test_healthy_fleet_produces_empty_reports():
    registry, _, services, _, mapek = build()
    start_faulty_module(registry, services)
    services.sweep_probes()
    report = mapek.run_cycle()
    assert report.empty


def test_leak_is_healed_by_compact_and_does_not_recur():
    registry, monitor, services, bus, mapek = build()
    sub = bus.subscribe("mapek", "test")
    instance = start_faulty_module(registry, services, quota=20 * MB)
    services.inject_fault("m", {"kind": "Leak", "rate_bytes_per_cycle": 1 * MB})

    symptom_cycles = []
    for cycle in range(20):
        services.sweep_probes()
        report = mapek.run_cycle()
        if report.symptoms:
            symptom_cycles.append(cycle)

    actions = mapek.executed_actions()
    assert [a["action"] for a in actions] == ["HealHook(compact)"]
    # growth threshold 4 MB with 1 MB/cycle: symptom on the 6th probe, once
    assert len(symptom_cycles) == 1
    assert symptom_cycles[0] == 5
    # resolved after the grace window, learned as a success
    outcomes = [o for r in mapek.history(50) for o in r.outcomes]
    assert outcomes[-1]["outcome"] == "Resolved"
    assert mapek.kb.score(SymptomClass.MemoryLeak, ActionKind.HealHook) == 2 / 3
    assert instance.state is InstanceState.Ready
    assert sub.get(0.5) is not None  # cycle reports publish on the mapek topic


def test_failed_heal_escalates_to_restart_next_cycle():
    class StubbornLeak(FaultEchoHandler):
        def heal(self, name):
            return False  # the hook is declared but broken

    register_handler("stubborn", lambda m, v: StubbornLeak())
    registry, _, services, _, mapek = build()
    descriptor = make_descriptor("m", artifact_ref="stubborn", max_memory=20 * MB)
    registry.register(descriptor)
    services.start_replicas("m")
    services.inject_fault("m", {"kind": "Leak", "rate_bytes_per_cycle": 1 * MB})

    first_instance = registry.live_instances("m")[0]
    labels = []
    for cycle in range(12):
        services.sweep_probes()
        mapek.run_cycle()
        # attempted actions, applied or not: the failed hook then escalation
        labels = [a["action"] for r in mapek.history(50) for a in r.actions]
        if "Restart" in labels:
            break
    assert labels[:2] == ["HealHook(compact)", "Restart"]
    applied = [a["action"] for a in mapek.executed_actions()]
    assert applied == ["Restart"]  # the failed hook never counts as executed
    replacement = registry.live_instances("m")[0]
    assert replacement.instance_id != first_instance.instance_id
    assert mapek.kb.to_json()["MemoryLeak/HealHook"]["successes"] == 0


def test_severity_order_acts_on_output_anomaly_before_leak():
    registry, monitor, services, _, mapek = build()
    instance = start_faulty_module(registry, services, quota=20 * MB)
    now = time.time()
    for i in range(7):
        monitor.record_sample(MetricSample(
            at=now - 7 + i, module_id="m", instance_id=instance.instance_id,
            metric=Metric.MemoryBytes, value=float((5 + i) * MB)))
    for i in range(20):
        monitor.record_io(make_io_record(
            now - 1, instance.instance_id, f"r{i}", "GET", "/m", b"",
            500 if i < 5 else 200, b""))
    report = mapek.run_cycle()
    assert {s.cls for s in report.symptoms} == \
        {SymptomClass.MemoryLeak, SymptomClass.OutputAnomaly}
    assert len(report.actions) == 1  # one action per instance per cycle
    assert report.actions[0]["action"] == "HealHook(reset-state)"
    assert report.actions[0]["class"] == "OutputAnomaly"
