"""Service manager: deployments, scaling, probing, demand load, recovery."""

from __future__ import annotations

import threading
import time

import pytest

from conftest import fast_config, make_descriptor, subprocess_echo_descriptor
from muk.dispatcher import Dispatcher, Request
from muk.errors import (
    AboveMax,
    InvalidReplicas,
    NothingToRollBackTo,
    StartFailure,
    StartTimeout,
    UnsupportedFault,
    VersionNotNewer,
)
from muk.monitor import Metric, Monitor
from muk.paradigms import child_artifact
from muk.registry import InstanceState, Paradigm, Registry
from muk.services import DeploymentStatus, ProbeOutcome, ServiceManager


def build(mode="baseline", **config_overrides):
    registry = Registry()
    monitor = Monitor()
    config = fast_config(**config_overrides)
    services = ServiceManager(registry, monitor, config, mode_getter=lambda: mode)
    dispatcher = Dispatcher(registry, monitor, config, services)
    return registry, monitor, services, dispatcher


def register_and_start(registry, services, descriptor):
    registry.register(descriptor)
    services.start_replicas(descriptor.module_id)


# -- deploy / rollback -------------------------------------------------------

def test_deploy_v2_supersedes_v1():
    registry, _, services, _ = build()
    register_and_start(registry, services,
                       make_descriptor("m", artifact_ref="version-echo"))
    services.deploy("m", "2.0.0", "version-echo")
    history = services.deployments("m")
    assert [(d.version, d.status) for d in history] == [
        ("1.0.0", DeploymentStatus.Superseded),
        ("2.0.0", DeploymentStatus.Active),
    ]
    assert registry.descriptor("m").version == "2.0.0"


def test_deploy_same_version_rejected():
    registry, _, services, _ = build()
    register_and_start(registry, services,
                       make_descriptor("m", artifact_ref="version-echo"))
    with pytest.raises(VersionNotNewer):
        services.deploy("m", "1.0.0", "version-echo")


def test_failed_start_keeps_old_version_active():
    registry, _, services, _ = build()
    register_and_start(registry, services,
                       make_descriptor("m", artifact_ref="version-echo"))
    with pytest.raises(StartFailure):
        services.deploy("m", "2.0.0", "no-such-handler")
    active = services.active_deployment("m")
    assert active.version == "1.0.0"
    assert [i.version for i in registry.live_instances("m")] == ["1.0.0"]


def test_failed_subprocess_start_keeps_old_active():
    registry, _, services, _ = build(hello_timeout_s=1.0)
    register_and_start(registry, services, subprocess_echo_descriptor("m"))
    with pytest.raises(StartFailure):
        services.deploy("m", "2.0.0", child_artifact("echo", "--exit-immediately"))
    assert services.active_deployment("m").version == "1.0.0"
    assert len(registry.live_instances("m")) == 1


def test_rollback_serves_previous_version():
    registry, _, services, dispatcher = build()
    register_and_start(registry, services,
                       make_descriptor("m", artifact_ref="version-echo"))
    services.deploy("m", "2.0.0", "version-echo")
    assert dispatcher.dispatch(Request(method="GET", path="/m")).body == b"2.0.0"
    services.rollback("m")
    history = services.deployments("m")
    assert [(d.version, d.status) for d in history] == [
        ("1.0.0", DeploymentStatus.Superseded),
        ("2.0.0", DeploymentStatus.RolledBack),
        ("1.0.0", DeploymentStatus.Active),
    ]
    assert dispatcher.dispatch(Request(method="GET", path="/m")).body == b"1.0.0"


def test_rollback_without_history():
    registry, _, services, _ = build()
    register_and_start(registry, services, make_descriptor("m"))
    with pytest.raises(NothingToRollBackTo):
        services.rollback("m")


def test_single_active_deployment_under_concurrent_deploys():
    registry, _, services, _ = build()
    register_and_start(registry, services,
                       make_descriptor("m", artifact_ref="version-echo"))
    errors = []
    stop = threading.Event()
    violations = []

    def watcher():
        while not stop.is_set():
            active = [d for d in services.deployments("m")
                      if d.status is DeploymentStatus.Active]
            if len(active) != 1:
                violations.append(len(active))

    def deployer(version):
        try:
            services.deploy("m", version, "version-echo")
        except VersionNotNewer:
            errors.append(version)

    watch = threading.Thread(target=watcher)
    watch.start()
    threads = [threading.Thread(target=deployer, args=(f"{n}.0.0",))
               for n in range(2, 6)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    stop.set()
    watch.join()
    assert violations == []
    assert services.active_deployment("m").version == "5.0.0"


# -- scale --------------------------------------------------------------------

def test_scale_up_and_down():
    registry, _, services, _ = build()
    register_and_start(registry, services, make_descriptor("m"))
    services.scale("m", 3)
    assert len(registry.live_instances("m")) == 3
    services.scale("m", 1)
    live = registry.live_instances("m")
    assert len(live) == 1
    assert all(i.state is InstanceState.Ready for i in live)
    assert registry.descriptor("m").replicas_desired == 1


def test_scale_bounds():
    registry, _, services, _ = build()
    register_and_start(registry, services, make_descriptor("m"))
    with pytest.raises(InvalidReplicas):
        services.scale("m", 0)
    with pytest.raises(AboveMax):
        services.scale("m", 17)


# -- probing ---------------------------------------------------------------------

def test_probe_healthy_subprocess_reports_memory():
    registry, monitor, services, _ = build()
    register_and_start(registry, services, subprocess_echo_descriptor("m"))
    instance = registry.live_instances("m")[0]
    report = services.probe_once(instance)
    assert report.outcome is ProbeOutcome.Ok
    assert report.memory_bytes_selfreport > 0
    samples = monitor.samples_for_instance(instance.instance_id, Metric.MemoryBytes)
    assert len(samples) == 1


def test_killed_subprocess_unhealthy_after_third_consecutive_fail():
    registry, _, services, _ = build()
    register_and_start(registry, services, subprocess_echo_descriptor("m"))
    instance = registry.live_instances("m")[0]
    instance.endpoint._proc.kill()
    time.sleep(0.2)
    outcomes = [services.probe_once(instance) for _ in range(3)]
    assert [r.consecutive_failures for r in outcomes] == [1, 2, 3]
    assert instance.state is InstanceState.Unhealthy


def test_probe_failure_counter_resets_on_ok():
    registry, _, services, _ = build()
    register_and_start(registry, services, make_descriptor("m"))
    instance = registry.live_instances("m")[0]
    flaky = {"fail": True}

    class FlakyEndpoint:
        heals = ()
        supports_faults = False

        def probe(self, timeout_s):
            if flaky["fail"]:
                raise ConnectionError("down")
            return 1000

        def invoke(self, req, timeout_s):
            return 200, {}, b""

        def heal(self, name, timeout_s):
            return False

        def set_fault(self, config, timeout_s):
            return False

        def alive(self):
            return True

        def terminate(self, grace_s):
            pass

    instance.endpoint = FlakyEndpoint()
    services.probe_once(instance)
    assert instance.consecutive_failures == 1
    flaky["fail"] = False
    services.probe_once(instance)
    assert instance.consecutive_failures == 0
    flaky["fail"] = True
    services.probe_once(instance)
    assert instance.consecutive_failures == 1
    assert instance.state is InstanceState.Ready


def test_memory_over_quota_marks_unhealthy():
    registry, _, services, _ = build()
    descriptor = subprocess_echo_descriptor("m", max_memory=5 * 1024 * 1024)
    register_and_start(registry, services, descriptor)
    instance = registry.live_instances("m")[0]
    # leak grows 2 MiB per probe on top of the 4 MiB synthetic base
    services.inject_fault("m", {"kind": "Leak",
                                "rate_bytes_per_cycle": 2 * 1024 * 1024})
    services.probe_once(instance)  # 6 MiB > 5 MiB quota
    assert instance.state is InstanceState.Unhealthy


# -- recovery -----------------------------------------------------------------------

def test_baseline_recover_replaces_and_tallies():
    registry, _, services, _ = build(mode="baseline")
    register_and_start(registry, services, subprocess_echo_descriptor("m"))
    instance = registry.live_instances("m")[0]
    instance.endpoint._proc.kill()
    time.sleep(0.2)
    for _ in range(3):
        services.probe_once(instance)
    replacement = services.baseline_recover(instance)
    assert replacement.instance_id != instance.instance_id
    assert replacement.restart_count == 1
    assert services.restarts_total("m") == 1
    assert instance.state is InstanceState.Stopped
    assert registry.live_instances("m") == [replacement]


def test_baseline_recover_rejects_healthy_instance():
    registry, _, services, _ = build(mode="baseline")
    register_and_start(registry, services, make_descriptor("m"))
    instance = registry.live_instances("m")[0]
    with pytest.raises(StartFailure):
        services.baseline_recover(instance)


def test_crash_loop_artifact_restarts_unbounded_under_baseline():
    registry, _, services, _ = build(mode="baseline")
    register_and_start(registry, services, subprocess_echo_descriptor("m"))
    services.inject_fault("m", {"kind": "CrashLoop"})
    restarts_seen = 0
    deadline = time.monotonic() + 20
    while restarts_seen < 3 and time.monotonic() < deadline:
        services.sweep_probes()
        restarts_seen = services.restarts_total("m")
        time.sleep(0.05)
    assert restarts_seen >= 3  # tally keeps growing: no diagnosis happens


def test_sweep_does_not_recover_in_off_mode():
    registry, _, services, _ = build(mode="off")
    register_and_start(registry, services, subprocess_echo_descriptor("m"))
    instance = registry.live_instances("m")[0]
    instance.endpoint._proc.kill()
    time.sleep(0.2)
    for _ in range(4):
        services.sweep_probes()
    assert instance.state is InstanceState.Unhealthy
    assert services.restarts_total("m") == 0


# -- demand loading ---------------------------------------------------------------------

def test_concurrent_ensure_loaded_single_start():
    registry, _, services, _ = build()
    registry.register(subprocess_echo_descriptor(
        "cold", demand_loaded=True, idle_ttl_s=30))
    services.start_replicas("cold")
    assert registry.live_instances("cold") == []

    results = []
    barrier = threading.Barrier(20, timeout=10)

    def loader():
        barrier.wait()
        results.append(services.ensure_loaded("cold").instance_id)

    threads = [threading.Thread(target=loader) for _ in range(20)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(set(results)) == 1
    assert registry.entry_stats("cold")["start_count"] == 1


def test_ensure_loaded_warm_returns_existing():
    registry, _, services, _ = build()
    registry.register(make_descriptor("warm", demand_loaded=True, idle_ttl_s=30))
    first = services.ensure_loaded("warm")
    second = services.ensure_loaded("warm")
    assert first is second
    assert registry.entry_stats("warm")["start_count"] == 1


def test_ensure_loaded_missing_artifact_start_timeout():
    registry, _, services, _ = build(hello_timeout_s=0.5)
    registry.register(make_descriptor(
        "broken", demand_loaded=True, idle_ttl_s=30,
        artifact_ref="definitely-not-registered"))
    with pytest.raises(StartTimeout):
        services.ensure_loaded("broken")


# -- eviction -----------------------------------------------------------------------------

def test_evict_idle_past_ttl_keeps_active_and_non_demand():
    registry, _, services, _ = build()
    registry.register(make_descriptor("hot", demand_loaded=True, idle_ttl_s=0.1))
    registry.register(make_descriptor("busy", prefix="/busy",
                                      demand_loaded=True, idle_ttl_s=0.1))
    registry.register(make_descriptor("pinned", prefix="/pinned"))
    services.start_replicas("pinned")
    idle = services.ensure_loaded("hot")
    active = services.ensure_loaded("busy")
    active.inc_active()
    time.sleep(0.15)
    evicted = services.evict_idle()
    assert evicted == [idle.instance_id]
    assert registry.live_instances("busy") == [active]
    assert len(registry.live_instances("pinned")) == 1
    active.dec_active()


# -- fault injection -----------------------------------------------------------------------

def test_fault_on_plain_module_unsupported():
    registry, _, services, _ = build()
    registry.register(make_descriptor(
        "plain", paradigm=Paradigm.Subprocess,
        artifact_ref=child_artifact("echo", "--plain")))
    services.start_replicas("plain")
    with pytest.raises(UnsupportedFault):
        services.inject_fault("plain", {"kind": "Leak", "rate_bytes_per_cycle": 1})


def test_fault_reapplied_to_replacement_instances():
    registry, _, services, _ = build(mode="baseline")
    register_and_start(registry, services, subprocess_echo_descriptor("m"))
    services.inject_fault("m", {"kind": "Leak", "rate_bytes_per_cycle": 1024})
    instance = registry.live_instances("m")[0]
    instance.transition(InstanceState.Unhealthy)
    replacement = services.baseline_recover(instance)
    first = replacement.endpoint.probe(2.0)
    second = replacement.endpoint.probe(2.0)
    assert second - first == 1024  # the stored fault followed the restart
