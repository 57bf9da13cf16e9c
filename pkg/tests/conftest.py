"""Shared fixtures: fast kernel configs and module descriptor helpers."""

from __future__ import annotations

import pytest

from muk import KernelConfig, boot
from muk.paradigms import child_artifact
from muk.registry import (
    ModuleDescriptor,
    Paradigm,
    ResourceQuota,
    RouteRule,
    Strategy,
)

ACCEPTANCE_LABELS = {
    "test_c01": "C1 paradigm overhead ordering",
    "test_c02": "C2 MAPE-K beats baseline",
    "test_c03": "C3 dispatcher properties",
    "test_c04": "C4 lifecycle properties",
    "test_c05": "C5 demand loading",
    "test_c06": "C6 ISC codec and ordering",
    "test_c07": "C7 scheduler",
    "test_c08": "C8 kernel servers",
    "test_c09": "C9 observability",
}


def pytest_runtest_logreport(report):
    if report.when != "call" or "test_acceptance" not in report.nodeid:
        return
    name = report.nodeid.rsplit("::", 1)[-1]
    for prefix, label in ACCEPTANCE_LABELS.items():
        if name.startswith(prefix):
            verdict = "PASS" if report.passed else "FAIL"
            print(f"\nACCEPTANCE {label}: {verdict}", flush=True)
            return


def fast_config(**overrides) -> KernelConfig:
    defaults = dict(
        listen_addr="127.0.0.1:0",
        admin_addr="127.0.0.1:0",
        probe_interval_s=0.25,
        mapek_period_s=0.25,
        mapek_enabled=True,
        mapek_mode="off",
        hello_timeout_s=5.0,
        start_timeout_s=10.0,
        drain_timeout_s=5.0,
        subprocess_grace_s=2.0,
        upstream_timeout_s=5.0,
    )
    defaults.update(overrides)
    return KernelConfig(**defaults)


def make_descriptor(module_id="echo", paradigm=Paradigm.InProcess,
                    artifact_ref="echo", version="1.0.0", replicas=1,
                    prefix=None, strategy=Strategy.RoundRobin,
                    demand_loaded=False, idle_ttl_s=None,
                    max_concurrent=64, max_memory=256 * 1024 * 1024,
                    method="*") -> ModuleDescriptor:
    prefix = prefix if prefix is not None else f"/{module_id}"
    return ModuleDescriptor(
        module_id=module_id,
        name=module_id,
        version=version,
        paradigm=paradigm,
        artifact_ref=artifact_ref,
        routes=(RouteRule(method=method, path_prefix=prefix, strategy=strategy),),
        quota=ResourceQuota(max_memory_bytes=max_memory,
                            max_concurrent_requests=max_concurrent),
        demand_loaded=demand_loaded,
        idle_ttl_s=idle_ttl_s,
        replicas_desired=replicas,
    )


def subprocess_echo_descriptor(module_id="subecho", **kw) -> ModuleDescriptor:
    kw.setdefault("artifact_ref", child_artifact("echo"))
    return make_descriptor(module_id=module_id, paradigm=Paradigm.Subprocess, **kw)


@pytest.fixture
def kernel():
    k = boot(fast_config())
    yield k
    k.shutdown()
