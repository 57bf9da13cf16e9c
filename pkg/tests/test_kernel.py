"""Kernel boot/shutdown and both HTTP surfaces end to end."""

from __future__ import annotations

import json
import threading
import time

import pytest
import requests

from conftest import fast_config, make_descriptor, subprocess_echo_descriptor
from muk import boot
from muk.dispatcher import Request
from muk.errors import AddrInUse, InvalidConfig, UnknownModule
from muk.handlers import register_handler
from muk.kernel import Kernel
from muk.registry import KERNEL_SERVER_IDS, InstanceState
from muk.paradigms import child_artifact


def admin_url(kernel, path):
    return f"http://{kernel.admin_addr}{path}"


def edge_url(kernel, path):
    return f"http://{kernel.listen_addr}{path}"


def test_boot_registers_four_resident_kernel_servers(kernel):
    modules = {m["descriptor"]["module_id"]: m for m in kernel.list_modules()}
    for server_id in KERNEL_SERVER_IDS:
        assert modules[server_id]["resident"]
        assert not modules[server_id]["descriptor"]["demand_loaded"]
        states = [i["state"] for i in modules[server_id]["instances"]]
        assert states == ["Ready"]


def test_invalid_config_names_offending_field():
    with pytest.raises(InvalidConfig) as excinfo:
        boot(fast_config(probe_interval_s=0))
    assert excinfo.value.field == "probe_interval_s"


def test_second_boot_on_same_listen_addr_fails():
    first = boot(fast_config())
    try:
        with pytest.raises(AddrInUse):
            boot(fast_config(listen_addr=first.listen_addr))
    finally:
        first.shutdown()


def test_double_shutdown_is_noop():
    kernel = boot(fast_config())
    first = kernel.shutdown()
    second = kernel.shutdown()
    assert first["ok"]
    assert second.get("already_stopped")


def test_shutdown_leaves_no_orphan_subprocesses():
    kernel = boot(fast_config())
    kernel.register_module(subprocess_echo_descriptor("s1"))
    kernel.register_module(subprocess_echo_descriptor("s2", prefix="/s2"))
    procs = [i.endpoint._proc for i in kernel.registry.all_live_instances()
             if hasattr(i.endpoint, "_proc")]
    assert len(procs) == 2
    result = kernel.shutdown()
    assert result["ok"]
    for proc in procs:
        assert proc.poll() is not None


def test_shutdown_force_kills_sigterm_ignoring_child():
    kernel = boot(fast_config(subprocess_grace_s=0.5))
    kernel.register_module(make_descriptor(
        "stubborn", paradigm=__import__("muk.registry", fromlist=["Paradigm"]).Paradigm.Subprocess,
        artifact_ref=child_artifact("echo", "--ignore-sigterm")))
    proc = kernel.registry.live_instances("stubborn")[0].endpoint._proc
    start = time.monotonic()
    kernel.shutdown()
    assert proc.poll() is not None
    assert time.monotonic() - start < 5


def test_unregister_waits_for_inflight_request():
    entered = threading.Event()
    release = threading.Event()

    class Slow:
        heals = ()

        def handle(self, req):
            entered.set()
            release.wait(5)
            return 200, {}, b"finished"

    register_handler("slowpoke", lambda m, v: Slow())
    kernel = boot(fast_config())
    try:
        kernel.register_module(make_descriptor("slow", artifact_ref="slowpoke"))
        responses = []
        t = threading.Thread(target=lambda: responses.append(
            kernel.dispatch(Request(method="GET", path="/slow"))))
        t.start()
        entered.wait(5)
        unreg = threading.Thread(target=lambda: kernel.unregister_module("slow"))
        unreg.start()
        time.sleep(0.1)
        release.set()
        unreg.join(5)
        t.join(5)
        assert responses[0].status == 200
        assert responses[0].body == b"finished"
        with pytest.raises(UnknownModule):
            kernel.lookup("slow")
    finally:
        kernel.shutdown()


def test_registry_persists_across_boots(tmp_path):
    path = str(tmp_path / "registry.json")
    kernel = boot(fast_config(registry_path=path))
    kernel.register_module(make_descriptor("keeper"))
    kernel.shutdown()

    reborn = boot(fast_config(registry_path=path))
    try:
        descriptor, instances = reborn.lookup("keeper")
        assert descriptor.module_id == "keeper"
        assert len(instances) == 1  # instances restart fresh from the descriptor
    finally:
        reborn.shutdown()


# -- HTTP edge ------------------------------------------------------------------

def test_edge_serves_dispatch_with_tracing_headers(kernel):
    kernel.register_module(make_descriptor("echo"))
    response = requests.post(edge_url(kernel, "/echo"), data=b"ping", timeout=5)
    assert response.status_code == 200
    assert response.content == b"ping"
    assert response.headers["X-Muk-Instance"].startswith("echo-")
    request_id = response.headers["X-Muk-Request-Id"]

    trace = requests.get(admin_url(kernel, f"/admin/trace/{request_id}"),
                         timeout=5).json()
    assert trace["events"]


def test_edge_maps_no_route_to_404(kernel):
    response = requests.get(edge_url(kernel, "/nowhere"), timeout=5)
    assert response.status_code == 404


# -- admin API -------------------------------------------------------------------

def test_admin_module_crud_roundtrip(kernel):
    descriptor = make_descriptor("viahttp", replicas=2).to_json()
    created = requests.post(admin_url(kernel, "/admin/modules"),
                            json=descriptor, timeout=5)
    assert created.status_code == 201

    listed = requests.get(admin_url(kernel, "/admin/modules"), timeout=5).json()
    ids = [m["descriptor"]["module_id"] for m in listed["modules"]]
    assert "viahttp" in ids

    detail = requests.get(admin_url(kernel, "/admin/modules/viahttp"),
                          timeout=5).json()
    assert len(detail["instances"]) == 2

    dup = requests.post(admin_url(kernel, "/admin/modules"),
                        json=descriptor, timeout=5)
    assert dup.status_code == 409
    assert dup.json()["code"] == "DuplicateId"

    deleted = requests.delete(admin_url(kernel, "/admin/modules/viahttp"), timeout=5)
    assert deleted.status_code == 200
    missing = requests.get(admin_url(kernel, "/admin/modules/viahttp"), timeout=5)
    assert missing.status_code == 404


def test_admin_scale_deploy_rollback_flow(kernel):
    kernel.register_module(make_descriptor("m", artifact_ref="version-echo"))
    scale = requests.post(admin_url(kernel, "/admin/modules/m/scale"),
                          json={"replicas": 3}, timeout=5)
    assert scale.status_code == 200
    assert len(kernel.registry.live_instances("m")) == 3

    deploy = requests.post(admin_url(kernel, "/admin/modules/m/deploy"),
                           json={"version": "2.0.0", "artifact_ref": "version-echo"},
                           timeout=5)
    assert deploy.status_code == 200
    body = requests.get(edge_url(kernel, "/m"), timeout=5)
    assert body.content == b"2.0.0"

    rollback = requests.post(admin_url(kernel, "/admin/modules/m/rollback"),
                             timeout=5)
    assert rollback.status_code == 200
    assert requests.get(edge_url(kernel, "/m"), timeout=5).content == b"1.0.0"

    deployments = requests.get(admin_url(kernel, "/admin/modules/m/deployments"),
                               timeout=5).json()["deployments"]
    assert [d["status"] for d in deployments] == ["Superseded", "RolledBack", "Active"]

    conflict = requests.post(admin_url(kernel, "/admin/modules/m/deploy"),
                             json={"version": "1.0.0", "artifact_ref": "version-echo"},
                             timeout=5)
    assert conflict.status_code == 409


def test_admin_snapshot_tasks_and_instances(kernel):
    kernel.register_module(make_descriptor("echo"))
    requests.post(edge_url(kernel, "/echo"), data=b"x", timeout=5)
    snapshot = requests.get(admin_url(kernel, "/admin/snapshot"), timeout=5).json()
    assert snapshot["modules"]["echo"]["states"].get("Ready") == 1
    assert snapshot["mapek_mode"] == "off"

    tasks = requests.get(admin_url(kernel, "/admin/tasks"), timeout=5).json()
    assert "ledger" in tasks

    instances = requests.get(admin_url(kernel, "/admin/instances"), timeout=5).json()
    assert any(i["module_id"] == "echo" for i in instances["instances"])


def test_admin_alert_rules_roundtrip(kernel):
    rule = {"rule_id": "lat", "metric": "LatencyUs", "aggregation": "P95",
            "window_s": 30, "threshold": 1000000, "direction": "Above",
            "target": "*"}
    posted = requests.post(admin_url(kernel, "/admin/alerts"), json=rule, timeout=5)
    assert posted.status_code == 200
    rules = requests.get(admin_url(kernel, "/admin/alerts"), timeout=5).json()
    assert rules["rules"][0]["rule_id"] == "lat"
    bad = dict(rule, window_s=0, rule_id="bad")
    assert requests.post(admin_url(kernel, "/admin/alerts"),
                         json=bad, timeout=5).status_code == 400


def test_admin_mapek_mode_switch_and_knowledge(kernel):
    mode = requests.post(admin_url(kernel, "/admin/mapek/mode"),
                         json={"mode": "mapek"}, timeout=5)
    assert mode.status_code == 200
    assert kernel.mapek_mode == "mapek"
    knowledge = requests.get(admin_url(kernel, "/admin/mapek/knowledge"),
                             timeout=5).json()
    assert knowledge == {}
    cycles = requests.get(admin_url(kernel, "/admin/mapek/cycles?last=5"),
                          timeout=5).json()
    assert cycles["cycles"] == []
    bad = requests.post(admin_url(kernel, "/admin/mapek/mode"),
                        json={"mode": "chaos"}, timeout=5)
    assert bad.status_code == 400


def test_event_feed_long_poll_delivers_alert(kernel):
    kernel.register_module(make_descriptor("echo"))
    rule = {"rule_id": "always", "metric": "LatencyUs", "aggregation": "Max",
            "window_s": 60, "threshold": 0, "direction": "Above", "target": "*"}
    requests.post(admin_url(kernel, "/admin/alerts"), json=rule, timeout=5)

    results = {}

    def poll():
        results["reply"] = requests.get(
            admin_url(kernel, "/admin/events?since=0&timeout=10"), timeout=15).json()

    poller = threading.Thread(target=poll)
    poller.start()
    requests.post(edge_url(kernel, "/echo"), data=b"x", timeout=5)
    poller.join(15)
    events = results["reply"]["events"]
    assert any(e["kind"] == "alert" for e in events)
    assert [e["seq"] for e in events] == sorted(e["seq"] for e in events)
    # cursor ahead of the feed signals a reset
    ahead = requests.get(admin_url(kernel, "/admin/events?since=99999&timeout=0.1"),
                         timeout=5).json()
    assert ahead["reset"]


def test_kernel_servers_survive_eviction_cycles(kernel):
    for _ in range(5):
        kernel.services.evict_idle()
    for server_id in KERNEL_SERVER_IDS:
        _, instances = kernel.lookup(server_id)
        assert [i.state for i in instances] == [InstanceState.Ready]


def test_console_static_assets_served_when_built(kernel):
    if not kernel.console_dir:
        pytest.skip("console assets not built (frontend/dist missing)")
    page = requests.get(admin_url(kernel, "/console/"), timeout=5)
    assert page.status_code == 200
    assert "muk console" in page.text
    # no path traversal out of the assets directory
    sneaky = requests.get(admin_url(kernel, "/console/../kernel.py"), timeout=5)
    assert sneaky.status_code == 404
