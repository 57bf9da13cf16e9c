"""Kernel servers: session, auth/RBAC/rate limiting, validation, events."""

from __future__ import annotations

import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from muk.clock import VirtualClock
from muk.errors import (
    BadCredentials,
    BadSignature,
    ConflictingOpts,
    Expired,
    ExpiredToken,
    KernelError,
    Malformed,
    NotFound,
    RateLimited,
    UnknownRuleSet,
)
from muk.isc import Bus
from muk.servers import isc_endpoint
from muk.servers.auth import Action, AuthServer, RateLimiter, RbacPolicy, authorize
from muk.servers.events import EventServer
from muk.servers.session import SessionServer
from muk.servers.validation import (
    RuleSet,
    ValidationServer,
    cross_field,
    formatted,
    length,
    required,
    sanitize,
    typed,
)


# -- sessions -----------------------------------------------------------------

def test_session_get_refreshes_last_touched():
    clock = VirtualClock()
    server = SessionServer(clock=clock)
    session = server.create("u1", ttl_s=60)
    clock.advance(30)
    got = server.get(session.session_id)
    assert got.session_id == session.session_id
    assert got.last_touched_at == clock.wall()


def test_session_expired_after_ttl_and_removed():
    clock = VirtualClock()
    server = SessionServer(clock=clock)
    session = server.create("u1", ttl_s=1)
    clock.advance(2)
    with pytest.raises(Expired):
        server.get(session.session_id)
    with pytest.raises(NotFound):
        server.get(session.session_id)


def test_session_invalidate_idempotent():
    server = SessionServer()
    session = server.create("u1", ttl_s=10)
    server.invalidate(session.session_id)
    server.invalidate(session.session_id)
    with pytest.raises(NotFound):
        server.get(session.session_id)


def test_session_sliding_expiry_survives_touch_cadence():
    clock = VirtualClock()
    server = SessionServer(clock=clock)
    session = server.create("u1", ttl_s=1)
    for _ in range(100):
        clock.advance(0.4)
        server.get(session.session_id)  # touch at ttl*0.4 cadence
    clock.advance(1.1)
    with pytest.raises(Expired):
        server.get(session.session_id)


def test_session_ids_are_128_bit_hex_and_unique():
    server = SessionServer()
    ids = {server.create("u", ttl_s=10).session_id for _ in range(64)}
    assert len(ids) == 64
    assert all(len(i) == 32 and int(i, 16) >= 0 for i in ids)


# -- auth -----------------------------------------------------------------------

@pytest.fixture
def auth():
    clock = VirtualClock()
    server = AuthServer("sekrit", login_limit=5, login_window_s=60, clock=clock)
    server.add_user("alice", "pw123", ["admin"])
    server.add_user("bob", "hunter2", ["viewer"])
    return server, clock


def test_login_issues_verifiable_token(auth):
    server, _ = auth
    token = server.login("alice", "pw123")
    claims = server.verify_token(token)
    assert claims == {"user_id": "alice", "roles": ["admin"]}


def test_bad_password_audited(auth):
    server, _ = auth
    with pytest.raises(BadCredentials):
        server.login("alice", "wrong")
    actions = [e["action"] for e in server.audit.read_all()]
    assert "login.failure" in actions


def test_sixth_attempt_rate_limited_even_with_correct_password(auth):
    server, _ = auth
    for _ in range(5):
        with pytest.raises(BadCredentials):
            server.login("alice", "wrong")
    with pytest.raises(RateLimited):
        server.login("alice", "pw123")
    # audit saw 5 failures plus the rate-limited attempt
    actions = [e["action"] for e in server.audit.read_all()]
    assert actions.count("login.failure") == 5
    assert actions.count("login.rate_limited") == 1


def test_rate_limit_window_rolls_over(auth):
    server, clock = auth
    for _ in range(5):
        with pytest.raises(BadCredentials):
            server.login("alice", "wrong")
    clock.advance(61)
    assert server.verify_token(server.login("alice", "pw123"))


def test_tampered_payload_is_bad_signature(auth):
    server, _ = auth
    token = server.login("alice", "pw123")
    payload, sig = token.split(".")
    tampered = payload[:-2] + ("AA" if payload[-2:] != "AA" else "BB") + "." + sig
    with pytest.raises(BadSignature):
        server.verify_token(tampered)


def test_expired_token(auth):
    server, clock = auth
    token = server.issue_token("alice", ["admin"], ttl_s=10)
    clock.advance(11)
    with pytest.raises(ExpiredToken):
        server.verify_token(token)


def test_malformed_token(auth):
    server, _ = auth
    with pytest.raises(Malformed):
        server.verify_token("no-dot-here")
    with pytest.raises(Malformed):
        server.verify_token(".leading")


def test_any_single_bit_flip_is_rejected(auth):
    server, _ = auth
    token = server.login("alice", "pw123")
    rng = random.Random(42)
    for _ in range(300):
        pos = rng.randrange(len(token))
        bit = 1 << rng.randrange(7)
        flipped = token[:pos] + chr(ord(token[pos]) ^ bit) + token[pos + 1:]
        if flipped == token:
            continue
        with pytest.raises(KernelError):
            server.verify_token(flipped)


def test_rbac_deny_by_default_and_wildcard():
    policy = RbacPolicy()
    policy.grant("viewer", "doc", Action.Read)
    policy.grant("admin", "*", Action.Write)
    assert authorize(["viewer"], "doc", Action.Read, policy)
    assert not authorize(["viewer"], "doc", Action.Delete, policy)
    assert authorize(["admin"], "doc", Action.Write, policy)
    assert not authorize(["ghost"], "doc", Action.Read, policy)
    assert not authorize([], "doc", Action.Read, policy)


def test_rbac_allow_only_with_explicit_grant_fuzz():
    rng = random.Random(5)
    resources = ["doc", "img", "cfg"]
    roles = ["r0", "r1", "r2", "r3"]
    for _ in range(200):
        policy = RbacPolicy()
        grants = set()
        for _ in range(rng.randrange(6)):
            role, res = rng.choice(roles), rng.choice(resources + ["*"])
            action = rng.choice(list(Action))
            policy.grant(role, res, action)
            grants.add((role, res, action))
        held = rng.sample(roles, rng.randrange(len(roles) + 1))
        res, action = rng.choice(resources), rng.choice(list(Action))
        expected = any((role, res, action) in grants or (role, "*", action) in grants
                       for role in held)
        assert authorize(held, res, action, policy) is expected


def test_fixed_window_rate_limiter():
    clock = VirtualClock(start_wall=1_700_000_000.0)
    limiter = RateLimiter(clock)
    results = [limiter.check("k", 3, 60) for _ in range(4)]
    assert results == [True, True, True, False]
    # next epoch-aligned window resets the counter
    clock.advance(60 - (clock.wall() % 60) + 0.1)
    assert limiter.check("k", 3, 60)
    assert limiter.check("other", 3, 60)  # distinct keys are independent


# -- validation --------------------------------------------------------------------

@pytest.fixture
def validator():
    server = ValidationServer()
    server.register_ruleset(RuleSet(
        name="booking",
        fields=("start", "end", "title", "seats"),
        rules=(
            required("start"),
            required("end"),
            formatted("start", "date"),
            formatted("end", "date"),
            cross_field("end", "gt", "start"),
            typed("seats", "int"),
            length("title", 1, 10),
        ),
    ))
    return server


def test_cross_field_end_after_start(validator):
    failures = validator.validate({"start": "2024-01-02", "end": "2024-01-01"},
                                  "booking")
    assert [(f.field, f.rule) for f in failures] == [("end", "CrossField")]


def test_missing_required_field(validator):
    failures = validator.validate({"end": "2024-01-03"}, "booking")
    assert ("start", "Required") in [(f.field, f.rule) for f in failures]


def test_all_violations_reported_no_short_circuit(validator):
    failures = validator.validate(
        {"start": "2024-01-02", "end": "2024-01-01", "seats": "three"}, "booking")
    kinds = {(f.field, f.rule) for f in failures}
    assert kinds == {("end", "CrossField"), ("seats", "Type")}


def test_unknown_ruleset(validator):
    with pytest.raises(UnknownRuleSet):
        validator.validate({}, "nope")


def test_ruleset_registration_resolves_names():
    from muk.errors import InvalidDescriptor
    server = ValidationServer()
    with pytest.raises(InvalidDescriptor):
        server.register_ruleset(RuleSet("x", ("a",), (formatted("a", "nope"),)))
    with pytest.raises(InvalidDescriptor):
        server.register_ruleset(RuleSet("x", ("a",), (required("b"),)))
    with pytest.raises(InvalidDescriptor):
        server.register_ruleset(RuleSet("x", ("a", "b"), (cross_field("a", "??", "b"),)))


def test_sanitize_escape_table():
    assert sanitize("<script>") == "&lt;script&gt;"
    assert sanitize('a"b\'c&d') == "a&quot;b&#39;c&amp;d"
    assert sanitize("a\u0000b") == "ab"
    assert sanitize("keep\ttabs\nand newlines") == "keep\ttabs\nand newlines"


@given(st.text(max_size=200))
@settings(max_examples=300)
def test_sanitize_idempotent(text):
    once = sanitize(text)
    assert sanitize(once) == once


# -- events ------------------------------------------------------------------------

@pytest.fixture
def eventsrv():
    clock = VirtualClock()
    bus = Bus(clock=clock)
    server = EventServer(bus, clock=clock)
    sub = bus.subscribe("t", "watcher")
    return server, clock, sub


def test_debounce_publishes_only_the_last(eventsrv):
    server, clock, sub = eventsrv
    for i in range(5):
        server.emit("t", f"e{i}".encode(), debounce_ms=50)
        clock.advance(0.010)
        server.pump()
    clock.advance(0.050)
    server.pump()
    got = []
    while (env := sub.poll()) is not None:
        got.append(env.body)
    assert got == [b"e4"]
    counters = server.counters("t")
    assert counters == {"emitted": 5, "published": 1, "dropped": 4, "pending": 0}


def test_throttle_leading_edge_windows(eventsrv):
    # arrivals at t=0,10,20,30,40 ms; 30 ms windows open at t=0 and t=30
    server, clock, sub = eventsrv
    published = []
    for i in range(5):
        server.emit("t", f"e{i}".encode(), throttle_ms=30)
        clock.advance(0.010)
        server.pump()
    while (env := sub.poll()) is not None:
        published.append(env.body)
    assert published == [b"e0", b"e3"]
    counters = server.counters("t")
    assert counters["published"] == 2
    assert counters["dropped"] == 3


def test_delayed_emit_not_before_deadline(eventsrv):
    server, clock, sub = eventsrv
    server.emit("t", b"later", delay_ms=100)
    clock.advance(0.099)
    server.pump()
    assert sub.poll() is None
    clock.advance(0.002)
    server.pump()
    assert sub.poll().body == b"later"


def test_conflicting_opts(eventsrv):
    server, _, _ = eventsrv
    with pytest.raises(ConflictingOpts):
        server.emit("t", b"x", debounce_ms=10, throttle_ms=10)


def test_debounce_throttle_conservation_over_random_schedules():
    rng = random.Random(99)
    for _ in range(30):
        clock = VirtualClock()
        bus = Bus(clock=clock)
        server = EventServer(bus, clock=clock)
        bus.subscribe("t", "w")
        mode = rng.choice(["debounce", "throttle", "plain", "delay"])
        emitted = 0
        for _ in range(rng.randrange(1, 40)):
            opts = {}
            if mode == "debounce":
                opts["debounce_ms"] = rng.choice([10, 30, 50])
            elif mode == "throttle":
                opts["throttle_ms"] = rng.choice([10, 30, 50])
            elif mode == "delay":
                opts["delay_ms"] = rng.choice([5, 20, 100])
            server.emit("t", b"x", **opts)
            emitted += 1
            clock.advance(rng.random() * 0.04)
            server.pump()
        counters = server.counters("t")
        assert counters["emitted"] == emitted
        assert (counters["published"] + counters["dropped"]
                + counters["pending"]) == emitted
        # drain all timers: pending must reach zero
        clock.advance(10)
        server.pump()
        counters = server.counters("t")
        assert counters["pending"] == 0
        assert counters["published"] + counters["dropped"] == emitted


# -- ISC addressability ---------------------------------------------------------------

def test_kernel_server_reachable_over_isc():
    bus = Bus()
    sessions = SessionServer()
    bus.register_endpoint("kernel.session", isc_endpoint(sessions, "kernel.session"))
    reply = bus.request("kernel.session", json.dumps(
        {"op": "create", "args": {"user_id": "u9", "ttl_s": 30}}).encode())
    payload = json.loads(reply.body)
    assert payload["ok"]
    assert payload["result"]["user_id"] == "u9"
    # errors come back structured, not as transport failures
    reply = bus.request("kernel.session", json.dumps(
        {"op": "get", "args": {"session_id": "nope"}}).encode())
    payload = json.loads(reply.body)
    assert not payload["ok"]
    assert payload["code"] == "NotFound"
