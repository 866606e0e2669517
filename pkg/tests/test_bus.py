from __future__ import annotations

import threading

import pytest
from hypothesis import given, strategies as st

from evolve_vas import bus as evbus
from evolve_vas.bus import AclEntry, EventBus, pattern_covers, pattern_matches
from evolve_vas.errors import AccessDenied, ConfigError, PayloadError


def test_default_acl_allows_intended_flows():
    b = EventBus()
    sub = b.subscribe("vas_siem", "updates/*")
    assert b.publish("vas_update", evbus.UPDATES_AVAILABLE, b"m") == 1
    ev = sub.get()
    assert (ev.topic, ev.payload, ev.publisher_role, ev.sequence) == ("updates/available", b"m", "vas_update", 1)


@pytest.mark.parametrize("role,topic", [("vas_payments", "siem/alerts"), ("vas_siem", "charging/state"),
                                        ("unknown", "charging/state")])
def test_publish_denied(role, topic):
    b = EventBus()
    with pytest.raises(AccessDenied):
        b.publish(role, topic)
    assert b.stats[topic].published == 0


def test_subscribe_must_be_covered():
    b = EventBus()
    with pytest.raises(AccessDenied):
        b.subscribe("vas_payments", "*")
    with pytest.raises(AccessDenied):
        b.subscribe("vas_update", "siem/*")
    b.subscribe("vas_update", "siem/alerts")
    b.subscribe("telemetry", "*")


def test_revoked_subscriber_stops_receiving():
    b = EventBus()
    sub = b.subscribe("telemetry", "*")
    b.set_acl([AclEntry("charging", "charging/*", frozenset({"publish"}))])
    assert b.publish("charging", "charging/state") == 0
    assert len(sub) == 0


def test_conflicting_acl_entries_rejected():
    with pytest.raises(ConfigError):
        EventBus([AclEntry("a", "x/*", frozenset({"publish"})), AclEntry("a", "x/*", frozenset({"subscribe"}))])
    with pytest.raises(ConfigError):
        AclEntry("a", "x", frozenset({"delete"}))
    with pytest.raises(ConfigError):
        evbus.acl_from_json([{"role": "a"}])


def test_payload_limit_and_topic_validation():
    b = EventBus()
    b.publish("charging", "charging/state", bytes(evbus.MAX_PAYLOAD))
    with pytest.raises(PayloadError):
        b.publish("charging", "charging/state", bytes(evbus.MAX_PAYLOAD + 1))
    for bad in ("", "a//b", "charging/*"):
        with pytest.raises(ValueError):
            b.publish("charging", bad)


def test_full_queue_drops_standard_and_evicts_for_critical():
    b = EventBus(queue_size=2)
    sub = b.subscribe("telemetry", "*")
    b.publish("charging", "charging/state", b"1")
    b.publish("charging", "charging/state", b"2")
    assert b.publish("charging", "charging/state", b"3") == 0
    assert b.publish("charging", "charging/state", b"crit", evbus.CRITICAL) == 1
    assert [e.payload for e in sub.drain()] == [b"2", b"crit"]
    st_ = b.stats["charging/state"]
    assert (st_.published, st_.delivered, st_.dropped) == (4, 2, 2)
    assert sub.dropped == 2


def test_criticals_never_evict_criticals():
    b = EventBus(queue_size=1)
    sub = b.subscribe("telemetry", "*")
    b.publish("charging", "charging/state", b"a", evbus.CRITICAL)
    b.publish("charging", "charging/state", b"b", evbus.CRITICAL)
    assert [e.payload for e in sub.drain()] == [b"a", b"b"]


def test_per_topic_order_under_concurrency():
    b = EventBus(queue_size=100_000)
    sub = b.subscribe("telemetry", "*")

    def worker(role, topic):
        for i in range(500):
            b.publish(role, topic, i.to_bytes(4, "big"))

    threads = [threading.Thread(target=worker, args=a) for a in
               [("charging", "charging/state"), ("vas_siem", "siem/alerts"), ("vas_payments", "payments/x")]]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    events = sub.drain()
    assert len(events) == 1500
    for topic in ("charging/state", "siem/alerts", "payments/x"):
        mine = [e for e in events if e.topic == topic]
        assert [int.from_bytes(e.payload, "big") for e in mine] == list(range(500))
        assert [e.sequence for e in mine] == list(range(1, 501))


def test_unsubscribe_and_get_timeout():
    b = EventBus()
    sub = b.subscribe("telemetry", "*")
    sub.close()
    assert sub.closed
    assert b.publish("charging", "charging/state") == 0
    assert sub.get(timeout=0.01) is None


segment = st.sampled_from(["a", "b", "c"])
topic_st = st.lists(segment, min_size=1, max_size=3).map("/".join)
pattern_st = st.one_of(st.just("*"), topic_st, topic_st.map(lambda t: t + "/*"))


@given(outer=pattern_st, inner=pattern_st, topic=topic_st)
def test_covers_implies_matches(outer, inner, topic):
    if pattern_covers(outer, inner) and pattern_matches(inner, topic):
        assert pattern_matches(outer, topic)
