"""Topic-based pub/sub between Layer-2 microservices and the VASs.

Access is governed by an ACL table of ``(role, topic_pattern, allow)``
entries.  A pattern is either an exact topic, a prefix ending in ``/*``,
or ``*``.  No matching entry means deny.

Subscriptions have bounded FIFO queues.  When a queue is full a critical
event evicts the oldest queued standard event; a standard event arriving at
a full queue is dropped.  Critical events are never dropped, so a queue
holding only critical events may exceed its bound.
"""
from __future__ import annotations

import json
import threading
from collections import defaultdict, deque
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable

from .errors import AccessDenied, ConfigError, PayloadError

PUBLISH = "publish"
SUBSCRIBE = "subscribe"
CRITICAL = "critical"
STANDARD = "standard"
MAX_PAYLOAD = 16 * 1024 * 1024
DEFAULT_QUEUE = 1024

# topics used by the platform
UPDATES_AVAILABLE = "updates/available"
UPDATES_FETCHED = "updates/fetched"
SIEM_ALERTS = "siem/alerts"
PAYMENTS_RECONCILED = "payments/reconciled"
CHARGING_STATE = "charging/state"
TELEMETRY_EXPORT = "telemetry/export"


def _check_topic(topic: str):
    if not topic or "*" in topic or any(not seg for seg in topic.split("/")):
        raise ValueError(f"invalid topic {topic!r}")


def _check_pattern(pattern: str):
    if pattern == "*":
        return
    base = pattern[:-2] if pattern.endswith("/*") else pattern
    _check_topic(base)


def pattern_matches(pattern: str, topic: str) -> bool:
    if pattern == "*":
        return True
    if pattern.endswith("/*"):
        return topic.startswith(pattern[:-1])
    return pattern == topic


def pattern_covers(outer: str, inner: str) -> bool:
    """True when every topic matched by ``inner`` is also matched by ``outer``."""
    if outer == "*":
        return True
    if inner == "*":
        return False
    if outer.endswith("/*"):
        return inner.startswith(outer[:-1])
    return not inner.endswith("/*") and inner == outer


@dataclass(frozen=True)
class AclEntry:
    role: str
    topic_pattern: str
    allow: frozenset

    def __post_init__(self):
        _check_pattern(self.topic_pattern)
        allow = frozenset(self.allow)
        unknown = allow - {PUBLISH, SUBSCRIBE}
        if unknown:
            raise ConfigError(f"unknown ACL actions {sorted(unknown)}")
        object.__setattr__(self, "allow", allow)


class AclTable:
    def __init__(self, entries: Iterable[AclEntry] = ()):
        seen: dict[tuple[str, str], frozenset] = {}
        for e in entries:
            key = (e.role, e.topic_pattern)
            if key in seen and seen[key] != e.allow:
                raise ConfigError(f"conflicting ACL entries for role {e.role!r} on {e.topic_pattern!r}")
            seen[key] = e.allow
        self.entries = tuple(AclEntry(r, p, a) for (r, p), a in seen.items())

    def allows(self, role: str, action: str, topic: str) -> bool:
        return any(e.role == role and action in e.allow and pattern_matches(e.topic_pattern, topic)
                   for e in self.entries)

    def allows_pattern(self, role: str, action: str, pattern: str) -> bool:
        return any(e.role == role and action in e.allow and pattern_covers(e.topic_pattern, pattern)
                   for e in self.entries)


def acl_from_json(items) -> list[AclEntry]:
    try:
        return [AclEntry(i["role"], i["topic_pattern"], frozenset(i["allow"])) for i in items]
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed ACL entry: {exc}") from exc


def load_acl(path: str | Path) -> list[AclEntry]:
    return acl_from_json(json.loads(Path(path).read_text()))


def default_acl() -> list[AclEntry]:
    text = resources.files("evolve_vas").joinpath("data/default_acl.json").read_text()
    return acl_from_json(json.loads(text))


@dataclass(frozen=True)
class Event:
    topic: str
    payload: bytes
    publisher_role: str
    criticality: str = STANDARD
    sequence: int = 0


@dataclass
class TopicStats:
    published: int = 0
    fanout: int = 0
    delivered: int = 0
    dropped: int = 0


class Subscription:
    def __init__(self, bus: "EventBus", role: str, pattern: str, capacity: int):
        self.bus = bus
        self.role = role
        self.pattern = pattern
        self.capacity = capacity
        self.dropped = 0
        self.closed = False
        self._queue: deque[Event] = deque()
        self._cond = threading.Condition()

    def __repr__(self):
        return f"<Subscription {self.role} {self.pattern} queued={len(self)}>"

    def __len__(self):
        return len(self._queue)

    def _offer(self, event: Event) -> tuple[bool, Event | None]:
        """Queue ``event``; returns (accepted, evicted)."""
        with self._cond:
            evicted = None
            if len(self._queue) >= self.capacity:
                if event.criticality != CRITICAL:
                    self.dropped += 1
                    return False, None
                for i, queued in enumerate(self._queue):
                    if queued.criticality != CRITICAL:
                        evicted = queued
                        del self._queue[i]
                        self.dropped += 1
                        break
            self._queue.append(event)
            self._cond.notify()
            return True, evicted

    def get(self, timeout: float | None = None) -> Event | None:
        with self._cond:
            if not self._queue and timeout:
                self._cond.wait(timeout)
            return self._queue.popleft() if self._queue else None

    def drain(self) -> list[Event]:
        with self._cond:
            items = list(self._queue)
            self._queue.clear()
            return items

    def close(self):
        self.bus.unsubscribe(self)


class EventBus:
    """Thread-safe bus; per-topic ordering is the only ordering guarantee."""

    def __init__(self, acl: Iterable[AclEntry] | None = None, queue_size: int = DEFAULT_QUEUE):
        self.queue_size = queue_size
        self._lock = threading.RLock()
        self._acl = AclTable(default_acl() if acl is None else acl)
        self._subs: list[Subscription] = []
        self._sequence: dict[str, int] = defaultdict(int)
        self.stats: dict[str, TopicStats] = defaultdict(TopicStats)

    @property
    def acl(self) -> AclTable:
        return self._acl

    def set_acl(self, entries: Iterable[AclEntry]):
        table = AclTable(entries)
        with self._lock:
            self._acl = table

    def subscribe(self, role: str, topic_pattern: str, capacity: int | None = None) -> Subscription:
        _check_pattern(topic_pattern)
        with self._lock:
            if not self._acl.allows_pattern(role, SUBSCRIBE, topic_pattern):
                raise AccessDenied(role, topic_pattern, SUBSCRIBE)
            sub = Subscription(self, role, topic_pattern, capacity or self.queue_size)
            self._subs.append(sub)
            return sub

    def unsubscribe(self, sub: Subscription):
        with self._lock:
            if sub in self._subs:
                self._subs.remove(sub)
            sub.closed = True

    def publish(self, role: str, topic: str, payload: bytes = b"", criticality: str = STANDARD) -> int:
        """Publish and return how many subscriptions accepted the event."""
        _check_topic(topic)
        if criticality not in (CRITICAL, STANDARD):
            raise ValueError(f"unknown criticality {criticality!r}")
        if len(payload) > MAX_PAYLOAD:
            raise PayloadError(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
        with self._lock:
            acl = self._acl
            if not acl.allows(role, PUBLISH, topic):
                raise AccessDenied(role, topic, PUBLISH)
            self._sequence[topic] += 1
            event = Event(topic, bytes(payload), role, criticality, self._sequence[topic])
            stats = self.stats[topic]
            stats.published += 1
            delivered = 0
            for sub in self._subs:
                if not pattern_matches(sub.pattern, topic):
                    continue
                if not acl.allows(sub.role, SUBSCRIBE, topic):
                    continue
                stats.fanout += 1
                accepted, evicted = sub._offer(event)
                if accepted:
                    delivered += 1
                    stats.delivered += 1
                else:
                    stats.dropped += 1
                if evicted is not None:
                    self.stats[evicted.topic].delivered -= 1
                    self.stats[evicted.topic].dropped += 1
            return delivered


def publish(bus: EventBus, role: str, event: Event) -> int:
    return bus.publish(role, event.topic, event.payload, event.criticality)


def subscribe(bus: EventBus, role: str, topic_pattern: str) -> Subscription:
    return bus.subscribe(role, topic_pattern)


def set_acl(bus: EventBus, entries: Iterable[AclEntry]):
    bus.set_acl(entries)
