"""Deterministic emulation of vehicle/charger and charger/cloud links.

Time is virtual: every link owns a simulated clock that advances by the
computed duration of each exchange, so a 100 MB transfer costs no wall
clock time beyond moving the bytes around in memory.

Timing of one request/response exchange::

    duration = 2 * d + (request_bytes + response_bytes) * 8 / effective_rate

where ``d`` is the one-way delay, sampled once per exchange as
``one_way_latency_ms * (1 + U)``, ``U ~ Uniform(-jitter, +jitter)``.
"""
from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .errors import BenchmarkAborted, ConfigError, LinkClosed, LinkInterrupted

KB = 1024
MB = 1_000_000
MiB = 1024 * 1024

IDEAL = "ideal"
LOSS_THROTTLED = "loss_throttled"
_TRANSPORT_ALIASES = {"ideal": IDEAL, "loss": LOSS_THROTTLED, "loss_throttled": LOSS_THROTTLED}


@dataclass(frozen=True)
class LinkProfile:
    name: str
    rate_mbps: float
    one_way_latency_ms: float
    plr_percent: float = 0.0
    jitter_fraction: float = 0.0

    def __post_init__(self):
        if not self.name:
            raise ConfigError("profile name must be non-empty")
        if not self.rate_mbps > 0:
            raise ConfigError(f"{self.name}: rate_mbps must be > 0")
        if self.one_way_latency_ms < 0:
            raise ConfigError(f"{self.name}: one_way_latency_ms must be >= 0")
        if not 0 <= self.plr_percent < 100:
            raise ConfigError(f"{self.name}: plr_percent must be in [0, 100)")
        if not 0 <= self.jitter_fraction < 1:
            raise ConfigError(f"{self.name}: jitter_fraction must be in [0, 1)")

    @property
    def rtt_ms(self) -> float:
        return 2.0 * self.one_way_latency_ms

    @property
    def is_wired(self) -> bool:
        return self.plr_percent == 0


@dataclass(frozen=True)
class TransportModel:
    kind: str = IDEAL
    mss_bytes: int = 1460

    def __post_init__(self):
        if self.kind not in (IDEAL, LOSS_THROTTLED):
            raise ConfigError(f"unknown transport kind {self.kind!r}")
        if self.mss_bytes <= 0:
            raise ConfigError("mss_bytes must be > 0")

    @classmethod
    def parse(cls, text: str) -> "TransportModel":
        try:
            return cls(_TRANSPORT_ALIASES[text.strip().lower()])
        except KeyError:
            raise ConfigError(f"unknown transport {text!r} (expected ideal or loss)") from None

    @property
    def short_name(self) -> str:
        return "loss" if self.kind == LOSS_THROTTLED else "ideal"


@dataclass(frozen=True)
class TransferResult:
    duration_ms: float
    bytes_sent: int
    bytes_received: int
    retransmissions: int = 0


@dataclass(frozen=True)
class Measurement:
    """One timed request/response sample."""

    scenario: str
    profile: str
    transport: str
    sample_index: int
    request_bytes: int
    response_bytes: int
    handshake_ms: float
    rtt_ms: float


def _load_builtin() -> dict[str, LinkProfile]:
    text = resources.files("evolve_vas").joinpath("data/profiles.json").read_text()
    return {p.name.lower(): p for p in _profiles_from_json(json.loads(text))}


def _profiles_from_json(items) -> list[LinkProfile]:
    fields = ("name", "rate_mbps", "one_way_latency_ms", "plr_percent", "jitter_fraction")
    out = []
    for i, item in enumerate(items):
        missing = [f for f in fields[:3] if f not in item]
        if missing:
            raise ConfigError(f"profile #{i}: missing {', '.join(missing)}")
        out.append(LinkProfile(**{f: item[f] for f in fields if f in item}))
    return out


BUILTIN_PROFILES = _load_builtin()
PLC_PROFILES = ("EVolve10", "EVolve100", "EVolve1G")
CELLULAR_PROFILES = ("4G", "5G")
ALL_PROFILES = PLC_PROFILES + CELLULAR_PROFILES


def get_profile(name: str) -> LinkProfile:
    """Look up a built-in profile, case-insensitively."""
    try:
        return BUILTIN_PROFILES[name.strip().lower()]
    except KeyError:
        known = ", ".join(p.name for p in BUILTIN_PROFILES.values())
        raise ConfigError(f"unknown profile {name!r} (known: {known})") from None


def load_profiles(path: str | Path) -> dict[str, LinkProfile]:
    """Read profiles from a JSON file: a list of objects with profile fields."""
    items = json.loads(Path(path).read_text())
    if isinstance(items, dict):
        items = items.get("profiles", [])
    return {p.name.lower(): p for p in _profiles_from_json(items)}


def effective_rate(profile: LinkProfile, model: TransportModel = TransportModel()) -> float:
    """Achievable rate in Mbps.

    Loss-throttled transport caps the line rate with MSS / (RTT * sqrt(p)).
    """
    if model.kind == IDEAL or profile.plr_percent == 0:
        return float(profile.rate_mbps)
    p = profile.plr_percent / 100.0
    rtt_s = profile.rtt_ms / 1000.0
    if rtt_s == 0:
        return float(profile.rate_mbps)
    cap = model.mss_bytes * 8 / (rtt_s * math.sqrt(p)) / 1e6
    return min(float(profile.rate_mbps), cap)


def serialization_ms(nbytes: int, rate_mbps: float) -> float:
    return nbytes * 8 / (rate_mbps * 1e6) * 1000.0


def model_transfer_time(profile: LinkProfile, model: TransportModel = TransportModel(),
                        request_bytes: int = KB, response_bytes: int = 0) -> float:
    """Expected duration (ms) of one request/response exchange, jitter excluded."""
    if request_bytes < 1:
        raise ValueError("request_bytes must be >= 1")
    if response_bytes < 0:
        raise ValueError("response_bytes must be >= 0")
    rate = effective_rate(profile, model)
    return profile.rtt_ms + serialization_ms(request_bytes + response_bytes, rate)


Responder = Callable[[bytes], bytes]


class EmulatedLink:
    """A bidirectional request/response byte channel with a simulated clock.

    ``taps`` are called as ``tap(direction, payload)`` for every payload that
    crosses the link (direction is ``"up"`` for client to server).  ``faults``
    are called the same way and may return a replacement payload, which is
    how tests inject corruption in flight.
    """

    def __init__(self, profile: LinkProfile, model: TransportModel | None = None, seed: int = 0):
        self.profile = profile
        self.model = model or TransportModel()
        self.seed = seed
        self.rate_mbps = effective_rate(profile, self.model)
        self._rng = np.random.default_rng(seed)
        self._lock = threading.Lock()
        self._cut_budget: int | None = None
        self.clock_ms = 0.0
        self.bytes_sent = 0
        self.bytes_received = 0
        self.exchanges = 0
        self.closed = False
        self.taps: list[Callable[[str, bytes], None]] = []
        self.faults: list[Callable[[str, bytes], bytes | None]] = []
        self.on_transfer: list[Callable[["EmulatedLink", TransferResult], None]] = []

    def __repr__(self):
        return f"EmulatedLink({self.profile.name}, {self.model.kind}, seed={self.seed})"

    def close(self):
        self.closed = True

    def cut_after(self, nbytes: int):
        """Drop the link once ``nbytes`` more upstream bytes have been delivered."""
        self._cut_budget = nbytes

    def _sample_one_way(self) -> float:
        j = self.profile.jitter_fraction
        u = self._rng.uniform(-j, j) if j else 0.0
        return self.profile.one_way_latency_ms * (1.0 + u)

    def _retransmissions(self, nbytes: int) -> int:
        if self.model.kind == IDEAL or self.profile.plr_percent == 0:
            return 0
        segments = math.ceil(nbytes / self.model.mss_bytes)
        return round(segments * self.profile.plr_percent / 100.0)

    def _time(self, request_bytes: int, response_bytes: int) -> TransferResult:
        d = self._sample_one_way()
        duration = 2.0 * d + serialization_ms(request_bytes + response_bytes, self.rate_mbps)
        result = TransferResult(duration, request_bytes, response_bytes,
                                self._retransmissions(request_bytes + response_bytes))
        self.clock_ms += duration
        self.bytes_sent += request_bytes
        self.bytes_received += response_bytes
        self.exchanges += 1
        return result

    def _check_cut(self, request_bytes: int):
        if self._cut_budget is None:
            return
        if request_bytes > self._cut_budget:
            delivered = self._cut_budget
            self.clock_ms += self._sample_one_way() + serialization_ms(delivered, self.rate_mbps)
            self.bytes_sent += delivered
            self.closed = True
            self._cut_budget = None
            raise LinkInterrupted(f"{self!r} dropped after {delivered} bytes", delivered)
        self._cut_budget -= request_bytes

    def transfer(self, request_bytes: int, response_bytes: int) -> TransferResult:
        """Time an exchange of the given sizes without carrying any payload."""
        with self._lock:
            if self.closed:
                raise LinkClosed(f"{self!r} is closed")
            self._check_cut(request_bytes)
            result = self._time(request_bytes, response_bytes)
        for hook in list(self.on_transfer):
            hook(self, result)
        return result

    def _pass(self, direction: str, payload: bytes) -> bytes:
        for fault in self.faults:
            replaced = fault(direction, payload)
            if replaced is not None:
                payload = replaced
        for tap in self.taps:
            tap(direction, payload)
        return payload

    def exchange(self, request: bytes, responder: Responder) -> tuple[bytes, TransferResult]:
        """Carry ``request`` to ``responder`` and its answer back."""
        if self.closed:
            raise LinkClosed(f"{self!r} is closed")
        with self._lock:
            self._check_cut(len(request))
        request = self._pass("up", request)
        response = responder(request)
        response = self._pass("down", response)
        with self._lock:
            if self.closed:
                raise LinkClosed(f"{self!r} closed during exchange")
            result = self._time(len(request), len(response))
        for hook in list(self.on_transfer):
            hook(self, result)
        return response, result


def open_link(profile: LinkProfile | str, model: TransportModel | str | None = None,
              seed: int = 0) -> EmulatedLink:
    if isinstance(profile, str):
        profile = get_profile(profile)
    if isinstance(model, str):
        model = TransportModel.parse(model)
    return EmulatedLink(profile, model, seed)


def rtt_benchmark(link: EmulatedLink, request_bytes: int = KB, response_bytes: int = KB,
                  samples: int = 300, scenario: str = "rtt") -> list[Measurement]:
    """Run ``samples`` sequential exchanges and record their emulated RTTs."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    out: list[Measurement] = []
    for i in range(samples):
        try:
            r = link.transfer(request_bytes, response_bytes)
        except LinkClosed as exc:
            raise BenchmarkAborted(f"link closed after {len(out)} samples", out) from exc
        out.append(Measurement(scenario, link.profile.name, link.model.short_name, i,
                               request_bytes, response_bytes, 0.0, r.duration_ms))
    return out


def rtts(measurements: Iterable[Measurement]) -> np.ndarray:
    return np.array([m.rtt_ms for m in measurements], dtype=float)
