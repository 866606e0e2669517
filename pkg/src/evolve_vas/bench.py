"""Benchmark scenarios, CSV export and summary statistics.

Each scenario drives the full protocol path (SDP, handshake, SNP, service
selection, VAS exchange) over an emulated link and records one
:class:`~evolve_vas.link.Measurement` per sample.  Request and response
byte counts are the bytes that actually crossed the vehicle link.
"""
from __future__ import annotations

import csv
import io
import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import wire
from .charger import OP_STATUS
from .errors import ConfigError, ProtocolError
from .link import ALL_PROFILES, KB, MB, Measurement, TransportModel, get_profile, model_transfer_time
from .payments import MicropaymentClient, Tariff, naive_payment
from .platform import Platform, build_platform
from .siem import generate_synthetic_logs, pull_fl_parameters, synthetic_fl_parameters, upload_logs
from .updates import request_update

log = logging.getLogger(__name__)

SCENARIOS = ("stability", "updates", "siem_upload", "fl_pull", "naive_payment", "micropayments")
CSV_HEADER = ("scenario", "profile", "transport", "sample", "request_bytes", "response_bytes",
              "handshake_ms", "rtt_ms")
UPDATE_ECU = "ecu-main"
DEFAULT_BURSTS = (1, 10, 100)
BENCH_TARIFF = Tariff(price_per_wh=5, burst_wh=100)


class CsvFormatError(ConfigError):
    """A measurements file row could not be parsed."""


@dataclass(frozen=True)
class Scenario:
    name: str
    profile: str
    transport: str = "ideal"
    samples: int = 300
    seed: int = 0
    extra: dict = field(default_factory=dict, hash=False, compare=False)

    def __post_init__(self):
        if self.name not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.name!r} (expected one of {', '.join(SCENARIOS)})")
        get_profile(self.profile)
        TransportModel.parse(self.transport)
        if self.samples < 1:
            raise ConfigError("samples must be >= 1")


class _Meter:
    """Snapshot of a link's clock and byte counters."""

    def __init__(self, link):
        self.link = link
        self.clock, self.up, self.down = link.clock_ms, link.bytes_sent, link.bytes_received

    def delta(self) -> tuple[float, int, int]:
        l = self.link
        return l.clock_ms - self.clock, l.bytes_sent - self.up, l.bytes_received - self.down


def _payload(seed: int, size: int) -> bytes:
    return np.random.default_rng(seed).bytes(size)


def _prepare(s: Scenario, platform: Platform) -> tuple[tuple[int, ...], dict]:
    """Per-scenario setup outside the timed region; returns (services, context)."""
    ctx: dict = {}
    if s.name == "stability":
        return (), ctx
    if s.name == "updates":
        size = int(s.extra.get("image_bytes", 100 * MB))
        platform.cloud.repo.publish(UPDATE_ECU, "1.2.0", _payload(s.seed, size))
        platform.charger.prefetch(UPDATE_ECU)
        return (wire.UPDATES,), ctx
    if s.name == "siem_upload":
        size = int(s.extra.get("log_bytes", 100 * MB))
        batch = generate_synthetic_logs(s.seed, 600.0, size)
        ctx["encoded"] = batch.encode()
        return (wire.SIEM,), ctx
    if s.name == "fl_pull":
        size = int(s.extra.get("fl_bytes", 1024 * 1024))
        platform.cloud.siem.publish_fl(synthetic_fl_parameters(1, size, s.seed))
        return (wire.SIEM,), ctx
    if s.name == "naive_payment":
        return (wire.PAYMENTS,), ctx
    return (wire.PAYMENTS,), ctx


def _sample(s: Scenario, handles, ctx, first: bool):
    if s.name == "stability":
        handles[wire.CHARGING].request(OP_STATUS, b"", pad_to=KB, reply_pad=KB)
    elif s.name == "updates":
        found = request_update(handles[wire.UPDATES], UPDATE_ECU, (1, 0, 0))
        if found is None:
            raise ProtocolError("charger reported no update")
        if first and not found[0].matches(found[1]):
            raise ProtocolError("served image does not match its manifest")
    elif s.name == "siem_upload":
        upload_logs(handles[wire.SIEM], ctx["encoded"])
    elif s.name == "fl_pull":
        pull_fl_parameters(handles[wire.SIEM])
    elif s.name == "naive_payment":
        naive_payment(handles[wire.PAYMENTS], 100, energy_wh=20)


def run_scenario(s: Scenario) -> list[Measurement]:
    platform = build_platform(s.profile, s.transport, s.seed, siem_job_limit=0)
    services, ctx = _prepare(s, platform)
    profile = platform.link.profile.name
    transport = platform.link.model.short_name
    reconnect = bool(s.extra.get("reconnect", False))
    out: list[Measurement] = []

    def connect():
        m = _Meter(platform.link)
        session, handles = platform.connect(services)
        return session, handles, m.delta()[0]

    session, handles, handshake = connect()
    if s.name == "micropayments":
        bursts = [int(b) for b in s.extra.get("bursts", DEFAULT_BURSTS)]
        index = 0
        for _ in range(s.samples):
            for n in bursts:
                if reconnect and index:
                    session.close()
                    session, handles, handshake = connect()
                client = MicropaymentClient(handles[wire.PAYMENTS])
                client.start(BENCH_TARIFF)
                m = _Meter(platform.link)
                for _ in range(n):
                    client.burst()
                elapsed, up, down = m.delta()
                client.reconcile()
                out.append(Measurement(s.name, profile, transport, index, up, down, handshake, elapsed))
                index += 1
        session.close()
        return out

    for i in range(s.samples):
        if reconnect and i:
            session.close()
            session, handles, handshake = connect()
        m = _Meter(platform.link)
        _sample(s, handles, ctx, i == 0)
        elapsed, up, down = m.delta()
        out.append(Measurement(s.name, profile, transport, i, up, down, handshake, elapsed))
    session.close()
    return out


def run_many(scenarios: Sequence[Scenario], parallel: bool = False) -> list[Measurement]:
    if not parallel or len(scenarios) < 2:
        return [m for s in scenarios for m in run_scenario(s)]
    with ThreadPoolExecutor(max_workers=len(scenarios)) as pool:
        return [m for batch in pool.map(run_scenario, scenarios) for m in batch]


def micropayment_latency(profile, model: TransportModel | str = "ideal", n_bursts: int = 1,
                         seed: int = 0) -> float:
    """Emulated time (ms) of ``n_bursts`` padded 1 KB bursts on one session."""
    if n_bursts < 0:
        raise ValueError("n_bursts must be >= 0")
    platform = build_platform(profile, model, seed)
    session, handles = platform.connect((wire.PAYMENTS,))
    client = MicropaymentClient(handles[wire.PAYMENTS])
    client.start(BENCH_TARIFF)
    m = _Meter(platform.link)
    for _ in range(n_bursts):
        client.burst()
    elapsed = m.delta()[0]
    session.close()
    return elapsed


def oracle(profile, transport: TransportModel | str = "ideal", request_bytes: int = KB,
           response_bytes: int = KB) -> float:
    p = get_profile(profile) if isinstance(profile, str) else profile
    t = TransportModel.parse(transport) if isinstance(transport, str) else transport
    return model_transfer_time(p, t, request_bytes, response_bytes)


# CSV

def write_csv(measurements: Iterable[Measurement], path: str | Path | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for m in measurements:
        w.writerow((m.scenario, m.profile, m.transport, m.sample_index, m.request_bytes,
                    m.response_bytes, repr(float(m.handshake_ms)), repr(float(m.rtt_ms))))
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def parse_csv(text: str, source: str = "<csv>") -> list[Measurement]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        return []
    if tuple(rows[0]) != CSV_HEADER:
        raise CsvFormatError(f"{source}:1: expected header {','.join(CSV_HEADER)}")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(CSV_HEADER):
            raise CsvFormatError(f"{source}:{lineno}: expected {len(CSV_HEADER)} fields, got {len(row)}")
        try:
            m = Measurement(row[0], row[1], row[2], int(row[3]), int(row[4]), int(row[5]),
                            float(row[6]), float(row[7]))
        except ValueError as exc:
            raise CsvFormatError(f"{source}:{lineno}: {exc}") from None
        if not m.rtt_ms > 0:
            raise CsvFormatError(f"{source}:{lineno}: rtt_ms must be > 0")
        out.append(m)
    return out


def read_csv(path: str | Path) -> list[Measurement]:
    return parse_csv(Path(path).read_text(), str(path))


# summaries

@dataclass(frozen=True)
class SummaryRow:
    scenario: str
    profile: str
    transport: str
    request_bytes: int
    response_bytes: int
    n: int
    mean_ms: float
    p50_ms: float
    p95_ms: float
    stdev_ms: float
    coefficient_of_variation: float


def _profile_rank(name: str) -> tuple[int, str]:
    lowered = [p.lower() for p in ALL_PROFILES]
    return (lowered.index(name.lower()), "") if name.lower() in lowered else (len(lowered), name)


def summarize(measurements: Iterable[Measurement]) -> list[SummaryRow]:
    """Group by (scenario, profile, transport, request size); population stdev."""
    groups: dict[tuple, list[Measurement]] = defaultdict(list)
    for m in measurements:
        groups[(m.scenario, m.profile, m.transport, m.request_bytes)].append(m)
    rows = []
    for (scenario, profile, transport, req), ms in groups.items():
        x = np.array([m.rtt_ms for m in ms], dtype=float)
        mean = float(x.mean())
        stdev = float(x.std())
        rows.append(SummaryRow(scenario, profile, transport, req,
                               int(round(np.mean([m.response_bytes for m in ms]))), len(x), mean,
                               float(np.percentile(x, 50)), float(np.percentile(x, 95)), stdev,
                               stdev / mean if mean else 0.0))
    scen_rank = {n: i for i, n in enumerate(SCENARIOS)}
    rows.sort(key=lambda r: (scen_rank.get(r.scenario, len(SCENARIOS)), r.scenario,
                             _profile_rank(r.profile), r.transport, r.request_bytes))
    return rows


def format_table(rows: Sequence[SummaryRow]) -> str:
    head = ("scenario", "profile", "transport", "req_bytes", "resp_bytes", "n",
            "mean_ms", "p50_ms", "p95_ms", "stdev_ms", "cv")
    body = [(r.scenario, r.profile, r.transport, str(r.request_bytes), str(r.response_bytes), str(r.n),
             f"{r.mean_ms:.3f}", f"{r.p50_ms:.3f}", f"{r.p95_ms:.3f}", f"{r.stdev_ms:.3f}",
             f"{r.coefficient_of_variation:.4f}") for r in rows]
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(head)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(head, widths))]
    lines += ["  ".join(c.rjust(w) if i >= 3 else c.ljust(w) for i, (c, w) in enumerate(zip(b, widths)))
              for b in body]
    return "\n".join(lines) + "\n"


def report(paths: Sequence[str | Path]) -> tuple[list[SummaryRow], str]:
    measurements = [m for p in paths for m in read_csv(p)]
    rows = summarize(measurements)
    return rows, format_table(rows)


def write_gnuplot(rows: Sequence[SummaryRow], path: str | Path) -> None:
    """One gnuplot data block per scenario, separated by two blank lines."""
    out = []
    for i, scenario in enumerate(dict.fromkeys(r.scenario for r in rows)):
        if i:
            out += ["", ""]
        out.append(f"# {scenario}: profile transport request_bytes mean_ms p50_ms p95_ms stdev_ms cv")
        for r in rows:
            if r.scenario == scenario:
                out.append(f"{r.profile} {r.transport} {r.request_bytes} {r.mean_ms:.6f} {r.p50_ms:.6f} "
                           f"{r.p95_ms:.6f} {r.stdev_ms:.6f} {r.coefficient_of_variation:.6f}")
    Path(path).write_text("\n".join(out) + "\n")
