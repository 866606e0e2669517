"""Collaborative intrusion detection over vehicle CAN logs.

Vehicles upload a window of CAN traffic to the charger, which runs rate
correlation rules locally, publishes alerts on the bus, and forwards a
digest (plus the raw batch for critical findings) to the cloud SIEM.  The
charger also caches the federated-learning parameters distributed by the
cloud so that vehicles can pull them over the fast PLC link.
"""
from __future__ import annotations

import json
import logging
import struct
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from . import bus as evbus
from .cloud import OP_FL_GET, OP_INGEST
from .crypto import sha256
from .errors import (
    CloudUnreachable,
    ConfigError,
    LinkClosed,
    ProtocolError,
    UploadInterrupted,
)
from .link import KB, MiB
from .wire import Reader, Writer

if TYPE_CHECKING:
    from .cloud import CloudConnection
    from .session import ServiceHandle

log = logging.getLogger(__name__)

ROLE = "vas_siem"
MAX_CAN_ID = 0x7FF
RECORD_FIXED = 11  # timestamp u64, id u16, dlc u8
WIRE_WIDTH = RECORD_FIXED + 8
CHUNK_SIZE = 16 * MiB
FILLER_ID = 0x7E8
BATCH_MAGIC = b"CANB"

CAN_DTYPE = np.dtype([("timestamp_us", "<u8"), ("can_id", "<u2"), ("dlc", "u1"), ("data", "u1", (8,))])
_WIRE_DTYPE = np.dtype([("timestamp_us", ">u8"), ("can_id", ">u2"), ("dlc", "u1"), ("data", "u1", (8,))])
assert _WIRE_DTYPE.itemsize == WIRE_WIDTH

OP_UPLOAD = 1
OP_PULL_FL = 2

INFO, WARNING, CRITICAL = "info", "warning", "critical"
_SEVERITY_CODES = {INFO: 0, WARNING: 1, CRITICAL: 2}
_SEVERITY_NAMES = {v: k for k, v in _SEVERITY_CODES.items()}

# Nominal per-identifier frequencies (Hz) of a passenger-car powertrain and
# body bus.  The generator rescales them to reach a requested batch size.
DEFAULT_BASE_RATES: dict[int, float] = {
    0x018: 400, 0x034: 400, 0x042: 400, 0x043: 400, 0x044: 400, 0x050: 400,
    0x080: 300, 0x081: 300, 0x0A0: 300, 0x0A1: 300, 0x0C0: 300, 0x0C1: 300,
    0x110: 200, 0x120: 200, 0x140: 200, 0x153: 200, 0x164: 200, 0x220: 200,
    0x130: 50, 0x260: 100, 0x2A0: 100, 0x2B0: 100, 0x316: 100, 0x329: 100,
    0x350: 100, 0x370: 100, 0x382: 100, 0x43F: 100, 0x440: 100,
    0x4B0: 50, 0x4B1: 50, 0x4F0: 50, 0x510: 50, 0x517: 50, 0x545: 50,
    0x587: 50, 0x5A0: 50, 0x5E4: 50, 0x690: 50,
    0x18F: 20, 0x1F1: 20, 0x2C0: 20, 0x5F0: 10, 0x680: 10, 0x6C0: 10,
}


@dataclass(frozen=True)
class CanRecord:
    timestamp_us: int
    can_id: int
    dlc: int
    data: bytes

    def __post_init__(self):
        if not 0 <= self.can_id <= MAX_CAN_ID:
            raise ValueError(f"CAN id 0x{self.can_id:x} exceeds 11 bits")
        if not 0 <= self.dlc <= 8 or len(self.data) != self.dlc:
            raise ValueError("dlc must be 0..8 and match the data length")

    def encode(self) -> bytes:
        return struct.pack(">QHB", self.timestamp_us, self.can_id, self.dlc) + self.data


def records_from(items: Iterable[CanRecord]) -> np.ndarray:
    items = list(items)
    arr = np.zeros(len(items), CAN_DTYPE)
    for i, r in enumerate(items):
        arr[i]["timestamp_us"] = r.timestamp_us
        arr[i]["can_id"] = r.can_id
        arr[i]["dlc"] = r.dlc
        arr[i]["data"][: r.dlc] = np.frombuffer(r.data, np.uint8)
    return arr


@dataclass
class LogBatch:
    vehicle_id: str
    window_seconds: float
    records: np.ndarray = field(default_factory=lambda: np.zeros(0, CAN_DTYPE))

    def __post_init__(self):
        if self.records.dtype != CAN_DTYPE:
            self.records = self.records.astype(CAN_DTYPE)
        if len(self.records):
            ts = self.records["timestamp_us"]
            if np.any(ts[1:] < ts[:-1]):
                raise ValueError("records must be time-ordered")
            if self.records["can_id"].max() > MAX_CAN_ID or self.records["dlc"].max() > 8:
                raise ValueError("record with an invalid id or dlc")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        for row in self.records:
            dlc = int(row["dlc"])
            yield CanRecord(int(row["timestamp_us"]), int(row["can_id"]), dlc, row["data"][:dlc].tobytes())

    def _header(self) -> bytes:
        return (Writer().raw(BATCH_MAGIC).text(self.vehicle_id)
                .u32(round(self.window_seconds * 1000)).u64(len(self.records)).getvalue())

    @property
    def encoded_size_bytes(self) -> int:
        return len(self._header()) + RECORD_FIXED * len(self.records) + int(self.records["dlc"].sum())

    def encode(self) -> bytes:
        n = len(self.records)
        rows = np.zeros(n, _WIRE_DTYPE)
        for name in ("timestamp_us", "can_id", "dlc", "data"):
            rows[name] = self.records[name]
        raw = rows.view(np.uint8).reshape(n, WIRE_WIDTH)
        keep = np.arange(WIRE_WIDTH)[None, :] < (RECORD_FIXED + rows["dlc"].astype(np.int64))[:, None]
        return self._header() + raw[keep].tobytes()

    @classmethod
    def decode(cls, data) -> "LogBatch":
        r = Reader(memoryview(data))
        if bytes(r.view(4)) != BATCH_MAGIC:
            raise ProtocolError("not a CAN log batch")
        vehicle_id = r.text()
        window = r.u32() / 1000.0
        n = r.u64()
        buf = np.frombuffer(data, np.uint8)
        offsets, end = _record_offsets(buf, r.offset, n)
        if end != len(buf):
            raise ProtocolError(f"{len(buf) - end} trailing bytes after CAN records")
        dlc = buf[offsets + 10] if n else np.zeros(0, np.uint8)
        rows = np.zeros((n, WIRE_WIDTH), np.uint8)
        widths = RECORD_FIXED + dlc.astype(np.int64)
        for col in range(WIRE_WIDTH):
            live = widths > col
            rows[live, col] = buf[offsets[live] + col]
        wire_rows = rows.reshape(-1).view(_WIRE_DTYPE)
        records = wire_rows.astype(CAN_DTYPE)
        try:
            return cls(vehicle_id, window, records)
        except ValueError as exc:
            raise ProtocolError(str(exc)) from exc

    def digest(self) -> bytes:
        return sha256(self.encode())

    def rate_hz(self, can_id: int, start_s: float = 0.0, end_s: float | None = None) -> float:
        end_s = self.window_seconds if end_s is None else end_s
        ts = self.records["timestamp_us"][self.records["can_id"] == can_id]
        hits = np.count_nonzero((ts >= start_s * 1e6) & (ts < end_s * 1e6))
        return hits / (end_s - start_s)


def _record_offsets(buf: np.ndarray, start: int, n: int) -> tuple[np.ndarray, int]:
    """Find record starts by speculating that runs of records carry 8 data bytes."""
    offsets = np.empty(n, np.int64)
    size = len(buf)
    i, pos, chunk = 0, start, 64
    while i < n:
        m = min(n - i, chunk)
        cand = pos + WIRE_WIDTH * np.arange(m, dtype=np.int64)
        fits = np.flatnonzero(cand + 10 >= size)
        limit = int(fits[0]) if fits.size else m
        bad = np.flatnonzero(buf[cand[:limit] + 10] != 8)
        k = int(bad[0]) if bad.size else limit
        offsets[i:i + k] = cand[:k]
        i += k
        pos += WIRE_WIDTH * k
        if k == m:
            chunk = min(chunk * 2, 1 << 16)
            continue
        if pos + 10 >= size:
            raise ProtocolError("truncated CAN record")
        dlc = int(buf[pos + 10])
        if dlc > 8:
            raise ProtocolError(f"CAN record dlc {dlc} > 8")
        offsets[i] = pos
        i += 1
        pos += RECORD_FIXED + dlc
        chunk = 64
    if pos > size:
        raise ProtocolError("truncated CAN record")
    return offsets, pos


@dataclass(frozen=True)
class Flood:
    """Replace ``can_id``'s traffic by ``rate_hz`` frames per second."""

    can_id: int
    rate_hz: float
    start_s: float = 0.0
    end_s: float | None = None


def generate_synthetic_logs(seed: int, window_seconds: float, target_bytes: int,
                            floods: Sequence[Flood] = (), vehicle_id: str = "vehicle-0",
                            base_rates: dict[int, float] | None = None) -> LogBatch:
    """Periodic CAN traffic whose encoding is within 1% of ``target_bytes``.

    Base rates are scaled uniformly; flooded identifiers keep their
    requested rate inside the flood interval.
    """
    rng = np.random.default_rng(seed)
    rates = dict(DEFAULT_BASE_RATES if base_rates is None else base_rates)
    window_us = int(round(window_seconds * 1e6))
    if window_us <= 0:
        raise ConfigError("window_seconds must be positive")
    header = len(LogBatch(vehicle_id, window_seconds)._header())

    times, ids = [], []

    def periodic(can_id, count, lo_us, hi_us):
        if count <= 0:
            return
        period = (hi_us - lo_us) / count
        t = lo_us + (np.arange(count) + rng.uniform(0, 1)) * period
        t += rng.normal(0, 0.01 * period, count)
        times.append(np.clip(np.round(t), lo_us, hi_us - 1).astype(np.int64))
        ids.append(np.full(count, can_id, np.int64))

    flood_bytes = 0
    spans = {}
    for f in floods:
        lo = int(f.start_s * 1e6)
        hi = window_us if f.end_s is None else int(f.end_s * 1e6)
        if not 0 <= lo < hi <= window_us:
            raise ConfigError(f"flood interval for 0x{f.can_id:x} outside the window")
        count = int(round(f.rate_hz * (hi - lo) / 1e6))
        periodic(f.can_id, count, lo, hi)
        flood_bytes += count * WIRE_WIDTH
        spans.setdefault(f.can_id, []).append((lo, hi))
    budget = target_bytes - header - flood_bytes
    if budget < 0:
        raise ConfigError("floods alone exceed the target size")

    # time each base id is active once flood intervals are cut out
    active = {}
    for can_id in rates:
        cut = sum(hi - lo for lo, hi in spans.get(can_id, ()))
        active[can_id] = max(window_us - cut, 0)
    nominal = sum(rates[c] * active[c] / 1e6 for c in rates) * WIRE_WIDTH
    scale = budget / nominal if nominal else 0.0
    used = 0
    for can_id, rate in rates.items():
        gaps, cursor = [], 0
        for lo, hi in sorted(spans.get(can_id, ())):
            if lo > cursor:
                gaps.append((cursor, lo))
            cursor = max(cursor, hi)
        if cursor < window_us:
            gaps.append((cursor, window_us))
        for lo, hi in gaps:
            count = int(rate * scale * (hi - lo) / 1e6)
            periodic(can_id, count, lo, hi)
            used += count * WIRE_WIDTH

    deficit = budget - used
    n_fill, last_dlc = deficit // WIRE_WIDTH, None
    rest = deficit - n_fill * WIRE_WIDTH
    if rest >= RECORD_FIXED:
        last_dlc = rest - RECORD_FIXED
    fill_count = n_fill + (last_dlc is not None)
    if fill_count:
        times.append(rng.integers(0, window_us, fill_count))
        ids.append(np.full(fill_count, FILLER_ID, np.int64))

    t = np.concatenate(times) if times else np.zeros(0, np.int64)
    c = np.concatenate(ids) if ids else np.zeros(0, np.int64)
    records = np.zeros(len(t), CAN_DTYPE)
    records["timestamp_us"] = t
    records["can_id"] = c
    records["dlc"] = 8
    if last_dlc is not None:
        records["dlc"][len(t) - 1] = last_dlc
    records["data"] = rng.integers(0, 256, (len(t), 8), dtype=np.uint8)
    records["data"][np.arange(8)[None, :] >= records["dlc"][:, None]] = 0
    order = np.lexsort((records["can_id"], records["timestamp_us"]))
    return LogBatch(vehicle_id, window_seconds, records[order])


# detection

@dataclass(frozen=True)
class CorrelationRule:
    rule_id: str
    can_id: int
    max_rate_hz: float
    window_ms: float = 1000.0

    def __post_init__(self):
        if self.max_rate_hz <= 0 or self.window_ms <= 0:
            raise ConfigError(f"rule {self.rule_id}: rate and window must be positive")


def load_rules(path: str | Path) -> list[CorrelationRule]:
    items = json.loads(Path(path).read_text())
    try:
        return [CorrelationRule(i["rule_id"], int(str(i["can_id"]), 0), float(i["max_rate_hz"]),
                                float(i.get("window_ms", 1000.0))) for i in items]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed rule file {path}: {exc}") from exc


@dataclass(frozen=True)
class Alert:
    rule_id: str
    vehicle_id: str
    window: tuple[int, int]  # microseconds
    observed_rate_hz: float
    severity: str
    can_id: int = 0

    def write(self, w: Writer):
        w.text(self.rule_id).text(self.vehicle_id).u64(self.window[0]).u64(self.window[1])
        w.f64(self.observed_rate_hz).u8(_SEVERITY_CODES[self.severity]).u16(self.can_id)

    @classmethod
    def read(cls, r: Reader) -> "Alert":
        rule, vehicle, lo, hi = r.text(), r.text(), r.u64(), r.u64()
        rate, sev, can_id = r.f64(), r.u8(), r.u16()
        if sev not in _SEVERITY_NAMES:
            raise ProtocolError(f"unknown severity code {sev}")
        return cls(rule, vehicle, (lo, hi), rate, _SEVERITY_NAMES[sev], can_id)

    def encode(self) -> bytes:
        w = Writer()
        self.write(w)
        return w.getvalue()


def severity_for(observed: float, limit: float) -> str:
    ratio = observed / limit
    if ratio >= 2.0:
        return CRITICAL
    if ratio >= 1.5:
        return WARNING
    return INFO


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Inclusive (start, end) index pairs of the True runs in ``mask``."""
    if not mask.any():
        return []
    edges = np.diff(np.concatenate(([0], mask.astype(np.int8), [0])))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1) - 1
    return list(zip(starts.tolist(), ends.tolist()))


def sliding_rates(ts_us: np.ndarray, window_ms: float) -> np.ndarray:
    """Rate (Hz) at each record over the trailing window (t - w, t]."""
    w = window_ms * 1000.0
    lo = np.searchsorted(ts_us, ts_us - w, side="right")
    counts = np.arange(len(ts_us)) - lo + 1
    return counts / (window_ms / 1000.0)


def analyze_logs(batch: LogBatch, rules: Iterable[CorrelationRule]) -> list[Alert]:
    """One alert per maximal run of records whose trailing rate breaks a rule."""
    alerts = []
    ts_all = batch.records["timestamp_us"].astype(np.float64)
    ids = batch.records["can_id"]
    for rule in rules:
        ts = ts_all[ids == rule.can_id]
        if not len(ts):
            continue
        rates = sliding_rates(ts, rule.window_ms)
        for a, b in _runs(rates > rule.max_rate_hz):
            peak = float(rates[a:b + 1].max())
            lo = max(int(ts[a] - rule.window_ms * 1000), 0)
            alerts.append(Alert(rule.rule_id, batch.vehicle_id, (lo, int(ts[b])), peak,
                                severity_for(peak, rule.max_rate_hz), rule.can_id))
    alerts.sort(key=lambda a: (a.window[0], a.rule_id))
    return alerts


class InterArrivalDetector:
    """Flags identifiers whose inter-arrival times shrink far below baseline.

    Fitted on clean traffic; a tumbling window is anomalous when the mean
    gap of its k frames sits more than ``z_threshold`` standard errors
    below the baseline mean.
    """

    def __init__(self, z_threshold: float = 8.0, window_ms: float = 1000.0):
        self.z_threshold = z_threshold
        self.window_ms = window_ms
        self.baseline: dict[int, tuple[float, float]] = {}

    def fit(self, batch: LogBatch) -> "InterArrivalDetector":
        recs = batch.records
        for can_id in np.unique(recs["can_id"]):
            ts = recs["timestamp_us"][recs["can_id"] == can_id].astype(np.float64)
            if len(ts) < 3:
                continue
            gaps = np.diff(ts)
            self.baseline[int(can_id)] = (float(gaps.mean()), float(gaps.std()) or 1.0)
        return self

    def score(self, batch: LogBatch) -> list[Alert]:
        recs = batch.records
        w_us = self.window_ms * 1000.0
        alerts = []
        for can_id, (mu, sigma) in sorted(self.baseline.items()):
            ts = recs["timestamp_us"][recs["can_id"] == can_id].astype(np.float64)
            if len(ts) < 2:
                continue
            gaps = np.diff(ts)
            bucket = (ts[1:] // w_us).astype(np.int64)
            n_buckets = int(bucket.max()) + 1
            k = np.bincount(bucket, minlength=n_buckets)
            total = np.bincount(bucket, weights=gaps, minlength=n_buckets)
            with np.errstate(invalid="ignore", divide="ignore"):
                mean = total / k
                z = (mu - mean) / (sigma / np.sqrt(k))
            flagged = (k >= 2) & (z > self.z_threshold)
            for a, b in _runs(flagged):
                peak = float(k[a:b + 1].max()) / (self.window_ms / 1000.0)
                baseline_hz = 1e6 / mu
                alerts.append(Alert(f"zscore-0x{can_id:03x}", batch.vehicle_id,
                                    (int(a * w_us), int((b + 1) * w_us)), peak,
                                    severity_for(peak, baseline_hz), can_id))
        return alerts


# federated learning parameters

@dataclass(frozen=True)
class FlParameters:
    model_version: int
    blob: bytes

    def encode(self) -> bytes:
        return struct.pack(">II", self.model_version, len(self.blob)) + self.blob

    @classmethod
    def decode(cls, data) -> "FlParameters":
        if len(data) < 8:
            raise ProtocolError("truncated FL parameters")
        version, size = struct.unpack_from(">II", data)
        if len(data) != 8 + size:
            raise ProtocolError("FL parameter length mismatch")
        return cls(version, bytes(data[8:]))


def synthetic_fl_parameters(version: int, size: int = MiB, seed: int = 0) -> FlParameters:
    weights = np.random.default_rng(seed + version).standard_normal(size // 4).astype("<f4")
    return FlParameters(version, weights.tobytes().ljust(size, b"\0"))


# charger side

@dataclass
class _Upload:
    total: int
    parts: list = field(default_factory=list)
    received: int = 0


@dataclass
class IngestRecord:
    """What the charger forwards to the cloud SIEM per analysed batch."""

    vehicle_id: str
    digest: bytes
    record_count: int
    encoded_size: int
    alerts: tuple[Alert, ...] = ()
    raw_batch: bytes = b""

    def encode(self) -> bytes:
        w = Writer().text(self.vehicle_id).raw(self.digest).u64(self.record_count).u64(self.encoded_size)
        w.u16(len(self.alerts))
        for a in self.alerts:
            a.write(w)
        return w.blob(self.raw_batch).getvalue()

    @classmethod
    def decode(cls, data) -> "IngestRecord":
        r = Reader(data)
        vehicle, digest, count, size = r.text(), r.raw(32), r.u64(), r.u64()
        alerts = tuple(Alert.read(r) for _ in range(r.u16()))
        raw = r.blob()
        r.done()
        return cls(vehicle, digest, count, size, alerts, raw)


class SiemService:
    """Charger half of the SIEM VAS: upload reassembly, analysis, forwarding."""

    def __init__(self, bus: evbus.EventBus, backend: "CloudConnection | None" = None,
                 rules: Sequence[CorrelationRule] = (), detector: InterArrivalDetector | None = None,
                 job_limit: int = 4, retry_limit: int = 32):
        self.bus = bus
        self.backend = backend
        self.rules = list(rules)
        self.detector = detector
        self.jobs: deque[bytes] = deque()
        self.job_limit = job_limit
        self.jobs_dropped = 0
        self.retry: deque[IngestRecord] = deque()
        self.retry_limit = retry_limit
        self.retry_dropped = 0
        self.fl_cache: FlParameters | None = None
        self.fl_latest = 0
        self._uploads: dict[bytes, _Upload] = {}

    def handle(self, state, op: int, args) -> bytes:
        if op == OP_UPLOAD:
            return self._upload_chunk(args)
        if op == OP_PULL_FL:
            return self.current_fl().encode()
        raise ProtocolError(f"unknown SIEM op {op}")

    def _upload_chunk(self, args) -> bytes:
        if len(args) < 32:
            raise ProtocolError("short upload chunk header")
        upload_id = bytes(args[:16])
        offset, total = struct.unpack_from(">QQ", args, 16)
        chunk = args[32:]
        up = self._uploads.get(upload_id)
        if up is None or up.total != total:
            up = self._uploads[upload_id] = _Upload(total)
        if offset == up.received and offset + len(chunk) <= total:
            up.parts.append(chunk)
            up.received += len(chunk)
        if up.received == total:
            del self._uploads[upload_id]
            self._enqueue(b"".join(up.parts) if len(up.parts) != 1 else up.parts[0])
        return struct.pack(">BQ", 0, up.received)

    def partial(self, upload_id: bytes) -> int:
        up = self._uploads.get(upload_id)
        return up.received if up else 0

    def _enqueue(self, encoded: bytes):
        if self.job_limit == 0:
            return
        if len(self.jobs) >= self.job_limit:
            self.jobs.popleft()
            self.jobs_dropped += 1
            log.warning("SIEM job queue full; dropped the oldest batch")
        self.jobs.append(encoded)

    def process_jobs(self) -> list[tuple[LogBatch, list[Alert]]]:
        done = []
        while self.jobs:
            encoded = self.jobs.popleft()
            batch = LogBatch.decode(encoded)
            alerts = self.analyze(batch)
            self.forward(batch, alerts, encoded)
            done.append((batch, alerts))
        return done

    def analyze(self, batch: LogBatch) -> list[Alert]:
        alerts = analyze_logs(batch, self.rules)
        if self.detector is not None:
            alerts += self.detector.score(batch)
        for a in alerts:
            level = evbus.CRITICAL if a.severity == CRITICAL else evbus.STANDARD
            self.bus.publish(ROLE, evbus.SIEM_ALERTS, a.encode(), level)
        return alerts

    def forward(self, batch: LogBatch, alerts: Sequence[Alert], encoded: bytes | None = None):
        encoded = batch.encode() if encoded is None else encoded
        raw = encoded if any(a.severity == CRITICAL for a in alerts) else b""
        record = IngestRecord(batch.vehicle_id, sha256(encoded), len(batch), len(encoded), tuple(alerts), raw)
        self.retry.append(record)
        while len(self.retry) > self.retry_limit:
            self.retry.popleft()
            self.retry_dropped += 1
            log.warning("SIEM retry queue full; dropped the oldest digest")
        self.flush()

    def flush(self) -> int:
        """Send queued digests to the cloud; returns how many were accepted."""
        sent = 0
        while self.retry and self.backend is not None:
            try:
                self.backend.call(OP_INGEST, self.retry[0].encode())
            except CloudUnreachable as exc:
                log.info("cloud SIEM unreachable, %d digests queued: %s", len(self.retry), exc)
                break
            self.retry.popleft()
            sent += 1
        return sent

    def on_fl_notice(self, version: int):
        self.fl_latest = max(self.fl_latest, version)

    def refresh_fl(self) -> FlParameters:
        if self.backend is None:
            raise CloudUnreachable("no cloud SIEM connection")
        params = FlParameters.decode(self.backend.call(OP_FL_GET, b""))
        self.fl_cache = params
        self.fl_latest = max(self.fl_latest, params.model_version)
        return params

    def current_fl(self) -> FlParameters:
        if self.fl_cache is None or self.fl_cache.model_version < self.fl_latest:
            try:
                return self.refresh_fl()
            except CloudUnreachable:
                if self.fl_cache is None:
                    raise
                log.warning("serving stale FL parameters v%d", self.fl_cache.model_version)
        return self.fl_cache


# vehicle side

def upload_logs(handle: "ServiceHandle", batch: LogBatch | bytes, chunk_size: int = CHUNK_SIZE,
                resume_offset: int = 0) -> int:
    """Upload a batch in chunks; returns the acknowledged byte count.

    A dropped link raises :class:`UploadInterrupted` carrying the last
    acknowledged offset so a new session can resume from there.
    """
    encoded = batch.encode() if isinstance(batch, LogBatch) else bytes(batch)
    upload_id = sha256(encoded)[:16]
    total = len(encoded)
    view = memoryview(encoded)
    acked = resume_offset
    while True:
        chunk = view[acked:acked + chunk_size]
        header = upload_id + struct.pack(">QQ", acked, total)
        try:
            reply = handle.request(OP_UPLOAD, header + chunk)
        except LinkClosed as exc:
            raise UploadInterrupted(f"upload interrupted at offset {acked}", acked, upload_id) from exc
        except Exception as exc:
            if isinstance(exc.__cause__, LinkClosed):
                raise UploadInterrupted(f"upload interrupted at offset {acked}", acked, upload_id) from exc
            raise
        status, received = struct.unpack(">BQ", reply[:9])
        if status != 0:
            raise ProtocolError(f"upload rejected with status {status}")
        acked = received
        if acked >= total:
            return acked


def pull_fl_parameters(handle: "ServiceHandle", pad_to: int | None = KB) -> FlParameters:
    return FlParameters.decode(handle.request(OP_PULL_FL, b"", pad_to=pad_to))
