"""In-process cloud endpoints reachable from the charger over cellular links.

Every request is a VAS-data frame whose body starts with the endpoint code
and an op byte; replies are VAS-data or error frames.  The only way to
reach an endpoint's handlers is :meth:`CloudConnection.call`, which carries
the frame over an :class:`~evolve_vas.link.EmulatedLink` and meters the
frame bodies in both directions.
"""
from __future__ import annotations

import logging
import os
import re
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from . import wire
from .crypto import Identity
from .errors import (
    CloudUnreachable,
    EvolveError,
    IntegrityError,
    LinkClosed,
    PaymentError,
    ProtocolError,
    UnavailableError,
)
from .link import EmulatedLink, LinkProfile, TransportModel, get_profile
from .session import raise_remote
from .wire import ErrorCode, MsgType

log = logging.getLogger(__name__)

IMAGE_REPO = "image_repo"
SIEM_BACKEND = "siem_backend"
PAYMENT_GATEWAY = "payment_gateway"
_CODES = {IMAGE_REPO: 0xC001, SIEM_BACKEND: 0xC002, PAYMENT_GATEWAY: 0xC003}

OP_GET_IMAGE = 1
OP_INGEST = 2
OP_FL_GET = 3
OP_SETTLE = 4
OP_NOTIFY = 0x10
OP_FL_NOTICE = 0x11

_KEY_RE = re.compile(r"^[A-Za-z0-9._-]+$")


class BlobStore:
    """Keyed blob storage, in memory or one file per key under a directory."""

    def __init__(self, root: str | Path | None = None, namespace: str = ""):
        self.root = Path(root) / namespace if root is not None else None
        self.namespace = namespace
        self._mem: dict[str, bytes] = {}
        self._lock = threading.Lock()
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def _check(key: str):
        if not _KEY_RE.match(key):
            raise ValueError(f"invalid blob key {key!r}")

    def _path(self, key: str) -> Path:
        self._check(key)
        return self.root / key

    def put(self, key: str, data: bytes):
        data = bytes(data)
        with self._lock:
            if self.root is None:
                self._check(key)
                self._mem[key] = data
                return
            path = self._path(key)
            tmp = path.with_name(f".{key}.{os.getpid()}.tmp")
            tmp.write_bytes(data)
            os.replace(tmp, path)

    def get(self, key: str) -> bytes:
        with self._lock:
            if self.root is None:
                try:
                    return self._mem[key]
                except KeyError:
                    raise KeyError(key) from None
            path = self._path(key)
            if not path.exists():
                raise KeyError(key)
            return path.read_bytes()

    def delete(self, key: str):
        with self._lock:
            if self.root is None:
                self._mem.pop(key, None)
            else:
                self._path(key).unlink(missing_ok=True)

    def __contains__(self, key: str) -> bool:
        if self.root is None:
            return key in self._mem
        return self._path(key).exists()

    def keys(self) -> list[str]:
        if self.root is None:
            return sorted(self._mem)
        return sorted(p.name for p in self.root.iterdir() if not p.name.startswith("."))

    def __len__(self):
        return len(self.keys())

    @property
    def total_bytes(self) -> int:
        if self.root is None:
            return sum(len(v) for v in self._mem.values())
        return sum(p.stat().st_size for p in self.root.iterdir() if not p.name.startswith("."))


@dataclass
class Meter:
    bytes_up: int = 0
    bytes_down: int = 0
    calls: int = 0

    @property
    def total(self) -> int:
        return self.bytes_up + self.bytes_down


_ERROR_CODES = {IntegrityError: ErrorCode.INTEGRITY, PaymentError: ErrorCode.PAYMENT,
                UnavailableError: ErrorCode.UNAVAILABLE, ProtocolError: ErrorCode.PROTOCOL}


def _error_frame(exc: Exception) -> bytes:
    for cls, code in _ERROR_CODES.items():
        if isinstance(exc, cls):
            return wire.encode_frame(MsgType.ERROR, wire.error_body(code, str(exc)))
    return wire.encode_frame(MsgType.ERROR, wire.error_body(ErrorCode.SERVICE, str(exc)))


def _request_frame(code: int, op: int, payload: bytes) -> bytes:
    body_len = 3 + len(payload)
    return b"".join((wire.HEADER.pack(body_len + 1, MsgType.VAS_DATA), struct.pack(">HB", code, op), payload))


def _parse_request(raw: bytes, code: int) -> tuple[int, memoryview]:
    frame_len, msg_type = wire.HEADER.unpack_from(raw)
    if msg_type != MsgType.VAS_DATA or frame_len != len(raw) - 4 or len(raw) < 8:
        raise ProtocolError("malformed cloud request frame")
    got, op = struct.unpack_from(">HB", raw, 5)
    if got != code:
        raise ProtocolError(f"frame for endpoint 0x{got:04x} sent to 0x{code:04x}")
    return op, memoryview(raw)[8:]


class CloudEndpoint:
    """Base endpoint: owns storage and a meter, dispatches ops to handlers."""

    def __init__(self, kind: str, link_profile: LinkProfile | str = "4G",
                 model: TransportModel | None = None, store: BlobStore | None = None, seed: int = 0):
        if kind not in _CODES:
            raise ValueError(f"unknown endpoint kind {kind!r}")
        self.kind = kind
        self.code = _CODES[kind]
        self.link_profile = get_profile(link_profile) if isinstance(link_profile, str) else link_profile
        self.model = model or TransportModel()
        self.store = store if store is not None else BlobStore(namespace=kind)
        self.meter = Meter()
        self.down = False
        self.seed = seed
        self.subscribers: list[tuple["CloudConnection", Callable[[int, bytes], bytes]]] = []
        self._handlers: dict[int, Callable[[memoryview], bytes]] = {}
        self._lock = threading.Lock()
        self._connections = 0

    def __repr__(self):
        return f"<{type(self).__name__} {self.kind} over {self.link_profile.name}>"

    def connect(self, seed: int | None = None) -> "CloudConnection":
        with self._lock:
            self._connections += 1
            n = self._connections
        link = EmulatedLink(self.link_profile, self.model, self.seed * 1000 + n if seed is None else seed)
        return CloudConnection(self, link)

    def subscribe(self, conn: "CloudConnection", handler: Callable[[int, bytes], bytes]):
        self.subscribers.append((conn, handler))

    def _serve(self, raw: bytes) -> bytes:
        try:
            op, payload = _parse_request(raw, self.code)
            handler = self._handlers.get(op)
            if handler is None:
                raise ProtocolError(f"{self.kind} has no op {op}")
            reply = handler(payload)
        except EvolveError as exc:
            return _error_frame(exc)
        return _request_frame(self.code, op, reply)

    def _push(self, op: int, payload: bytes) -> int:
        """Deliver a notification to every subscriber; returns how many acknowledged."""
        acked = 0
        for conn, handler in list(self.subscribers):
            try:
                conn.deliver(op, payload, handler)
                acked += 1
            except (CloudUnreachable, EvolveError) as exc:
                log.warning("%r: notification to subscriber failed: %s", self, exc)
        return acked


class CloudConnection:
    """The charger's end of one metered cellular link to an endpoint."""

    def __init__(self, endpoint: CloudEndpoint, link: EmulatedLink):
        self.endpoint = endpoint
        self.link = link

    def __repr__(self):
        return f"<CloudConnection {self.endpoint.kind} {self.link!r}>"

    def _meter(self, up: int, down: int):
        m = self.endpoint.meter
        with self.endpoint._lock:
            m.bytes_up += up
            m.bytes_down += down
            m.calls += 1

    def call(self, op: int, payload: bytes = b"") -> bytes:
        ep = self.endpoint
        if ep.down:
            raise CloudUnreachable(f"{ep.kind} is down")
        request = _request_frame(ep.code, op, payload)
        try:
            raw, _ = self.link.exchange(request, ep._serve)
        except LinkClosed as exc:
            raise CloudUnreachable(f"{ep.kind} link closed: {exc}") from exc
        self._meter(len(request) - wire.HEADER.size, len(raw) - wire.HEADER.size)
        if len(raw) < wire.HEADER.size:
            raise ProtocolError("truncated cloud reply")
        frame_len, msg_type = wire.HEADER.unpack_from(raw)
        if frame_len != len(raw) - 4:
            raise ProtocolError("cloud reply length mismatch")
        if msg_type == MsgType.ERROR:
            raise_remote(raw[5:])
        got_op, reply = _parse_request(raw, ep.code)
        if got_op != op:
            raise ProtocolError(f"cloud reply for op {got_op}, expected {op}")
        return bytes(reply)

    def deliver(self, op: int, payload: bytes, handler: Callable[[int, bytes], bytes]):
        """Cloud-initiated push; the charger side answers through ``handler``."""
        ep = self.endpoint
        if ep.down:
            raise CloudUnreachable(f"{ep.kind} is down")
        request = _request_frame(ep.code, op, payload)

        def charger_side(raw: bytes) -> bytes:
            try:
                got, body = _parse_request(raw, ep.code)
                return _request_frame(ep.code, got, handler(got, bytes(body)))
            except EvolveError as exc:
                return _error_frame(exc)

        try:
            raw, _ = self.link.exchange(request, charger_side)
        except LinkClosed as exc:
            raise CloudUnreachable(f"{ep.kind} link closed: {exc}") from exc
        self._meter(len(raw) - wire.HEADER.size, len(request) - wire.HEADER.size)
        frame = wire.decode_frame(raw)
        if frame.msg_type == MsgType.ERROR:
            raise_remote(frame.body)


class ImageRepository(CloudEndpoint):
    def __init__(self, publisher: Identity | None = None, **kw):
        super().__init__(IMAGE_REPO, **kw)
        self.publisher = publisher or Identity.generate("image-repo")
        self._handlers[OP_GET_IMAGE] = self._get_image

    @property
    def public_key(self) -> bytes:
        return self.publisher.public_key

    def _get_image(self, payload) -> bytes:
        key = bytes(payload).hex()
        if len(payload) != 32 or key not in self.store:
            raise UnavailableError(f"no image {key[:12]}")
        return self.store.get(key)

    def repo_put(self, manifest, image: bytes) -> bool:
        """Store a signed manifest and image; returns False for a repeat put."""
        if not manifest.matches(image):
            raise IntegrityError(f"image does not match {manifest!r}")
        key = manifest.image_hash.hex()
        mkey = f"{key}.manifest"
        if key in self.store and mkey in self.store and self.store.get(mkey) == manifest.encode():
            return False
        self.store.put(key, image)
        self.store.put(mkey, manifest.encode())
        self._push(OP_NOTIFY, manifest.encode())
        return True

    def publish(self, ecu_model: str, version, image: bytes):
        from .updates import sign_manifest

        manifest = sign_manifest(self.publisher, ecu_model, version, image)
        self.repo_put(manifest, image)
        return manifest


@dataclass
class IngestEntry:
    arrival_ms: float
    record: object
    nbytes: int


class SiemBackend(CloudEndpoint):
    def __init__(self, **kw):
        super().__init__(SIEM_BACKEND, **kw)
        self.ingested: list[IngestEntry] = []
        self.fl = None
        self._handlers[OP_INGEST] = self._ingest
        self._handlers[OP_FL_GET] = self._fl_get

    def _ingest(self, payload) -> bytes:
        from .siem import IngestRecord

        record = IngestRecord.decode(bytes(payload))
        n = len(self.ingested)
        self.store.put(f"ingest-{n:06d}", bytes(payload))
        self.ingested.append(IngestEntry(time.time() * 1000.0, record, len(payload)))
        return struct.pack(">Q", n)

    def _fl_get(self, payload) -> bytes:
        if self.fl is None:
            raise UnavailableError("no FL parameters published")
        return self.fl.encode()

    def publish_fl(self, params) -> int:
        self.fl = params
        return self._push(OP_FL_NOTICE, struct.pack(">I", params.model_version))


class PaymentGateway(CloudEndpoint):
    def __init__(self, **kw):
        super().__init__(PAYMENT_GATEWAY, **kw)
        self.settlements: dict[bytes, str] = {}
        self._handlers[OP_SETTLE] = self._settle

    def _settle(self, payload) -> bytes:
        from .payments import ReconciliationRecord

        record = ReconciliationRecord.decode(bytes(payload))
        if not record.verify_charger():
            raise PaymentError("charger signature on the record is invalid")
        if not record.verify_vehicle():
            raise PaymentError("vehicle signature on the record is invalid")
        digest = record.digest
        if digest not in self.settlements:
            sid = f"STL-{len(self.settlements) + 1:08d}"
            self.settlements[digest] = sid
            self.store.put(sid, bytes(payload))
        return self.settlements[digest].encode()


def siem_ingest(conn: CloudConnection, alerts, digest_or_batch: bytes, vehicle_id: str = "",
                record_count: int = 0, raw: bytes = b"") -> int:
    """Send one analysis result to the SIEM backend; returns its ingest index."""
    from .siem import IngestRecord

    rec = IngestRecord(vehicle_id, digest_or_batch, record_count, len(raw), tuple(alerts), raw)
    return struct.unpack(">Q", conn.call(OP_INGEST, rec.encode()))[0]


def gateway_settle(conn: CloudConnection, record) -> str:
    return conn.call(OP_SETTLE, record.encode()).decode()


@dataclass
class Cloud:
    """The three endpoints a charger talks to."""

    repo: ImageRepository
    siem: SiemBackend
    gateway: PaymentGateway
    extra: dict = field(default_factory=dict)

    @classmethod
    def create(cls, profile: LinkProfile | str = "4G", model: TransportModel | None = None,
               seed: int = 0, root: str | Path | None = None,
               publisher: Identity | None = None) -> "Cloud":
        def store(kind):
            return BlobStore(root, kind)

        kw = dict(link_profile=profile, model=model, seed=seed)
        return cls(ImageRepository(publisher, store=store(IMAGE_REPO), **kw),
                   SiemBackend(store=store(SIEM_BACKEND), **kw),
                   PaymentGateway(store=store(PAYMENT_GATEWAY), **kw))

    @property
    def endpoints(self) -> tuple[CloudEndpoint, ...]:
        return self.repo, self.siem, self.gateway
