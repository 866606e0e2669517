"""Charger (SECC) side: discovery answers, handshake, SNP and VAS dispatch."""
from __future__ import annotations

import logging
import os
import struct
import threading
from dataclasses import dataclass, field
from typing import Iterable

from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from . import bus as evbus
from . import wire
from .cloud import OP_FL_NOTICE, OP_NOTIFY, Cloud
from .crypto import Identity, sha256, verify
from .errors import (
    AuthenticationError,
    ChannelError,
    CloudUnreachable,
    ConfigError,
    DisputeError,
    EvolveError,
    FetchError,
    IntegrityError,
    OrderingError,
    PaymentError,
    PaymentStateError,
    ProtocolError,
    SelectionError,
    SignatureError,
    UnavailableError,
)
from .payments import PaymentService
from .session import (
    _DONE_NONCE,
    NONCE_SIZE,
    SESSION_ID_SIZE,
    SecureChannel,
    _raw,
    charger_transcript,
    derive_keys,
    vehicle_transcript,
)
from .siem import CorrelationRule, SiemService
from .updates import UpdateCache, UpdateService
from .wire import CHARGING, CRITICAL, PAYMENTS, SIEM, UPDATES, ErrorCode, MsgType, ServiceDescriptor

log = logging.getLogger(__name__)

OP_STATUS = 1
CHARGING_ROLE = "charging"


class ChargingService:
    """The critical Layer-2 charging stack, reduced to a status endpoint."""

    def __init__(self, bus: evbus.EventBus):
        self.bus = bus
        self.energy_wh = 0

    def started(self, state):
        self.bus.publish(CHARGING_ROLE, evbus.CHARGING_STATE, b"started:" + state.session_id, evbus.CRITICAL)

    def handle(self, state, op: int, args) -> bytes:
        if op != OP_STATUS:
            raise ProtocolError(f"unknown charging op {op}")
        return struct.pack(">BQ", 1, self.energy_wh)


@dataclass
class ChargerSession:
    """Server-side state of one established session."""

    session_id: bytes
    vehicle_key: bytes
    selected: list[int] = field(default_factory=list)
    payment: object = None


_ERROR_MAP = (
    (AuthenticationError, ErrorCode.AUTHENTICATION),
    (OrderingError, ErrorCode.ORDERING),
    (SelectionError, ErrorCode.SELECTION),
    (DisputeError, ErrorCode.PAYMENT),
    (PaymentStateError, ErrorCode.STATE),
    (PaymentError, ErrorCode.PAYMENT),
    (IntegrityError, ErrorCode.INTEGRITY),
    (SignatureError, ErrorCode.INTEGRITY),
    (FetchError, ErrorCode.UNAVAILABLE),
    (UnavailableError, ErrorCode.UNAVAILABLE),
    (CloudUnreachable, ErrorCode.UNAVAILABLE),
    (ProtocolError, ErrorCode.PROTOCOL),
)


def _error(code: int, message: str) -> bytes:
    return wire.encode_frame(MsgType.ERROR, wire.error_body(code, message))


def _error_for(exc: Exception) -> bytes:
    for cls, code in _ERROR_MAP:
        if isinstance(exc, cls):
            return _error(code, str(exc))
    return _error(ErrorCode.SERVICE, str(exc))


class ServerConnection:
    """Processes one vehicle's frames sequentially: handshake, then records."""

    def __init__(self, charger: "Charger", link):
        self.charger = charger
        self.link = link
        self.channel: SecureChannel | None = None
        self.state: ChargerSession | None = None
        self.closed = False
        self._init_body = b""
        self._reply = b""
        self._eph: X25519PrivateKey | None = None

    def close(self):
        if not self.closed and self.state is not None:
            self.charger._drop(self.state.session_id)
        self.closed = True

    def handle(self, raw: bytes) -> bytes:
        if self.closed:
            return _error(ErrorCode.PROTOCOL, "connection closed")
        if self.channel is None:
            try:
                return self._handshake(raw)
            except EvolveError as exc:
                self._abort()
                return _error_for(exc)
        try:
            frame = self.channel.open(raw)
        except (ChannelError, ProtocolError) as exc:
            log.warning("closing session after bad record: %s", exc)
            self.close()
            return _error(ErrorCode.PROTOCOL, str(exc))
        try:
            reply, pad = self._dispatch(frame)
        except EvolveError as exc:
            reply, pad = _error_for(exc), None
        return self.channel.seal(reply, pad)

    def _abort(self):
        self._init_body = b""
        self._reply = b""
        self._eph = None

    def _handshake(self, raw: bytes) -> bytes:
        frame = wire.decode_frame(raw)
        if frame.msg_type == MsgType.HS_INIT and not self._init_body:
            return self._on_init(frame.body)
        if frame.msg_type == MsgType.HS_FINISH and self._init_body:
            return self._on_finish(frame.body)
        raise ProtocolError(f"unexpected 0x{frame.msg_type:02x} during handshake")

    def _on_init(self, body: bytes) -> bytes:
        if len(body) != 32 + NONCE_SIZE:
            raise ProtocolError("malformed handshake init")
        if not self.charger._fresh_nonce(body[32:]):
            raise AuthenticationError("handshake nonce already used (replay)")
        self._eph = X25519PrivateKey.generate()
        core = _raw(self._eph.public_key()) + os.urandom(NONCE_SIZE) + self.charger.identity.public_key
        sig = self.charger.identity.sign(charger_transcript(body, core))
        self._init_body, self._reply = body, core + sig
        return wire.encode_frame(MsgType.HS_REPLY, self._reply)

    def _on_finish(self, body: bytes) -> bytes:
        if len(body) != 32 + 64:
            raise ProtocolError("malformed handshake finish")
        id_v, sig_v = body[:32], body[32:]
        if not self.charger.is_registered(id_v):
            raise AuthenticationError("vehicle key is not registered")
        if not verify(id_v, sig_v, vehicle_transcript(self._init_body, self._reply, id_v)):
            raise AuthenticationError("vehicle handshake signature invalid")
        eph_v = X25519PublicKey.from_public_bytes(self._init_body[:32])
        shared = self._eph.exchange(eph_v)
        nonce_v, nonce_c = self._init_body[32:], self._reply[32:64]
        k_v2c, k_c2v = derive_keys(shared, nonce_v, nonce_c, sha256(self._init_body, self._reply, id_v))
        session_id = self.charger._new_session_id()
        self.state = ChargerSession(session_id, id_v)
        self.channel = SecureChannel(k_c2v, k_v2c)
        self.charger._register(self)
        self._eph = None
        return wire.encode_frame(MsgType.HS_DONE, AESGCM(k_c2v).encrypt(_DONE_NONCE, session_id, b"done"))

    def _dispatch(self, frame: wire.Frame) -> tuple[bytes, int | None]:
        t = frame.msg_type
        if t == MsgType.CATALOG_REQUEST:
            return wire.encode_frame(MsgType.CATALOG, wire.encode_catalog(self.charger.catalog())), None
        if t == MsgType.SELECT:
            sid, _params = wire.decode_select(frame.body)
            if sid not in self.charger.services:
                raise SelectionError(f"service {sid} is not offered")
            if sid != CHARGING and CHARGING not in self.state.selected:
                raise OrderingError("charging service must be selected first")
            if sid not in self.state.selected:
                self.state.selected.append(sid)
                if sid == CHARGING:
                    self.charger.charging.started(self.state)
            return wire.encode_frame(MsgType.SELECT_ACK, wire.vas_body(sid, b"")), None
        if t == MsgType.VAS_DATA:
            body = memoryview(frame.body)
            sid, payload = wire.split_vas_body(body)
            if sid not in self.state.selected:
                return _error(ErrorCode.NOT_SELECTED, f"service {sid} not selected"), None
            if len(payload) < 3:
                raise ProtocolError("VAS request shorter than its header")
            op, reply_pad = struct.unpack_from(">BH", payload)
            args = payload[3:]
            if len(args) < 65536:
                args = bytes(args)
            reply = self.charger.services[sid].handle(self.state, op, args)
            inner = b"".join((wire.HEADER.pack(len(reply) + 3, MsgType.VAS_DATA),
                              struct.pack(">H", sid), reply))
            return inner, reply_pad or None
        raise ProtocolError(f"unexpected message 0x{t:02x} on an established session")


class Charger:
    """One charging station with its bus, VASs and cloud connections."""

    def __init__(self, identity: Identity | None = None, *, address: str = "10.0.0.1", port: int = 15118,
                 bus: evbus.EventBus | None = None, cloud: Cloud | None = None, vas_enabled: bool = True,
                 rules: Iterable[CorrelationRule] = (), repo_key: bytes | None = None,
                 update_cache: UpdateCache | None = None, siem_job_limit: int = 4,
                 vehicle_keys: Iterable[bytes] = ()):
        self.identity = identity or Identity.generate("charger")
        self.address = address
        self.port = port
        self.bus = bus or evbus.EventBus()
        self.cloud = cloud
        self.vas_enabled = vas_enabled
        self.vehicle_keys = set(vehicle_keys)
        self.sessions: dict[bytes, ServerConnection] = {}
        self._issued: set[bytes] = set()
        self._nonces: set[bytes] = set()
        self._lock = threading.Lock()

        self.charging = ChargingService(self.bus)
        self.services: dict[int, object] = {CHARGING: self.charging}
        self.updates = self.siem = self.payments = None
        if vas_enabled:
            repo = siem = gateway = None
            if cloud is not None:
                repo, siem, gateway = (cloud.repo.connect(), cloud.siem.connect(), cloud.gateway.connect())
                repo_key = repo_key or cloud.repo.public_key
            self.updates = UpdateService(self.bus, repo, repo_key, update_cache)
            self.siem = SiemService(self.bus, siem, list(rules), job_limit=siem_job_limit)
            self.payments = PaymentService(self.bus, self.identity, gateway)
            self.services.update({UPDATES: self.updates, SIEM: self.siem, PAYMENTS: self.payments})
            if cloud is not None:
                cloud.repo.subscribe(repo, self._on_repo_push)
                cloud.siem.subscribe(siem, self._on_siem_push)

    def __repr__(self):
        return f"<Charger {self.address}:{self.port} sessions={len(self.sessions)}>"

    # cloud pushes

    def _on_repo_push(self, op: int, payload: bytes) -> bytes:
        if op != OP_NOTIFY:
            raise ProtocolError(f"unexpected repository push {op}")
        self.updates.notify(payload)
        return b"\x00"

    def _on_siem_push(self, op: int, payload: bytes) -> bytes:
        if op != OP_FL_NOTICE or len(payload) != 4:
            raise ProtocolError(f"unexpected SIEM push {op}")
        self.siem.on_fl_notice(struct.unpack(">I", payload)[0])
        return b"\x00"

    # discovery and sessions

    def catalog(self) -> list[ServiceDescriptor]:
        items = [ServiceDescriptor(CHARGING, "charging", (("stack", "evolve"),), CRITICAL)]
        if self.vas_enabled:
            items += [
                ServiceDescriptor(UPDATES, "updates", (("cache", "lrs"),)),
                ServiceDescriptor(SIEM, "siem", (("chunk", str(16 * 1024 * 1024)),)),
                ServiceDescriptor(PAYMENTS, "payments", (("currency", "minor-units"),)),
            ]
        return items

    def sdp_respond(self, raw: bytes) -> bytes:
        frame = wire.decode_frame(raw)
        if frame.msg_type != MsgType.SDP_REQUEST:
            raise ProtocolError("not an SDP request")
        nonce = wire.parse_sdp_request(frame.body)
        return wire.encode_sdp_response(nonce, wire.SdpResponse(self.address, self.port, True))

    def register_vehicle(self, public_key: bytes):
        self.vehicle_keys.add(public_key)

    def is_registered(self, public_key: bytes) -> bool:
        return public_key in self.vehicle_keys

    def accept(self, link) -> ServerConnection:
        return ServerConnection(self, link)

    @property
    def session_count(self) -> int:
        return len(self.sessions)

    def _fresh_nonce(self, nonce: bytes) -> bool:
        with self._lock:
            if nonce in self._nonces:
                return False
            self._nonces.add(nonce)
            return True

    def _new_session_id(self) -> bytes:
        with self._lock:
            while True:
                sid = os.urandom(SESSION_ID_SIZE)
                if sid not in self._issued:
                    self._issued.add(sid)
                    return sid

    def _register(self, conn: ServerConnection):
        with self._lock:
            self.sessions[conn.state.session_id] = conn

    def _drop(self, session_id: bytes):
        with self._lock:
            self.sessions.pop(session_id, None)

    def prefetch(self, ecu_model: str | None = None) -> int:
        """Fetch every pending manifest (optionally one ECU) into the cache."""
        if self.updates is None:
            raise ConfigError("updates service disabled")
        n = 0
        for manifest in list(self.updates.pending.values()):
            if ecu_model is None or manifest.ecu_model == ecu_model:
                self.updates.fetch(manifest)
                n += 1
        return n
