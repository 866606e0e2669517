"""Vehicle side of discovery, secure session establishment and negotiation.

Handshake (two exchanges, mutual authentication, ephemeral X25519)::

    V -> C  HS_INIT    eph_v | nonce_v
    C -> V  HS_REPLY   eph_c | nonce_c | id_c | sig_c(transcript)
    V -> C  HS_FINISH  id_v | sig_v(transcript)
    C -> V  HS_DONE    AEAD(k_c2v, session_id)

After HS_DONE every frame travels inside an AES-GCM sealed RECORD frame.
"""
from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Iterable

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from . import wire
from .crypto import Identity, fingerprint, sha256, verify
from .errors import (
    AuthenticationError,
    ChannelError,
    DiscoveryTimeout,
    IntegrityError,
    LinkClosed,
    OrderingError,
    PaymentError,
    PaymentStateError,
    ProtocolError,
    RemoteError,
    SelectionError,
    TransportError,
    UnavailableError,
)
from .link import EmulatedLink
from .wire import ErrorCode, MsgType, SdpResponse

log = logging.getLogger(__name__)

NONCE_SIZE = 32
SESSION_ID_SIZE = 16
TAG_SIZE = 16
RECORD_OVERHEAD = wire.HEADER.size + 8 + TAG_SIZE
DEFAULT_SDP_TIMEOUT_MS = 500.0
_DONE_NONCE = b"DONE" + bytes(8)


def _raw(pub) -> bytes:
    return pub.public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)


def derive_keys(shared: bytes, nonce_v: bytes, nonce_c: bytes, transcript: bytes) -> tuple[bytes, bytes]:
    """Return (vehicle->charger key, charger->vehicle key)."""
    okm = HKDF(algorithm=hashes.SHA256(), length=64, salt=nonce_v + nonce_c,
               info=b"evolve-vas session v1" + transcript).derive(shared)
    return okm[:32], okm[32:]


def charger_transcript(init_body: bytes, reply_core: bytes) -> bytes:
    return b"EVOLVE-HS-C" + sha256(init_body, reply_core)


def vehicle_transcript(init_body: bytes, reply_body: bytes, vehicle_key: bytes) -> bytes:
    return b"EVOLVE-HS-V" + sha256(init_body, reply_body, vehicle_key)


class SecureChannel:
    """AES-GCM record layer with strict per-direction counters."""

    def __init__(self, send_key: bytes, recv_key: bytes):
        self._send = AESGCM(send_key)
        self._recv = AESGCM(recv_key)
        self.send_counter = 0
        self.recv_counter = 0

    def seal(self, inner: bytes, pad_to: int | None = None) -> bytes:
        plain = inner
        if pad_to:
            room = pad_to - RECORD_OVERHEAD - len(inner)
            if room > 0:
                plain = inner + bytes(room)
        counter = struct.pack(">Q", self.send_counter)
        nonce = bytes(4) + counter
        ct = self._send.encrypt(nonce, plain, counter)
        self.send_counter += 1
        return wire.HEADER.pack(len(ct) + 9, MsgType.RECORD) + counter + ct

    def open(self, record) -> wire.Frame:
        view = memoryview(record)
        if len(view) < RECORD_OVERHEAD:
            raise ChannelError("record too short")
        length, msg_type = wire.HEADER.unpack_from(view)
        if msg_type != MsgType.RECORD or length != len(view) - 4:
            raise ChannelError("not a well-formed record")
        counter = bytes(view[5:13])
        if struct.unpack(">Q", counter)[0] != self.recv_counter:
            raise ChannelError("record out of sequence (replay or loss)")
        try:
            plain = self._recv.decrypt(bytes(4) + counter, view[13:], counter)
        except InvalidTag:
            raise ChannelError("record failed authentication") from None
        self.recv_counter += 1
        frame, _ = wire.read_frame(plain)
        return frame


@dataclass
class Network:
    """Chargers reachable from a vehicle, each behind its own emulated link."""

    entries: dict = field(default_factory=dict)

    def attach(self, charger, link: EmulatedLink):
        self.entries[(charger.address, charger.port)] = (charger, link)
        return self

    def resolve(self, sdp: SdpResponse):
        try:
            return self.entries[(sdp.charger_address, sdp.port)]
        except KeyError:
            raise TransportError(f"nothing listening at {sdp.charger_address}:{sdp.port}") from None

    def scope(self):
        return list(self.entries.values())


def sdp_discover(scope: Network | Iterable, timeout_ms: float = DEFAULT_SDP_TIMEOUT_MS) -> SdpResponse:
    """Broadcast an SDP request; the first valid answer (lowest delay) wins."""
    entries = scope.scope() if isinstance(scope, Network) else list(scope)
    best = None
    for charger, link in entries:
        nonce = os.urandom(wire.SDP_NONCE_SIZE)
        try:
            raw, result = link.exchange(wire.encode_sdp_request(nonce), charger.sdp_respond)
            frame = wire.decode_frame(raw)
            if frame.msg_type != MsgType.SDP_RESPONSE:
                continue
            echoed, resp = wire.parse_sdp_response(frame.body)
        except (ProtocolError, LinkClosed) as exc:
            log.debug("ignoring SDP answer from %r: %s", link, exc)
            continue
        if echoed != nonce or result.duration_ms > timeout_ms:
            continue
        if best is None or result.duration_ms < best[0]:
            best = (result.duration_ms, resp)
    if best is None:
        raise DiscoveryTimeout(f"no SDP response within {timeout_ms} ms")
    return best[1]


_ERRORS = {
    ErrorCode.PROTOCOL: ProtocolError,
    ErrorCode.AUTHENTICATION: AuthenticationError,
    ErrorCode.SELECTION: SelectionError,
    ErrorCode.NOT_SELECTED: SelectionError,
    ErrorCode.ORDERING: OrderingError,
    ErrorCode.PAYMENT: PaymentError,
    ErrorCode.STATE: PaymentStateError,
    ErrorCode.INTEGRITY: IntegrityError,
    ErrorCode.UNAVAILABLE: UnavailableError,
}


def raise_remote(body: bytes):
    code, message = wire.parse_error(body)
    exc = _ERRORS.get(code)
    if exc is None:
        raise RemoteError(code, message)
    raise exc(message)


class Session:
    """An established, confidential vehicle/charger session."""

    def __init__(self, session_id: bytes, peer_public_key: bytes, channel: SecureChannel,
                 link: EmulatedLink, server, identity: Identity):
        self.session_id = session_id
        self.peer_public_key = peer_public_key
        self.peer_identity = fingerprint(peer_public_key)
        self.identity = identity
        self.negotiated_services: list[wire.ServiceDescriptor] = []
        self.link = link
        self.handles: dict[int, ServiceHandle] = {}
        self.closed = False
        self._channel = channel
        self._server = server

    def __repr__(self):
        return f"<Session {self.session_id.hex()[:8]} peer={self.peer_identity[:12]}>"

    def close(self):
        self.closed = True
        self._server.close()

    def call(self, msg_type: int, body: bytes = b"", pad_to=None) -> wire.Frame:
        """Send one frame over the channel and return the decoded reply frame."""
        if self.closed:
            raise TransportError("session is closed")
        record = self._channel.seal(wire.encode_frame(msg_type, body), pad_to)
        raw, self.last_transfer = self.link.exchange(record, self._server.handle)
        frame = self._channel.open(raw)
        if frame.msg_type == MsgType.ERROR:
            raise_remote(frame.body)
        return frame

    def negotiate(self) -> list[wire.ServiceDescriptor]:
        frame = self.call(MsgType.CATALOG_REQUEST)
        try:
            if frame.msg_type != MsgType.CATALOG:
                raise ProtocolError(f"expected catalog, got 0x{frame.msg_type:02x}")
            catalog = wire.decode_catalog(frame.body)
        except ProtocolError:
            self.close()
            raise
        self.negotiated_services = catalog
        return catalog

    def descriptor(self, service_id: int) -> wire.ServiceDescriptor:
        for d in self.negotiated_services:
            if d.service_id == service_id:
                return d
        raise SelectionError(f"service {service_id} not in negotiated catalog")

    def select(self, service_id: int, params=()) -> "ServiceHandle":
        descriptor = self.descriptor(service_id)
        if service_id != wire.CHARGING and wire.CHARGING not in self.handles:
            raise OrderingError("the charging service must be selected before any VAS")
        frame = self.call(MsgType.SELECT, wire.encode_select(service_id, tuple(params)))
        if frame.msg_type != MsgType.SELECT_ACK or wire.split_vas_body(frame.body)[0] != service_id:
            raise ProtocolError("bad service-select acknowledgement")
        handle = ServiceHandle(self, descriptor)
        self.handles[service_id] = handle
        return handle


class ServiceHandle:
    """Multiplexes one selected service's VAS-data frames over a session.

    Request payloads carry a 3-byte header (op code, reply padding) so the
    charger can mirror benchmark padding on its answer.
    """

    def __init__(self, session: Session, descriptor: wire.ServiceDescriptor):
        self.session = session
        self.descriptor = descriptor
        self.service_id = descriptor.service_id

    def __repr__(self):
        return f"<ServiceHandle {self.descriptor.name} on {self.session!r}>"

    def request(self, op: int, args: bytes = b"", pad_to: int | None = None,
                reply_pad: int | None = None) -> bytes:
        payload = struct.pack(">BH", op, reply_pad or 0) + args
        frame = self.session.call(MsgType.VAS_DATA, wire.vas_body(self.service_id, payload), pad_to)
        if frame.msg_type != MsgType.VAS_DATA:
            raise ProtocolError(f"expected VAS data, got 0x{frame.msg_type:02x}")
        sid, data = wire.split_vas_body(frame.body)
        if sid != self.service_id:
            raise ProtocolError(f"reply for service {sid} on handle {self.service_id}")
        return data


class VehicleClient:
    """Holds the vehicle's credentials and the charger keys it trusts."""

    def __init__(self, identity: Identity | None = None, trusted_chargers: Iterable[bytes] = ()):
        self.identity = identity or Identity.generate("vehicle")
        self.trusted_chargers = set(trusted_chargers)

    def trust(self, public_key: bytes):
        self.trusted_chargers.add(public_key)

    def discover(self, scope, timeout_ms: float = DEFAULT_SDP_TIMEOUT_MS) -> SdpResponse:
        return sdp_discover(scope, timeout_ms)

    def connect(self, sdp: SdpResponse, link: EmulatedLink, network: Network) -> Session:
        charger, _ = network.resolve(sdp)
        return establish_session(self, sdp, link, charger)


def establish_session(vehicle: VehicleClient, sdp: SdpResponse, link: EmulatedLink, charger) -> Session:
    if not sdp.security_required:
        log.warning("charger at %s does not require security; proceeding with TLS-like channel anyway",
                    sdp.charger_address)
    server = charger.accept(link)
    try:
        return _handshake(vehicle, link, server)
    except LinkClosed as exc:
        server.close()
        raise TransportError(f"handshake interrupted: {exc}") from exc
    except Exception:
        server.close()
        raise


def _expect(raw: bytes, msg_type: MsgType) -> bytes:
    frame = wire.decode_frame(raw)
    if frame.msg_type == MsgType.ERROR:
        raise_remote(frame.body)
    if frame.msg_type != msg_type:
        raise ProtocolError(f"expected {msg_type.name}, got 0x{frame.msg_type:02x}")
    return frame.body


def _handshake(vehicle: VehicleClient, link: EmulatedLink, server) -> Session:
    eph = X25519PrivateKey.generate()
    nonce_v = os.urandom(NONCE_SIZE)
    init_body = _raw(eph.public_key()) + nonce_v
    raw, _ = link.exchange(wire.encode_frame(MsgType.HS_INIT, init_body), server.handle)
    reply = _expect(raw, MsgType.HS_REPLY)
    if len(reply) != 32 * 3 + 64:
        raise ProtocolError("malformed handshake reply")
    eph_c, nonce_c, id_c, sig_c = reply[:32], reply[32:64], reply[64:96], reply[96:]
    if id_c not in vehicle.trusted_chargers:
        raise AuthenticationError(f"charger key {fingerprint(id_c)[:12]} is not trusted")
    if not verify(id_c, sig_c, charger_transcript(init_body, reply[:96])):
        raise AuthenticationError("charger handshake signature invalid")

    id_v = vehicle.identity.public_key
    sig_v = vehicle.identity.sign(vehicle_transcript(init_body, reply, id_v))
    raw, _ = link.exchange(wire.encode_frame(MsgType.HS_FINISH, id_v + sig_v), server.handle)
    done = _expect(raw, MsgType.HS_DONE)

    shared = eph.exchange(X25519PublicKey.from_public_bytes(eph_c))
    k_v2c, k_c2v = derive_keys(shared, nonce_v, nonce_c, sha256(init_body, reply, id_v))
    try:
        session_id = AESGCM(k_c2v).decrypt(_DONE_NONCE, done, b"done")
    except InvalidTag:
        raise AuthenticationError("key confirmation failed") from None
    if len(session_id) != SESSION_ID_SIZE:
        raise ProtocolError("bad session id length")
    return Session(session_id, id_c, SecureChannel(k_v2c, k_c2v), link, server, vehicle.identity)


def negotiate_services(session: Session) -> list[wire.ServiceDescriptor]:
    return session.negotiate()


def select_service(session: Session, service_id: int, params=()) -> ServiceHandle:
    return session.select(service_id, params)
