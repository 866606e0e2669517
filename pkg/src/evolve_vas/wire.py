"""Frame codec and the fixed message layouts carried inside frames.

Frame layout: 4-byte big-endian length (= len(body) + 1), 1-byte message
type, body.
"""
from __future__ import annotations

import ipaddress
import struct
from dataclasses import dataclass, field
from enum import IntEnum

from .errors import ProtocolError

MAX_BODY = 2**32 - 2
HEADER = struct.Struct(">IB")


class MsgType(IntEnum):
    SDP_REQUEST = 0x01
    SDP_RESPONSE = 0x02
    HS_INIT = 0x04
    HS_REPLY = 0x05
    HS_FINISH = 0x06
    HS_DONE = 0x07
    CATALOG_REQUEST = 0x10
    CATALOG = 0x11
    SELECT = 0x12
    SELECT_ACK = 0x13
    VAS_DATA = 0x20
    RECORD = 0x30
    ERROR = 0x7F


REGISTERED_TYPES = frozenset(int(t) for t in MsgType)


class ErrorCode(IntEnum):
    PROTOCOL = 1
    AUTHENTICATION = 2
    SELECTION = 3
    ORDERING = 4
    NOT_SELECTED = 5
    SERVICE = 6
    PAYMENT = 7
    STATE = 8
    INTEGRITY = 9
    UNAVAILABLE = 10


@dataclass(frozen=True)
class Frame:
    msg_type: int
    body: bytes = b""

    @property
    def length(self) -> int:
        return len(self.body) + 1

    def encode(self) -> bytes:
        return encode_frame(self.msg_type, self.body)


def encode_frame(msg_type: int, body: bytes = b"") -> bytes:
    if int(msg_type) not in REGISTERED_TYPES:
        raise ProtocolError(f"unregistered message type 0x{int(msg_type):02x}")
    if len(body) > MAX_BODY:
        raise ProtocolError("frame body too large")
    return HEADER.pack(len(body) + 1, int(msg_type)) + body


def read_frame(data, offset: int = 0) -> tuple[Frame, int]:
    """Decode one frame starting at ``offset``; returns it and the next offset."""
    if len(data) - offset < HEADER.size:
        raise ProtocolError("truncated frame header")
    length, msg_type = HEADER.unpack_from(data, offset)
    if length < 1:
        raise ProtocolError("frame length must be >= 1")
    if msg_type not in REGISTERED_TYPES:
        raise ProtocolError(f"unregistered message type 0x{msg_type:02x}")
    start = offset + HEADER.size
    end = start + length - 1
    if end > len(data):
        raise ProtocolError("truncated frame body")
    return Frame(msg_type, bytes(data[start:end])), end


def decode_frame(data) -> Frame:
    frame, end = read_frame(data)
    if end != len(data):
        raise ProtocolError(f"{len(data) - end} trailing bytes after frame")
    return frame


def split_frames(data) -> list[Frame]:
    frames, offset = [], 0
    while offset < len(data):
        frame, offset = read_frame(data, offset)
        frames.append(frame)
    return frames


class Writer:
    """Big-endian field builder for the fixed and length-prefixed layouts."""

    def __init__(self):
        self._parts: list[bytes] = []

    def u8(self, v):
        self._parts.append(struct.pack(">B", v))
        return self

    def u16(self, v):
        self._parts.append(struct.pack(">H", v))
        return self

    def u32(self, v):
        self._parts.append(struct.pack(">I", v))
        return self

    def u64(self, v):
        self._parts.append(struct.pack(">Q", v))
        return self

    def f64(self, v):
        self._parts.append(struct.pack(">d", v))
        return self

    def raw(self, b: bytes):
        self._parts.append(bytes(b))
        return self

    def text(self, s: str):
        b = s.encode("utf-8")
        if len(b) > 0xFFFF:
            raise ProtocolError("text field too long")
        return self.u16(len(b)).raw(b)

    def blob(self, b: bytes):
        return self.u32(len(b)).raw(b)

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, data, offset: int = 0):
        self._data = data
        self.offset = offset

    def _take(self, n: int):
        end = self.offset + n
        if n < 0 or end > len(self._data):
            raise ProtocolError("truncated field")
        chunk = self._data[self.offset:end]
        self.offset = end
        return chunk

    def u8(self) -> int:
        return self._take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self._take(2))[0]

    def u32(self) -> int:
        return struct.unpack(">I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self._take(8))[0]

    def f64(self) -> float:
        return struct.unpack(">d", self._take(8))[0]

    def raw(self, n: int) -> bytes:
        return bytes(self._take(n))

    def view(self, n: int):
        """Like :meth:`raw` but without copying when the source is a memoryview."""
        return self._take(n)

    def text(self) -> str:
        try:
            return bytes(self._take(self.u16())).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ProtocolError("invalid utf-8 text field") from exc

    def blob(self) -> bytes:
        return bytes(self._take(self.u32()))

    def rest(self) -> bytes:
        return self.raw(len(self._data) - self.offset)

    @property
    def remaining(self) -> int:
        return len(self._data) - self.offset

    def done(self):
        if self.remaining:
            raise ProtocolError(f"{self.remaining} unexpected trailing bytes")


def error_body(code: int, message: str) -> bytes:
    return Writer().u16(int(code)).text(message[:1000]).getvalue()


def parse_error(body: bytes) -> tuple[int, str]:
    r = Reader(body)
    return r.u16(), r.text()


# discovery

SDP_MAGIC = b"EVSD"
SDP_NONCE_SIZE = 12
SDP_REQUEST_SIZE = len(SDP_MAGIC) + SDP_NONCE_SIZE
FLAG_SECURITY_REQUIRED = 0x01


@dataclass(frozen=True)
class SdpResponse:
    charger_address: str
    port: int
    security_required: bool = True

    def __post_init__(self):
        if not 0 < self.port <= 0xFFFF:
            raise ProtocolError(f"invalid port {self.port}")


def encode_sdp_request(nonce: bytes) -> bytes:
    if len(nonce) != SDP_NONCE_SIZE:
        raise ValueError("nonce must be 12 bytes")
    return encode_frame(MsgType.SDP_REQUEST, SDP_MAGIC + nonce)


def parse_sdp_request(body: bytes) -> bytes:
    if len(body) != SDP_REQUEST_SIZE or body[:4] != SDP_MAGIC:
        raise ProtocolError("malformed SDP request")
    return body[4:]


def encode_sdp_response(nonce: bytes, resp: SdpResponse) -> bytes:
    addr = ipaddress.IPv4Address(resp.charger_address).packed
    flags = FLAG_SECURITY_REQUIRED if resp.security_required else 0
    return encode_frame(MsgType.SDP_RESPONSE,
                        nonce + addr + struct.pack(">HB", resp.port, flags))


def parse_sdp_response(body: bytes) -> tuple[bytes, SdpResponse]:
    if len(body) != SDP_NONCE_SIZE + 7:
        raise ProtocolError("malformed SDP response")
    nonce = body[:SDP_NONCE_SIZE]
    addr = str(ipaddress.IPv4Address(body[SDP_NONCE_SIZE:SDP_NONCE_SIZE + 4]))
    port, flags = struct.unpack(">HB", body[SDP_NONCE_SIZE + 4:])
    return nonce, SdpResponse(addr, port, bool(flags & FLAG_SECURITY_REQUIRED))


# service negotiation

CRITICAL = "critical"
STANDARD = "standard"
_CRIT_CODES = {STANDARD: 0, CRITICAL: 1}
_CRIT_NAMES = {v: k for k, v in _CRIT_CODES.items()}

CHARGING = 0x0001
UPDATES = 0x0002
SIEM = 0x0003
PAYMENTS = 0x0004


@dataclass(frozen=True)
class ServiceDescriptor:
    service_id: int
    name: str
    parameters: tuple[tuple[str, str], ...] = field(default_factory=tuple)
    criticality: str = STANDARD

    def __post_init__(self):
        if not 0 <= self.service_id <= 0xFFFF:
            raise ProtocolError(f"service id {self.service_id} out of range")
        if self.criticality not in _CRIT_CODES:
            raise ProtocolError(f"unknown criticality {self.criticality!r}")
        object.__setattr__(self, "parameters", tuple((str(k), str(v)) for k, v in self.parameters))

    @property
    def params(self) -> dict[str, str]:
        return dict(self.parameters)

    def write(self, w: Writer):
        w.u16(self.service_id).text(self.name).u8(_CRIT_CODES[self.criticality])
        w.u16(len(self.parameters))
        for k, v in self.parameters:
            w.text(k).text(v)

    @classmethod
    def read(cls, r: Reader) -> "ServiceDescriptor":
        sid, name, crit = r.u16(), r.text(), r.u8()
        if crit not in _CRIT_NAMES:
            raise ProtocolError(f"unknown criticality code {crit}")
        params = tuple((r.text(), r.text()) for _ in range(r.u16()))
        return cls(sid, name, params, _CRIT_NAMES[crit])


def validate_catalog(catalog) -> None:
    ids = [d.service_id for d in catalog]
    if len(ids) != len(set(ids)):
        raise ProtocolError("duplicate service ids in catalog")
    charging = [d for d in catalog if d.service_id == CHARGING]
    if not charging or charging[0].criticality != CRITICAL:
        raise ProtocolError("catalog must include the critical charging service")


def encode_catalog(catalog) -> bytes:
    validate_catalog(catalog)
    w = Writer().u16(len(catalog))
    for d in catalog:
        d.write(w)
    return w.getvalue()


def decode_catalog(body: bytes) -> list[ServiceDescriptor]:
    r = Reader(body)
    catalog = [ServiceDescriptor.read(r) for _ in range(r.u16())]
    r.done()
    validate_catalog(catalog)
    return catalog


def encode_select(service_id: int, params=()) -> bytes:
    w = Writer().u16(service_id).u16(len(params))
    for k, v in params:
        w.text(k).text(v)
    return w.getvalue()


def decode_select(body: bytes) -> tuple[int, tuple[tuple[str, str], ...]]:
    r = Reader(body)
    sid = r.u16()
    params = tuple((r.text(), r.text()) for _ in range(r.u16()))
    r.done()
    return sid, params


def vas_body(service_id: int, payload: bytes) -> bytes:
    return struct.pack(">H", service_id) + payload


def split_vas_body(body) -> tuple[int, bytes]:
    if len(body) < 2:
        raise ProtocolError("VAS-data body shorter than service id")
    return struct.unpack_from(">H", body)[0], body[2:]
