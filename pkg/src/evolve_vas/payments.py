"""Secure payment VAS: naive one-shot payment and burst micropayments.

Receipts and authorizations form an alternating hash chain::

    receipt_0 -> auth_0 -> receipt_1 -> auth_1 -> ...

Receipt k carries a 24-byte link to auth k-1 (zeros for k = 0) and auth k
carries the full digest of receipt k.  Each side signs its messages with
its Ed25519 identity, so either party can audit the whole chain with the
two public keys exchanged when the session was established.

Fixed wire layouts (big-endian):

* MicroReceipt, 97 bytes: ver | burst_index u16 | energy_wh u16 |
  amount u32 | prev_link[24] | charger_sig[64]
* PaymentAuthorization, 119 bytes: ver | session_id[16] | burst_index u16 |
  amount u32 | receipt_hash[32] | vehicle_sig[64]
* ReconciliationRecord, 268 bytes: ver | kind | session_id[16] |
  burst_count u32 | total_energy_wh u64 | total_amount u64 |
  price_per_wh u32 | burst_wh u16 | chain_head[32] | charger_key[32] |
  vehicle_key[32] | charger_sig[64] | vehicle_sig[64]

The receipt does not carry the session id; it is bound into the signed
message instead.
"""
from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING

from . import bus as evbus
from .crypto import ZERO_DIGEST, Identity, sha256, verify
from .cloud import OP_SETTLE
from .errors import (
    CloudUnreachable,
    ConfigError,
    DisputeError,
    PaymentError,
    PaymentStateError,
    ProtocolError,
    SequencingError,
)
from .link import KB

if TYPE_CHECKING:
    from .cloud import CloudConnection
    from .session import ServiceHandle

log = logging.getLogger(__name__)

ROLE = "vas_payments"
VERSION = 1
LINK_SIZE = 24
KIND_MICRO = 0
KIND_NAIVE = 1

OPEN, RECONCILED, DISPUTED = "open", "reconciled", "disputed"

OP_NAIVE = 1
OP_START = 2
OP_BURST = 3
OP_RECONCILE = 4

_RECEIPT = struct.Struct(">BHHI24s64s")
_AUTH = struct.Struct(">B16sHI32s64s")
_RECORD = struct.Struct(">BB16sIQQIH32s32s32s64s64s")
RECEIPT_SIZE = _RECEIPT.size
AUTH_SIZE = _AUTH.size
RECORD_SIZE = _RECORD.size
ZERO_LINK = bytes(LINK_SIZE)


@dataclass(frozen=True)
class Tariff:
    price_per_wh: int
    burst_wh: int

    def __post_init__(self):
        if not isinstance(self.price_per_wh, int) or not isinstance(self.burst_wh, int):
            raise ConfigError("tariff fields are integer minor units")
        if self.price_per_wh <= 0 or self.burst_wh <= 0:
            raise ConfigError("price_per_wh and burst_wh must be positive")
        if self.burst_wh > 0xFFFF or self.burst_amount > 0xFFFFFFFF:
            raise ConfigError("tariff exceeds the per-burst encoding range")

    @property
    def burst_amount(self) -> int:
        return self.price_per_wh * self.burst_wh

    def encode(self) -> bytes:
        return struct.pack(">IH", self.price_per_wh, self.burst_wh)

    @classmethod
    def decode(cls, data: bytes) -> "Tariff":
        if len(data) != 6:
            raise ProtocolError("tariff must be 6 bytes")
        return cls(*struct.unpack(">IH", data))


def auth_link(auth_bytes: bytes) -> bytes:
    return sha256(auth_bytes)[:LINK_SIZE]


@dataclass(frozen=True)
class MicroReceipt:
    session_id: bytes
    burst_index: int
    energy_wh: int
    amount: int
    prev_auth_hash: bytes
    charger_signature: bytes = bytes(64)

    def body(self) -> bytes:
        return _RECEIPT.pack(VERSION, self.burst_index, self.energy_wh, self.amount,
                             self.prev_auth_hash, bytes(64))[:-64]

    def signed_bytes(self) -> bytes:
        return b"EVOLVE-RCPT" + self.session_id + self.body()

    def encode(self) -> bytes:
        return self.body() + self.charger_signature

    @classmethod
    def decode(cls, data: bytes, session_id: bytes) -> "MicroReceipt":
        if len(data) != RECEIPT_SIZE:
            raise ProtocolError(f"receipt must be {RECEIPT_SIZE} bytes")
        ver, idx, energy, amount, link, sig = _RECEIPT.unpack(data)
        if ver != VERSION:
            raise ProtocolError(f"unknown receipt version {ver}")
        return cls(session_id, idx, energy, amount, link, sig)

    def verify(self, charger_key: bytes) -> bool:
        return verify(charger_key, self.charger_signature, self.signed_bytes())

    @property
    def digest(self) -> bytes:
        return sha256(self.encode())


@dataclass(frozen=True)
class PaymentAuthorization:
    session_id: bytes
    burst_index: int
    amount: int
    receipt_hash: bytes
    vehicle_signature: bytes = bytes(64)

    def body(self) -> bytes:
        return _AUTH.pack(VERSION, self.session_id, self.burst_index, self.amount,
                          self.receipt_hash, bytes(64))[:-64]

    def signed_bytes(self) -> bytes:
        return b"EVOLVE-AUTH" + self.body()

    def encode(self) -> bytes:
        return self.body() + self.vehicle_signature

    @classmethod
    def decode(cls, data: bytes) -> "PaymentAuthorization":
        if len(data) != AUTH_SIZE:
            raise ProtocolError(f"authorization must be {AUTH_SIZE} bytes")
        ver, sid, idx, amount, rh, sig = _AUTH.unpack(data)
        if ver != VERSION:
            raise ProtocolError(f"unknown authorization version {ver}")
        return cls(sid, idx, amount, rh, sig)

    def verify(self, vehicle_key: bytes) -> bool:
        return verify(vehicle_key, self.vehicle_signature, self.signed_bytes())


@dataclass(frozen=True)
class ReconciliationRecord:
    session_id: bytes
    burst_count: int
    total_energy_wh: int
    total_amount: int
    chain_head_hash: bytes
    charger_key: bytes
    vehicle_key: bytes
    kind: int = KIND_MICRO
    price_per_wh: int = 0
    burst_wh: int = 0
    charger_signature: bytes = bytes(64)
    vehicle_signature: bytes = bytes(64)

    def body(self) -> bytes:
        return _RECORD.pack(VERSION, self.kind, self.session_id, self.burst_count, self.total_energy_wh,
                            self.total_amount, self.price_per_wh, self.burst_wh, self.chain_head_hash,
                            self.charger_key, self.vehicle_key, bytes(64), bytes(64))[:-128]

    def signed_bytes(self) -> bytes:
        return b"EVOLVE-RECON" + self.body()

    def encode(self) -> bytes:
        return self.body() + self.charger_signature + self.vehicle_signature

    @classmethod
    def decode(cls, data: bytes) -> "ReconciliationRecord":
        if len(data) != RECORD_SIZE:
            raise ProtocolError(f"reconciliation record must be {RECORD_SIZE} bytes")
        (ver, kind, sid, count, energy, amount, price, burst_wh, head,
         ck, vk, csig, vsig) = _RECORD.unpack(data)
        if ver != VERSION or kind not in (KIND_MICRO, KIND_NAIVE):
            raise ProtocolError("unknown reconciliation record version or kind")
        return cls(sid, count, energy, amount, head, ck, vk, kind, price, burst_wh, csig, vsig)

    def verify_charger(self) -> bool:
        return verify(self.charger_key, self.charger_signature, self.signed_bytes())

    def verify_vehicle(self) -> bool:
        return verify(self.vehicle_key, self.vehicle_signature, self.signed_bytes())

    def verify(self) -> bool:
        return self.verify_charger() and self.verify_vehicle()

    @property
    def digest(self) -> bytes:
        return sha256(self.encode())


@dataclass
class PaymentSession:
    """Charger-side state of one micropayment session.

    Chain elements are stored as their canonical encodings, exactly as they
    were exchanged, so that verification audits the bytes both sides signed.
    """

    session_id: bytes
    tariff: Tariff
    charger_key: bytes
    vehicle_key: bytes
    receipt_log: list[bytes] = field(default_factory=list)
    auth_log: list[bytes] = field(default_factory=list)
    state: str = OPEN
    record: ReconciliationRecord | None = None
    dispute: DisputeError | None = None

    @property
    def burst_count(self) -> int:
        return len(self.receipt_log)

    @property
    def receipts(self) -> list[MicroReceipt]:
        return [MicroReceipt.decode(r, self.session_id) for r in self.receipt_log]

    @property
    def authorizations(self) -> list[PaymentAuthorization]:
        return [PaymentAuthorization.decode(a) for a in self.auth_log]

    def expected_record(self, kind: int = KIND_MICRO) -> ReconciliationRecord:
        n = len(self.receipt_log)
        head = sha256(self.auth_log[-1]) if self.auth_log else ZERO_DIGEST
        return ReconciliationRecord(self.session_id, n, n * self.tariff.burst_wh, n * self.tariff.burst_amount,
                                    head, self.charger_key, self.vehicle_key, kind,
                                    self.tariff.price_per_wh, self.tariff.burst_wh)


def verify_chain(session: PaymentSession) -> None:
    """Audit receipt_0 -> auth_0 -> ... ; raises DisputeError at the first bad element."""
    link = ZERO_LINK
    tariff = session.tariff
    if len(session.auth_log) not in (len(session.receipt_log), len(session.receipt_log) - 1):
        raise DisputeError("authorization count does not match receipts", len(session.auth_log), "authorization")
    for k, raw in enumerate(session.receipt_log):
        try:
            receipt = MicroReceipt.decode(raw, session.session_id)
        except ProtocolError as exc:
            raise DisputeError(f"receipt {k} unreadable: {exc}", k, "receipt") from None
        if (receipt.burst_index != k or receipt.prev_auth_hash != link
                or receipt.amount != tariff.burst_amount or receipt.energy_wh != tariff.burst_wh
                or not receipt.verify(session.charger_key)):
            raise DisputeError(f"receipt {k} breaks the chain", k, "receipt")
        if k >= len(session.auth_log):
            break
        try:
            auth = PaymentAuthorization.decode(session.auth_log[k])
        except ProtocolError as exc:
            raise DisputeError(f"authorization {k} unreadable: {exc}", k, "authorization") from None
        if (auth.session_id != session.session_id or auth.burst_index != k
                or auth.amount != receipt.amount or auth.receipt_hash != sha256(raw)
                or not auth.verify(session.vehicle_key)):
            raise DisputeError(f"authorization {k} breaks the chain", k, "authorization")
        link = auth_link(session.auth_log[k])


def issue_micro_receipt(session: PaymentSession, charger: Identity) -> MicroReceipt:
    if session.state != OPEN:
        raise PaymentStateError(f"session is {session.state}")
    if len(session.auth_log) != len(session.receipt_log):
        raise SequencingError(f"burst {len(session.receipt_log) - 1} is not authorized yet")
    link = auth_link(session.auth_log[-1]) if session.auth_log else ZERO_LINK
    unsigned = MicroReceipt(session.session_id, len(session.receipt_log), session.tariff.burst_wh,
                            session.tariff.burst_amount, link)
    receipt = replace(unsigned, charger_signature=charger.sign(unsigned.signed_bytes()))
    session.receipt_log.append(receipt.encode())
    return receipt


def accept_authorization(session: PaymentSession, auth: PaymentAuthorization | bytes):
    raw = auth if isinstance(auth, (bytes, bytearray)) else auth.encode()
    raw = bytes(raw)
    if len(session.auth_log) != len(session.receipt_log) - 1:
        raise SequencingError("no receipt awaiting authorization")
    parsed = PaymentAuthorization.decode(raw)
    k = len(session.auth_log)
    receipt_raw = session.receipt_log[k]
    if (parsed.session_id != session.session_id or parsed.burst_index != k
            or parsed.receipt_hash != sha256(receipt_raw)
            or parsed.amount != MicroReceipt.decode(receipt_raw, session.session_id).amount):
        raise PaymentError(f"authorization does not match receipt {k}")
    if not parsed.verify(session.vehicle_key):
        raise PaymentError("vehicle authorization signature invalid")
    session.auth_log.append(raw)


def reconcile(session: PaymentSession, charger: Identity, vehicle_signature: bytes) -> ReconciliationRecord:
    """Verify the chain and counter-sign the vehicle-signed settlement record."""
    if session.state != OPEN:
        raise PaymentStateError(f"session is {session.state}")
    try:
        verify_chain(session)
        if len(session.auth_log) != len(session.receipt_log):
            k = len(session.auth_log)
            raise DisputeError(f"receipt {k} was never authorized", k, "authorization")
    except DisputeError as exc:
        session.state = DISPUTED
        session.dispute = exc
        raise
    expected = session.expected_record()
    if not verify(session.vehicle_key, vehicle_signature, expected.signed_bytes()):
        raise PaymentError("vehicle signature over the reconciliation record is invalid")
    record = replace(expected, charger_signature=charger.sign(expected.signed_bytes()),
                     vehicle_signature=vehicle_signature)
    session.record = record
    session.state = RECONCILED
    return record


def naive_record(session_id: bytes, amount: int, energy_wh: int, charger_key: bytes,
                 vehicle_key: bytes) -> ReconciliationRecord:
    return ReconciliationRecord(session_id, 1, energy_wh, amount, ZERO_DIGEST, charger_key, vehicle_key,
                                KIND_NAIVE)


class PaymentService:
    """Charger side of the payment VAS, one open micropayment session per wire session."""

    def __init__(self, bus: evbus.EventBus, identity: Identity, gateway: "CloudConnection | None" = None,
                 signer: Identity | None = None):
        self.bus = bus
        self.identity = identity
        self.signer = signer or identity
        self.gateway = gateway
        self.settlements: dict[bytes, str] = {}
        self.history: list[PaymentSession] = []

    def handle(self, state, op: int, args: bytes) -> bytes:
        if op == OP_NAIVE:
            return self._naive(state, args)
        if op == OP_START:
            return self._start(state, args)
        if op == OP_BURST:
            return self._burst(state, args)
        if op == OP_RECONCILE:
            return self._reconcile(state, args)
        raise ProtocolError(f"unknown payment op {op}")

    def _naive(self, state, args: bytes) -> bytes:
        if len(args) != 16 + 8 + 4 + 64:
            raise ProtocolError("malformed naive payment request")
        sid = args[:16]
        amount, energy = struct.unpack_from(">QI", args, 16)
        vsig = args[28:]
        record = naive_record(sid, amount, energy, self.identity.public_key, state.vehicle_key)
        if not verify(state.vehicle_key, vsig, record.signed_bytes()):
            raise PaymentError("vehicle signature over the payment record is invalid")
        record = replace(record, charger_signature=self.signer.sign(record.signed_bytes()),
                         vehicle_signature=vsig)
        self._settle(record)
        return record.encode()

    def _start(self, state, args: bytes) -> bytes:
        current = getattr(state, "payment", None)
        if current is not None and current.state == OPEN:
            raise PaymentStateError("a micropayment session is already open on this handle")
        tariff = Tariff.decode(args)
        session = PaymentSession(os.urandom(16), tariff, self.identity.public_key, state.vehicle_key)
        state.payment = session
        self.history.append(session)
        return session.session_id

    def _session(self, state) -> PaymentSession:
        session = getattr(state, "payment", None)
        if session is None:
            raise PaymentStateError("no micropayment session open")
        return session

    def _burst(self, state, args: bytes) -> bytes:
        session = self._session(state)
        if args:
            accept_authorization(session, args)
        return issue_micro_receipt(session, self.signer).encode()

    def _reconcile(self, state, args: bytes) -> bytes:
        session = self._session(state)
        if len(args) not in (64, 64 + AUTH_SIZE):
            raise ProtocolError("malformed reconcile request")
        if len(args) > 64:
            accept_authorization(session, args[:AUTH_SIZE])
        try:
            record = reconcile(session, self.signer, args[-64:])
        except DisputeError as exc:
            msg = f"dispute at {exc.element} {exc.index}"
            self.bus.publish(ROLE, evbus.PAYMENTS_RECONCILED, b"disputed:" + session.session_id + msg.encode(),
                             evbus.CRITICAL)
            raise
        self._settle(record)
        return record.encode()

    def _settle(self, record: ReconciliationRecord):
        self.bus.publish(ROLE, evbus.PAYMENTS_RECONCILED, record.encode())
        if self.gateway is None:
            return
        try:
            self.settlements[record.digest] = self.gateway.call(OP_SETTLE, record.encode()).decode()
        except CloudUnreachable as exc:
            log.warning("payment gateway unreachable, settlement deferred: %s", exc)


# vehicle side

class PaymentWallet:
    """The vehicle's copy of the chain plus its signing identity."""

    def __init__(self, identity: Identity, charger_key: bytes):
        self.identity = identity
        self.charger_key = charger_key
        self.session_id = b""
        self.tariff: Tariff | None = None
        self.receipt_log: list[bytes] = []
        self.auth_log: list[bytes] = []
        self.records: list[ReconciliationRecord] = []

    def begin(self, session_id: bytes, tariff: Tariff):
        self.session_id, self.tariff = session_id, tariff
        self.receipt_log, self.auth_log = [], []

    def authorize_burst(self, receipt: MicroReceipt | bytes) -> PaymentAuthorization:
        raw = receipt.encode() if isinstance(receipt, MicroReceipt) else bytes(receipt)
        parsed = MicroReceipt.decode(raw, self.session_id)
        if not parsed.verify(self.charger_key):
            raise PaymentError("charger receipt signature invalid")
        k = len(self.auth_log)
        expected_link = auth_link(self.auth_log[-1]) if self.auth_log else ZERO_LINK
        if parsed.burst_index != k or parsed.prev_auth_hash != expected_link:
            raise DisputeError(f"receipt claims burst {parsed.burst_index}, local chain expects {k}",
                               k, "receipt")
        if self.tariff and (parsed.amount != self.tariff.burst_amount or parsed.energy_wh != self.tariff.burst_wh):
            raise PaymentError("receipt amount deviates from the agreed tariff")
        unsigned = PaymentAuthorization(self.session_id, k, parsed.amount, sha256(raw))
        auth = replace(unsigned, vehicle_signature=self.identity.sign(unsigned.signed_bytes()))
        self.receipt_log.append(raw)
        self.auth_log.append(auth.encode())
        return auth

    def expected_record(self) -> ReconciliationRecord:
        n = len(self.auth_log)
        head = sha256(self.auth_log[-1]) if self.auth_log else ZERO_DIGEST
        t = self.tariff
        return ReconciliationRecord(self.session_id, n, n * t.burst_wh, n * t.burst_amount, head,
                                    self.charger_key, self.identity.public_key, KIND_MICRO,
                                    t.price_per_wh, t.burst_wh)

    def accept_record(self, raw: bytes, expected: ReconciliationRecord) -> ReconciliationRecord:
        record = ReconciliationRecord.decode(raw)
        if record.body() != expected.body():
            raise PaymentError("charger returned a record that differs from the agreed one")
        if not record.verify():
            raise PaymentError("charger signature over the reconciliation record is invalid")
        self.records.append(record)
        return record


def naive_payment(handle: "ServiceHandle", amount: int, wallet: PaymentWallet | None = None,
                  energy_wh: int = 0, pad_to: int | None = KB) -> ReconciliationRecord:
    """One request/response producing a dual-signed record."""
    session = handle.session
    wallet = wallet or PaymentWallet(session.identity, session.peer_public_key)
    expected = naive_record(os.urandom(16), amount, energy_wh, wallet.charger_key, wallet.identity.public_key)
    vsig = wallet.identity.sign(expected.signed_bytes())
    args = expected.session_id + struct.pack(">QI", amount, energy_wh) + vsig
    raw = handle.request(OP_NAIVE, args, pad_to=pad_to, reply_pad=pad_to)
    return wallet.accept_record(raw, expected)


class MicropaymentClient:
    """Vehicle-side driver of one micropayment session over a service handle."""

    def __init__(self, handle: "ServiceHandle", wallet: PaymentWallet | None = None,
                 pad_to: int | None = KB):
        session = handle.session
        self.handle = handle
        self.wallet = wallet or PaymentWallet(session.identity, session.peer_public_key)
        self.pad_to = pad_to
        self._pending: PaymentAuthorization | None = None

    def start(self, tariff: Tariff) -> bytes:
        session_id = self.handle.request(OP_START, tariff.encode())
        self.wallet.begin(bytes(session_id), tariff)
        self._pending = None
        return session_id

    def burst(self) -> MicroReceipt:
        """Authorize the previous receipt (if any) and obtain the next one."""
        args = self._pending.encode() if self._pending else b""
        raw = self.handle.request(OP_BURST, args, pad_to=self.pad_to, reply_pad=self.pad_to)
        self._pending = self.wallet.authorize_burst(raw)
        return MicroReceipt.decode(raw, self.wallet.session_id)

    def reconcile(self) -> ReconciliationRecord:
        expected = self.wallet.expected_record()
        vsig = self.wallet.identity.sign(expected.signed_bytes())
        args = (self._pending.encode() if self._pending else b"") + vsig
        raw = self.handle.request(OP_RECONCILE, args)
        self._pending = None
        return self.wallet.accept_record(raw, expected)


def start_micropayment_session(handle: "ServiceHandle", tariff: Tariff) -> MicropaymentClient:
    client = MicropaymentClient(handle)
    client.start(tariff)
    return client


def authorize_burst(wallet: PaymentWallet, receipt: MicroReceipt | bytes) -> PaymentAuthorization:
    return wallet.authorize_burst(receipt)
