"""Vehicular software-update service.

The charger learns about new images from the image repository, fetches and
verifies them once, caches them, and streams them to vehicles.  Vehicles
verify the manifest signature and image digest again before applying, so a
compromised charger cannot install anything the repository did not sign.
"""
from __future__ import annotations

import logging
import struct
import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import TYPE_CHECKING

from . import bus as evbus
from .cloud import OP_GET_IMAGE, BlobStore
from .crypto import Identity, sha256, verify
from .errors import (
    ApplyError,
    CloudUnreachable,
    FetchError,
    IntegrityError,
    ProtocolError,
    RollbackError,
    SignatureError,
)
from .link import KB
from .wire import Reader, Writer

if TYPE_CHECKING:
    from .cloud import CloudConnection
    from .session import ServiceHandle

log = logging.getLogger(__name__)

Version = tuple[int, int, int]

OP_QUERY = 1
STATUS_UPDATE = 0
STATUS_UP_TO_DATE = 1
DEFAULT_CACHE_BYTES = 4 * 1024**3
ROLE = "vas_update"


def parse_version(text: str) -> Version:
    parts = tuple(int(p) for p in text.strip().lstrip("v").split("."))
    if len(parts) != 3 or any(not 0 <= p <= 0xFFFF for p in parts):
        raise ValueError(f"bad version {text!r}")
    return parts


def format_version(v: Version) -> str:
    return ".".join(str(p) for p in v)


@dataclass(frozen=True)
class UpdateManifest:
    ecu_model: str
    version: Version
    size_bytes: int
    image_hash: bytes
    signature: bytes = b""

    def signed_bytes(self) -> bytes:
        w = Writer().text(self.ecu_model)
        for part in self.version:
            w.u16(part)
        w.u64(self.size_bytes).u16(len(self.image_hash)).raw(self.image_hash)
        return w.getvalue()

    def encode(self) -> bytes:
        return self.signed_bytes() + struct.pack(">H", len(self.signature)) + self.signature

    @classmethod
    def decode(cls, data: bytes) -> "UpdateManifest":
        r = Reader(data)
        m = cls._read(r)
        r.done()
        return m

    @classmethod
    def _read(cls, r: Reader) -> "UpdateManifest":
        ecu = r.text()
        version = (r.u16(), r.u16(), r.u16())
        size = r.u64()
        digest = r.raw(r.u16())
        sig = r.raw(r.u16())
        if len(digest) != 32:
            raise ProtocolError("image hash must be 32 bytes")
        return cls(ecu, version, size, digest, sig)

    def verify_signature(self, repo_key: bytes) -> bool:
        return verify(repo_key, self.signature, b"EVOLVE-MANIFEST" + self.signed_bytes())

    def matches(self, image) -> bool:
        return len(image) == self.size_bytes and sha256(image) == self.image_hash

    @property
    def key(self) -> tuple[str, Version]:
        return self.ecu_model, self.version

    def __repr__(self):
        return f"<UpdateManifest {self.ecu_model} {format_version(self.version)} {self.size_bytes}B>"


def sign_manifest(publisher: Identity, ecu_model: str, version: Version | str, image: bytes) -> UpdateManifest:
    if isinstance(version, str):
        version = parse_version(version)
    unsigned = UpdateManifest(ecu_model, tuple(version), len(image), sha256(image))
    sig = publisher.sign(b"EVOLVE-MANIFEST" + unsigned.signed_bytes())
    return UpdateManifest(unsigned.ecu_model, unsigned.version, unsigned.size_bytes, unsigned.image_hash, sig)


@dataclass
class CacheEntry:
    manifest: UpdateManifest
    image: bytes
    verified: bool = False


class UpdateCache:
    """Least-recently-served image cache over a :class:`~evolve_vas.cloud.BlobStore`."""

    def __init__(self, capacity_bytes: int = DEFAULT_CACHE_BYTES, store=None):
        self.capacity_bytes = capacity_bytes
        self.store = store if store is not None else BlobStore(namespace="update-cache")
        self._entries: OrderedDict[str, UpdateManifest] = OrderedDict()
        self._lock = threading.Lock()

    def __len__(self):
        return len(self._entries)

    def __contains__(self, manifest: UpdateManifest):
        return manifest.image_hash.hex() in self._entries

    @property
    def used_bytes(self) -> int:
        return sum(m.size_bytes for m in self._entries.values())

    def get(self, manifest: UpdateManifest) -> CacheEntry | None:
        key = manifest.image_hash.hex()
        with self._lock:
            if key not in self._entries:
                return None
            return CacheEntry(self._entries[key], self.store.get(key), verified=True)

    def put(self, manifest: UpdateManifest, image: bytes) -> CacheEntry:
        if manifest.size_bytes > self.capacity_bytes:
            raise FetchError(f"image of {manifest.size_bytes} bytes exceeds cache capacity", 0.0)
        key = manifest.image_hash.hex()
        with self._lock:
            while self._entries and self.used_bytes + manifest.size_bytes > self.capacity_bytes:
                victim, _ = self._entries.popitem(last=False)
                self.store.delete(victim)
                log.info("evicted cached image %s", victim[:12])
            self.store.put(key, image)
            self._entries[key] = manifest
        return CacheEntry(manifest, image, verified=True)

    def touch(self, manifest: UpdateManifest):
        with self._lock:
            self._entries.move_to_end(manifest.image_hash.hex())

    def newest(self, ecu_model: str) -> UpdateManifest | None:
        with self._lock:
            candidates = [m for m in self._entries.values() if m.ecu_model == ecu_model]
        return max(candidates, key=lambda m: m.version, default=None)


class UpdateService:
    """Charger side of the software-update VAS."""

    def __init__(self, bus: evbus.EventBus, repo: "CloudConnection | None" = None,
                 repo_key: bytes | None = None, cache: UpdateCache | None = None):
        self.bus = bus
        self.repo = repo
        self.repo_key = repo_key
        self.cache = cache or UpdateCache()
        self.pending: dict[tuple[str, Version], UpdateManifest] = {}
        self.rejected = 0
        self._fetch_locks: dict[bytes, threading.Lock] = {}
        self._locks_guard = threading.Lock()

    def notify(self, manifest: UpdateManifest | bytes) -> bool:
        """Record a repository notification; returns False for a duplicate."""
        if isinstance(manifest, (bytes, bytearray, memoryview)):
            manifest = UpdateManifest.decode(bytes(manifest))
        if self.repo_key is None or not manifest.verify_signature(self.repo_key):
            self.rejected += 1
            log.warning("rejected update notification for %r: bad signature", manifest)
            self.bus.publish(ROLE, evbus.SIEM_ALERTS,
                             b"update-notification-rejected:" + manifest.ecu_model.encode(),
                             evbus.CRITICAL)
            raise SignatureError(f"manifest signature invalid for {manifest!r}")
        if manifest.key in self.pending and self.pending[manifest.key] == manifest:
            return False
        self.pending[manifest.key] = manifest
        self.bus.publish(ROLE, evbus.UPDATES_AVAILABLE, manifest.encode())
        return True

    def _lock_for(self, manifest: UpdateManifest) -> threading.Lock:
        with self._locks_guard:
            return self._fetch_locks.setdefault(manifest.image_hash, threading.Lock())

    def fetch(self, manifest: UpdateManifest) -> CacheEntry:
        """Return the cached entry, downloading and verifying it on a miss."""
        if manifest.key not in self.pending and manifest not in self.cache:
            raise FetchError(f"{manifest!r} was never announced", 0.0)
        with self._lock_for(manifest):
            hit = self.cache.get(manifest)
            if hit is not None:
                return hit
            if self.repo is None:
                raise FetchError("no image repository connection")
            try:
                image = self.repo.call(OP_GET_IMAGE, manifest.image_hash)
            except CloudUnreachable as exc:
                raise FetchError(f"image repository unreachable: {exc}", retry_after_ms=5000.0) from exc
            except ProtocolError as exc:
                raise IntegrityError(f"corrupted transfer for {manifest!r}: {exc}") from exc
            if not manifest.matches(image):
                raise IntegrityError(f"downloaded image does not match {manifest!r}")
            if not manifest.verify_signature(self.repo_key):
                raise SignatureError(f"manifest signature invalid for {manifest!r}")
            entry = self.cache.put(manifest, image)
        self.bus.publish(ROLE, evbus.UPDATES_FETCHED, manifest.encode())
        return entry

    def _candidate(self, ecu_model: str, min_version: Version) -> UpdateManifest | None:
        known = [m for m in self.pending.values() if m.ecu_model == ecu_model]
        cached = self.cache.newest(ecu_model)
        if cached is not None:
            known.append(cached)
        newer = [m for m in known if m.version > tuple(min_version)]
        return max(newer, key=lambda m: m.version, default=None)

    def serve(self, ecu_model: str, min_version: Version) -> tuple[UpdateManifest, bytes] | None:
        manifest = self._candidate(ecu_model, min_version)
        if manifest is None:
            return None
        entry = self.fetch(manifest)
        self.cache.touch(manifest)
        return entry.manifest, entry.image

    def handle(self, state, op: int, args: bytes) -> bytes:
        if op != OP_QUERY:
            raise ProtocolError(f"unknown update op {op}")
        r = Reader(args)
        ecu = r.text()
        min_version = (r.u16(), r.u16(), r.u16())
        found = self.serve(ecu, min_version)
        if found is None:
            return bytes([STATUS_UP_TO_DATE])
        manifest, image = found
        enc = manifest.encode()
        return b"".join((bytes([STATUS_UPDATE]), struct.pack(">I", len(enc)), enc, image))


# vehicle side

def request_update(handle: "ServiceHandle", ecu_model: str, current_version: Version,
                   pad_to: int | None = KB) -> tuple[UpdateManifest, memoryview] | None:
    """Ask the charger for anything newer than ``current_version``.

    Returns ``None`` when the vehicle is up to date.
    """
    w = Writer().text(ecu_model)
    for part in current_version:
        w.u16(part)
    reply = handle.request(OP_QUERY, w.getvalue(), pad_to=pad_to)
    if not reply:
        raise ProtocolError("empty update reply")
    if reply[0] == STATUS_UP_TO_DATE:
        return None
    if reply[0] != STATUS_UPDATE:
        raise ProtocolError(f"unknown update status {reply[0]}")
    view = memoryview(reply)
    (mlen,) = struct.unpack_from(">I", view, 1)
    manifest = UpdateManifest.decode(bytes(view[5:5 + mlen]))
    return manifest, view[5 + mlen:]


@dataclass(frozen=True)
class EcuState:
    ecu_model: str
    current_version: Version
    image: bytes = b""
    previous_version: Version | None = None
    previous_image: bytes | None = None


def apply_update(state: EcuState, manifest: UpdateManifest, image, repo_key: bytes) -> EcuState:
    """Verify end to end and install; the old image is retained for rollback."""
    if manifest.ecu_model != state.ecu_model:
        raise ApplyError(f"manifest targets {manifest.ecu_model}, ECU is {state.ecu_model}")
    if not manifest.verify_signature(repo_key):
        raise ApplyError("manifest signature does not verify under the repository key")
    if not manifest.matches(image):
        raise ApplyError("image digest or size does not match the manifest")
    if tuple(manifest.version) <= tuple(state.current_version):
        raise ApplyError(f"refusing downgrade {format_version(state.current_version)} -> "
                         f"{format_version(manifest.version)}")
    return EcuState(state.ecu_model, tuple(manifest.version), bytes(image),
                    state.current_version, state.image)


def rollback(state: EcuState) -> EcuState:
    if state.previous_image is None or state.previous_version is None:
        raise RollbackError(f"no retained image for {state.ecu_model}")
    return EcuState(state.ecu_model, state.previous_version, state.previous_image)
