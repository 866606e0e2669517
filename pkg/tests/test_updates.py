from __future__ import annotations

import os
import threading

import pytest
from hypothesis import given, settings, strategies as st

from evolve_vas import bus as evbus
from evolve_vas import wire
from evolve_vas.crypto import Identity, sha256
from evolve_vas.errors import ApplyError, FetchError, IntegrityError, RollbackError, SignatureError
from evolve_vas.platform import build_platform
from evolve_vas.updates import (
    EcuState,
    UpdateCache,
    UpdateManifest,
    apply_update,
    request_update,
    rollback,
    sign_manifest,
)

IMAGE_V1 = b"firmware-1.0.0" * 100
IMAGE_V12 = os.urandom(50_000)


def _flip(data: bytes, i: int) -> bytes:
    b = bytearray(data)
    b[i % len(b)] ^= 0x01
    return bytes(b)


@pytest.fixture
def published(platform):
    manifest = platform.cloud.repo.publish("bms", "1.2.0", IMAGE_V12)
    return platform, manifest


def test_manifest_encoding_roundtrip():
    m = sign_manifest(Identity.generate(), "bms", "1.2.3", b"abc")
    assert UpdateManifest.decode(m.encode()) == m
    assert m.version == (1, 2, 3) and m.image_hash == sha256(b"abc")
    # versions are three big-endian u16 after the length-prefixed model name
    assert m.signed_bytes()[:2 + 3 + 6] == b"\x00\x03bms\x00\x01\x00\x02\x00\x03"


@settings(max_examples=50, deadline=None)
@given(i=st.integers(0, 10_000))
def test_any_manifest_bit_flip_breaks_signature(i):
    key = Identity.from_seed(b"\x01" * 32)
    m = sign_manifest(key, "bms", "1.2.0", b"image")
    enc = m.encode()
    sig_start = len(enc) - 64
    i %= sig_start
    try:
        tampered = UpdateManifest.decode(_flip(enc, i))
    except Exception:
        return
    assert not tampered.verify_signature(key.public_key)


def test_notification_reaches_charger(published):
    platform, manifest = published
    svc = platform.charger.updates
    assert svc.pending[("bms", (1, 2, 0))] == manifest


def test_duplicate_notification_is_idempotent(published):
    platform, manifest = published
    svc = platform.charger.updates
    assert svc.notify(manifest) is False
    assert platform.cloud.repo.repo_put(manifest, IMAGE_V12) is False
    assert len(svc.pending) == 1


def test_tampered_notification_rejected_with_alert(platform):
    alerts = platform.charger.bus.subscribe("vas_siem", "siem/*")
    good = sign_manifest(platform.cloud.repo.publisher, "bms", "1.2.0", IMAGE_V12)
    bad = UpdateManifest(good.ecu_model, good.version, good.size_bytes + 1, good.image_hash, good.signature)
    with pytest.raises(SignatureError):
        platform.charger.updates.notify(bad)
    assert platform.charger.updates.pending == {}
    ev = alerts.get()
    assert ev.topic == evbus.SIEM_ALERTS and ev.criticality == evbus.CRITICAL


def test_miss_then_hit_uses_no_cloud_bytes(published):
    platform, manifest = published
    svc, meter = platform.charger.updates, platform.cloud.repo.meter
    svc.fetch(manifest)
    after_first = meter.total
    assert after_first >= manifest.size_bytes
    svc.fetch(manifest)
    assert meter.total == after_first


def test_corrupted_download_rejected(published):
    platform, manifest = published
    svc = platform.charger.updates
    svc.repo.link.faults.append(lambda d, p: _flip(p, len(p) - 10) if d == "down" else None)
    with pytest.raises(IntegrityError):
        svc.fetch(manifest)
    assert manifest not in svc.cache


def test_cloud_down_gives_retry_advice(published):
    platform, manifest = published
    platform.cloud.repo.down = True
    with pytest.raises(FetchError) as info:
        platform.charger.updates.fetch(manifest)
    assert info.value.retry_after_ms > 0


def test_unannounced_manifest_cannot_be_fetched(platform):
    m = sign_manifest(platform.cloud.repo.publisher, "bms", "9.9.9", b"x")
    with pytest.raises(FetchError):
        platform.charger.updates.fetch(m)


def test_fetch_over_4g_matches_oracle(published):
    platform, manifest = published
    svc = platform.charger.updates
    before = svc.repo.link.clock_ms
    svc.fetch(manifest)
    elapsed = svc.repo.link.clock_ms - before
    req = 5 + 3 + 32
    resp = 5 + 3 + manifest.size_bytes
    ser = (req + resp) * 8 / 30e6 * 1000
    assert 72 * 0.7 + ser - 1e-6 <= elapsed <= 72 * 1.3 + ser + 1e-6


def test_concurrent_fetches_download_once(published):
    platform, manifest = published
    svc = platform.charger.updates
    calls = platform.cloud.repo.meter.calls
    threads = [threading.Thread(target=svc.fetch, args=(manifest,)) for _ in range(6)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert platform.cloud.repo.meter.calls == calls + 1


def test_serve_newer_version_to_vehicle(published):
    platform, manifest = published
    _, handles = platform.connect([wire.UPDATES])
    got = request_update(handles[wire.UPDATES], "bms", (1, 0, 0))
    assert got is not None
    m, image = got
    assert m == manifest and bytes(image) == IMAGE_V12
    assert request_update(handles[wire.UPDATES], "bms", (1, 2, 0)) is None
    assert request_update(handles[wire.UPDATES], "inverter", (0, 0, 0)) is None


def test_vehicle_link_bytes_cover_manifest_and_image(published):
    platform, manifest = published
    _, handles = platform.connect([wire.UPDATES])
    before = platform.link.bytes_received
    request_update(handles[wire.UPDATES], "bms", (1, 0, 0))
    got = platform.link.bytes_received - before
    assert got >= len(manifest.encode()) + manifest.size_bytes
    assert got - manifest.size_bytes < 512


def test_cache_saves_cloud_bandwidth_for_many_vehicles(published):
    platform, manifest = published
    vehicle_bytes = 0
    for seed in range(4):
        vehicle, link, net = platform.add_vehicle(seed + 1)
        s = vehicle.connect(vehicle.discover(net), link, net)
        s.negotiate()
        s.select(wire.CHARGING)
        h = s.select(wire.UPDATES)
        request_update(h, "bms", (1, 0, 0))
        vehicle_bytes += link.bytes_received
    cloud = platform.cloud.repo.meter.bytes_down
    assert manifest.size_bytes <= cloud < manifest.size_bytes * 1.01
    assert vehicle_bytes >= 4 * manifest.size_bytes


def test_apply_and_rollback_sequence():
    repo = Identity.generate()
    m = sign_manifest(repo, "bms", "1.2.0", IMAGE_V12)
    s0 = EcuState("bms", (1, 0, 0), IMAGE_V1)
    s1 = apply_update(s0, m, IMAGE_V12, repo.public_key)
    assert s1.current_version == (1, 2, 0) and s1.previous_image == IMAGE_V1
    s2 = rollback(s1)
    assert s2.current_version == (1, 0, 0) and s2.image == IMAGE_V1 and s2.previous_image is None
    s3 = apply_update(s2, m, IMAGE_V12, repo.public_key)
    assert s3.current_version == (1, 2, 0) and s3.previous_version == (1, 0, 0)
    with pytest.raises(RollbackError):
        rollback(EcuState("bms", (1, 0, 0)))


def test_apply_rejects_downgrade_and_wrong_bytes():
    repo = Identity.generate()
    s0 = EcuState("bms", (1, 0, 0), IMAGE_V1)
    old = sign_manifest(repo, "bms", "0.9.0", b"old")
    with pytest.raises(ApplyError):
        apply_update(s0, old, b"old", repo.public_key)
    m = sign_manifest(repo, "bms", "1.2.0", IMAGE_V12)
    with pytest.raises(ApplyError):
        apply_update(s0, m, _flip(IMAGE_V12, 5), repo.public_key)
    with pytest.raises(ApplyError):
        apply_update(s0, m, IMAGE_V12, Identity.generate().public_key)
    with pytest.raises(ApplyError):
        apply_update(EcuState("inverter", (0, 0, 0)), m, IMAGE_V12, repo.public_key)


@settings(max_examples=25, deadline=None)
@given(where=st.sampled_from(["cloud", "cache", "vehicle"]), pos=st.integers(0, 10**6))
def test_end_to_end_integrity_catches_corruption(where, pos):
    p = build_platform("EVolve1G")
    image = bytes(range(256)) * 40
    m = p.cloud.repo.publish("bms", "2.0.0", image)
    svc = p.charger.updates
    state = EcuState("bms", (1, 0, 0), IMAGE_V1)
    if where == "cloud":
        svc.repo.link.faults.append(lambda d, pl: _flip(pl, 8 + pos % (len(pl) - 8)) if d == "down" else None)
        with pytest.raises(IntegrityError):
            svc.fetch(m)
        return
    entry = svc.fetch(m)
    if where == "cache":
        svc.cache.store.put(m.image_hash.hex(), _flip(entry.image, pos))
    _, handles = p.connect([wire.UPDATES])
    got = request_update(handles[wire.UPDATES], "bms", (1, 0, 0))
    manifest, img = got
    if where == "vehicle":
        # the channel would reject ciphertext flips, so corrupt the delivered plaintext
        img = _flip(bytes(img), pos)
    with pytest.raises(ApplyError):
        apply_update(state, manifest, img, p.cloud.repo.public_key)


def test_lru_eviction_by_capacity():
    cache = UpdateCache(capacity_bytes=250)
    key = Identity.generate()
    ms = [sign_manifest(key, "ecu", f"1.0.{i}", bytes([i]) * 100) for i in range(3)]
    cache.put(ms[0], bytes([0]) * 100)
    cache.put(ms[1], bytes([1]) * 100)
    cache.touch(ms[0])
    cache.put(ms[2], bytes([2]) * 100)
    assert ms[0] in cache and ms[2] in cache and ms[1] not in cache
    assert cache.used_bytes == 200
    with pytest.raises(FetchError):
        cache.put(sign_manifest(key, "ecu", "2.0.0", bytes(300)), bytes(300))


def test_cache_on_disk_uses_content_addressed_names(tmp_path):
    from evolve_vas.cloud import BlobStore

    cache = UpdateCache(store=BlobStore(tmp_path, "cache"))
    m = sign_manifest(Identity.generate(), "ecu", "1.0.0", b"img")
    cache.put(m, b"img")
    assert (tmp_path / "cache" / m.image_hash.hex()).read_bytes() == b"img"
