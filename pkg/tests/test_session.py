from __future__ import annotations

import pytest

from evolve_vas import wire
from evolve_vas.charger import Charger
from evolve_vas.crypto import Identity
from evolve_vas.errors import (
    AuthenticationError,
    ChannelError,
    DiscoveryTimeout,
    OrderingError,
    SelectionError,
    TransportError,
)
from evolve_vas.link import open_link
from evolve_vas.platform import build_platform
from evolve_vas.session import (
    RECORD_OVERHEAD,
    Network,
    SecureChannel,
    VehicleClient,
    establish_session,
    sdp_discover,
)
from evolve_vas.wire import MsgType


def test_discovery_returns_charger_endpoint(platform):
    sdp = sdp_discover(platform.network)
    assert (sdp.charger_address, sdp.port, sdp.security_required) == ("10.0.0.1", 15118, True)


def test_discovery_picks_fastest_charger():
    near, far = Charger(address="10.0.0.2"), Charger(address="10.0.0.3")
    net = Network().attach(far, open_link("4G")).attach(near, open_link("EVolve1G"))
    assert sdp_discover(net).charger_address == "10.0.0.2"


def test_discovery_timeout():
    net = Network().attach(Charger(), open_link("4G"))
    with pytest.raises(DiscoveryTimeout):
        sdp_discover(net, timeout_ms=10)
    with pytest.raises(DiscoveryTimeout):
        sdp_discover(Network())


def test_handshake_authenticates_both_sides(platform):
    session, _ = platform.connect()
    assert session.peer_public_key == platform.charger.identity.public_key
    conn = platform.charger.sessions[session.session_id]
    assert conn.state.vehicle_key == platform.vehicle.identity.public_key
    assert len(session.session_id) == 16


def test_untrusted_charger_rejected(platform):
    platform.vehicle.trusted_chargers.clear()
    with pytest.raises(AuthenticationError):
        platform.connect()
    assert platform.charger.session_count == 0


def test_unregistered_vehicle_rejected(platform):
    stranger = VehicleClient(Identity.generate(), [platform.charger.identity.public_key])
    with pytest.raises(AuthenticationError):
        establish_session(stranger, sdp_discover(platform.network), platform.link, platform.charger)


def test_charging_must_be_selected_first(platform):
    sdp = sdp_discover(platform.network)
    session = establish_session(platform.vehicle, sdp, platform.link, platform.charger)
    session.negotiate()
    with pytest.raises(OrderingError):
        session.select(wire.UPDATES)
    # the charger enforces the same rule on its own
    with pytest.raises(OrderingError):
        session.call(MsgType.SELECT, wire.encode_select(wire.UPDATES))


def test_catalog_and_unknown_service(platform):
    session, _ = platform.connect()
    ids = [d.service_id for d in session.negotiated_services]
    assert ids == [wire.CHARGING, wire.UPDATES, wire.SIEM, wire.PAYMENTS]
    with pytest.raises(SelectionError):
        session.select(0x99)
    with pytest.raises(SelectionError):
        session.call(MsgType.SELECT, wire.encode_select(0x99))


def test_vas_disabled_offers_only_charging():
    p = build_platform(vas_enabled=False)
    session, handles = p.connect()
    assert [d.service_id for d in session.negotiated_services] == [wire.CHARGING]
    assert handles[wire.CHARGING].request(1)[0] == 1


def test_unselected_service_is_refused(platform):
    session, handles = platform.connect()
    with pytest.raises(SelectionError):
        session.call(MsgType.VAS_DATA, wire.vas_body(wire.UPDATES, b"\x01\x00\x00"))


def test_records_are_encrypted_and_padded(platform):
    seen = []
    platform.link.taps.append(lambda d, p: seen.append(bytes(p)))
    session, handles = platform.connect()
    seen.clear()
    handles[wire.CHARGING].request(1, b"secret-marker", pad_to=1024, reply_pad=1024)
    assert [len(x) for x in seen] == [1024, 1024]
    assert all(b"secret-marker" not in x for x in seen)
    assert all(x[4] == MsgType.RECORD for x in seen)


def test_channel_rejects_tamper_and_replay():
    k1, k2 = bytes(32), bytes(range(32))
    a, b = SecureChannel(k1, k2), SecureChannel(k2, k1)
    rec = a.seal(wire.encode_frame(MsgType.VAS_DATA, b"hi"))
    assert len(rec) == RECORD_OVERHEAD + 7
    assert b.open(rec).body == b"hi"
    with pytest.raises(ChannelError):
        b.open(rec)
    rec2 = bytearray(a.seal(wire.encode_frame(MsgType.VAS_DATA, b"hi")))
    rec2[-1] ^= 1
    with pytest.raises(ChannelError):
        b.open(bytes(rec2))


def test_replayed_record_closes_server_session(platform):
    captured = []
    platform.link.taps.append(lambda d, p: captured.append((d, bytes(p))))
    session, handles = platform.connect()
    last_up = [p for d, p in captured if d == "up"][-1]
    conn = platform.charger.sessions[session.session_id]
    conn.handle(last_up)
    assert conn.closed and platform.charger.session_count == 0


def test_replayed_handshake_init_rejected(platform):
    captured = []
    platform.link.taps.append(lambda d, p: captured.append((d, bytes(p))))
    platform.connect()
    init = next(p for d, p in captured if d == "up" and p[4] == MsgType.HS_INIT)
    reply = wire.decode_frame(platform.charger.accept(platform.link).handle(init))
    assert reply.msg_type == MsgType.ERROR
    assert wire.parse_error(reply.body)[0] == wire.ErrorCode.AUTHENTICATION


def test_closed_session_and_link(platform):
    session, handles = platform.connect()
    session.close()
    with pytest.raises(TransportError):
        handles[wire.CHARGING].request(1)
    assert platform.charger.session_count == 0


def test_handshake_interrupted_by_link_cut(platform):
    platform.link.cut_after(100)
    with pytest.raises(TransportError):
        platform.connect()


def test_many_sessions_get_distinct_ids(platform):
    ids = set()
    for seed in range(20):
        vehicle, link, net = platform.add_vehicle(seed)
        s = vehicle.connect(vehicle.discover(net), link, net)
        ids.add(s.session_id)
    assert len(ids) == 20 and platform.charger.session_count == 20


def test_session_id_allocator_unique_at_scale():
    c = Charger()
    ids = {c._new_session_id() for _ in range(100_000)}
    assert len(ids) == 100_000
