"""Wiring helpers that assemble a vehicle, a charger and the cloud mocks."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from . import wire
from .charger import Charger
from .cloud import Cloud
from .crypto import Identity
from .link import EmulatedLink, LinkProfile, TransportModel, get_profile
from .session import Network, ServiceHandle, Session, VehicleClient, establish_session, sdp_discover


@dataclass
class Platform:
    charger: Charger
    vehicle: VehicleClient
    network: Network
    link: EmulatedLink
    cloud: Cloud

    def connect(self, services=()) -> tuple[Session, dict[int, ServiceHandle]]:
        """Discover, establish, negotiate and select charging plus ``services``."""
        sdp = sdp_discover(self.network)
        session = establish_session(self.vehicle, sdp, self.link, self.charger)
        session.negotiate()
        handles = {wire.CHARGING: session.select(wire.CHARGING)}
        for sid in services:
            handles[sid] = session.select(sid)
        return session, handles

    def add_vehicle(self, seed: int, identity: Identity | None = None) -> tuple[VehicleClient, EmulatedLink, Network]:
        """Another vehicle with its own link to the same charger."""
        vehicle = VehicleClient(identity or Identity.generate("vehicle"), [self.charger.identity.public_key])
        self.charger.register_vehicle(vehicle.identity.public_key)
        link = EmulatedLink(self.link.profile, self.link.model, seed)
        return vehicle, link, Network().attach(self.charger, link)


def build_platform(profile: LinkProfile | str = "EVolve100", transport: TransportModel | str = "ideal",
                   seed: int = 0, cloud_profile: LinkProfile | str = "4G",
                   cloud_transport: TransportModel | str = "ideal", store_root: str | Path | None = None,
                   **charger_kw) -> Platform:
    profile = get_profile(profile) if isinstance(profile, str) else profile
    model = TransportModel.parse(transport) if isinstance(transport, str) else transport
    cmodel = TransportModel.parse(cloud_transport) if isinstance(cloud_transport, str) else cloud_transport
    cloud = Cloud.create(cloud_profile, cmodel, seed=seed, root=store_root)
    charger = Charger(Identity.generate("charger"), cloud=cloud, **charger_kw)
    vehicle = VehicleClient(Identity.generate("vehicle"), [charger.identity.public_key])
    charger.register_vehicle(vehicle.identity.public_key)
    link = EmulatedLink(profile, model, seed)
    return Platform(charger, vehicle, Network().attach(charger, link), link, cloud)
