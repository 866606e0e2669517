"""What happens when someone alters updates, payment chains or bus traffic."""
from __future__ import annotations

import numpy as np

from evolve_vas import wire
from evolve_vas.bus import EventBus
from evolve_vas.crypto import Identity
from evolve_vas.errors import AccessDenied, ApplyError, DisputeError
from evolve_vas.payments import PaymentSession, PaymentWallet, Tariff, accept_authorization, \
    issue_micro_receipt, reconcile
from evolve_vas.platform import build_platform
from evolve_vas.updates import EcuState, apply_update, request_update

# 1. A byte of the image flips on the way to the vehicle.
p = build_platform("EVolve1G")
image = np.random.default_rng(3).bytes(50_000)
p.cloud.repo.publish("inverter", "3.1.0", image)
session, handles = p.connect([wire.UPDATES])
manifest, img = request_update(handles[wire.UPDATES], "inverter", (3, 0, 0))
bad = bytearray(img)
bad[1234] ^= 0x01
try:
    apply_update(EcuState("inverter", (3, 0, 0)), manifest, bytes(bad), p.cloud.repo.public_key)
except ApplyError as exc:
    print("update rejected:", exc)

# 2. The charger rewrites the fourth receipt after the fact.
charger, vehicle = Identity.generate(), Identity.generate()
tariff = Tariff(price_per_wh=2, burst_wh=50)
pay = PaymentSession(b"S" * 16, tariff, charger.public_key, vehicle.public_key)
wallet = PaymentWallet(vehicle, charger.public_key)
wallet.begin(pay.session_id, tariff)
for _ in range(8):
    accept_authorization(pay, wallet.authorize_burst(issue_micro_receipt(pay, charger)))
vsig = vehicle.sign(wallet.expected_record().signed_bytes())
forged = bytearray(pay.receipt_log[3])
forged[60] ^= 0xFF
pay.receipt_log[3] = bytes(forged)
try:
    reconcile(pay, charger, vsig)
except DisputeError as exc:
    print(f"payment disputed at {exc.element} {exc.index}: {exc}")

# 3. A compromised VAS tries to command the charging controller.
bus = EventBus()
try:
    bus.publish("vas_payments", "charging/cmd", b"stop")
except AccessDenied as exc:
    print("bus publish refused:", exc)
