"""A vehicle plugs in and uses every value-added service once.

Run from the repository root after installing the package:

    python3 demos/charging_session.py
"""
from __future__ import annotations

import numpy as np

from evolve_vas import wire
from evolve_vas.payments import Tariff, naive_payment, start_micropayment_session
from evolve_vas.platform import build_platform
from evolve_vas.siem import CorrelationRule, Flood, generate_synthetic_logs, upload_logs
from evolve_vas.updates import EcuState, apply_update, request_update

# An EVolve100 powerline link between vehicle and charger; the cloud sits behind 4G.
rules = [CorrelationRule("flood-130", 0x130, max_rate_hz=100.0)]
p = build_platform("EVolve100", seed=0, rules=rules)
image = np.random.default_rng(0).bytes(2_000_000)
p.cloud.repo.publish("bms", "1.2.0", image)

session, handles = p.connect([wire.UPDATES, wire.SIEM, wire.PAYMENTS])
print(f"session established, {len(handles)} services selected")

# Software update: the charger fetched and verified the image once; the vehicle verifies again.
t0 = p.link.clock_ms
manifest, img = request_update(handles[wire.UPDATES], "bms", (1, 0, 0))
state = apply_update(EcuState("bms", (1, 0, 0), b"factory"), manifest, img, p.cloud.repo.public_key)
print(f"update {manifest!r} applied in {p.link.clock_ms - t0:.1f} ms emulated, ECU now at {state.current_version}")

# SIEM: ship a log window containing a 0x130 flood, then let the charger analyze it.
batch = generate_synthetic_logs(1, 60, 3_000_000, [Flood(0x130, 400.0, 20, 25)])
t0 = p.link.clock_ms
upload_logs(handles[wire.SIEM], batch)
print(f"uploaded {batch.encoded_size_bytes / 1e6:.1f} MB of CAN logs in {p.link.clock_ms - t0:.1f} ms emulated")
for _, alerts in p.charger.siem.process_jobs():
    for a in alerts:
        print(f"  {a.severity} alert {a.rule_id}: can 0x{a.can_id:03x} at {a.observed_rate_hz:.0f} Hz")

# Payments: one naive payment, then a ten-burst micropayment session.
record = naive_payment(handles[wire.PAYMENTS], 1250, energy_wh=5000)
print(f"naive payment settled: total={record.total_amount}")
client = start_micropayment_session(handles[wire.PAYMENTS], Tariff(price_per_wh=3, burst_wh=100))
for _ in range(10):
    client.burst()
record = client.reconcile()
print(f"micropayments reconciled: {record.burst_count} bursts, {record.total_energy_wh} Wh, total={record.total_amount}")
print(f"gateway settlements: {len(p.cloud.gateway.settlements)}")
session.close()
