"""Powerline against cellular for small and large payloads.

Measured means come from the emulated links; the analytical column is the
closed-form exchange time for the same payload.  Pass ``--full`` for the
100 MB payloads (slow); the default uses 10 MB.
"""
from __future__ import annotations

import argparse

from evolve_vas.bench import Scenario, format_table, oracle, run_many, summarize
from evolve_vas.link import KB

PROFILES = ["EVolve10", "EVolve100", "EVolve1G", "4G", "5G"]

parser = argparse.ArgumentParser(description=__doc__)
parser.add_argument("--full", action="store_true")
args = parser.parse_args()
size = 100_000_000 if args.full else 10_000_000

print("1 KB request/response, 100 samples each")
small = summarize(run_many([Scenario("stability", p, samples=100) for p in PROFILES]))
print(format_table(small))
base = {r.profile: r.mean_ms for r in small}
for p in ("EVolve10", "EVolve100", "EVolve1G"):
    print(f"  5G is {base['5G'] / base[p]:.1f}x slower than {p}")

print(f"\n{size / 1e6:.0f} MB software image, 3 samples each")
big = summarize(run_many([Scenario("updates", p, samples=3, extra={"image_bytes": size}) for p in PROFILES]))
print(format_table(big))
for r in big:
    print(f"  {r.profile:<10} measured {r.mean_ms:10.1f} ms   analytical {oracle(r.profile, 'ideal', KB, size):10.1f} ms")

print(f"\n{size / 1e6:.0f} MB log upload under packet loss, 3 samples each")
up = summarize(run_many([Scenario("siem_upload", p, "loss", 3, extra={"log_bytes": size})
                         for p in ("EVolve100", "5G")]))
print(format_table(up))
m = {r.profile: r.mean_ms for r in up}
print(f"  powerline cuts upload time by {1 - m['EVolve100'] / m['5G']:.0%}")
