"""Command-line entry point: ``evolve-bench run | report | oracle``."""
from __future__ import annotations

import argparse
import logging
import sys

from . import bench
from .errors import ConfigError, EvolveError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or any(v < 0 for v in values):
        raise argparse.ArgumentTypeError("burst counts must be non-negative integers")
    return values


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evolve-bench", description="EV charger VAS benchmark harness")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario and write measurements as CSV")
    run.add_argument("--scenario", required=True, choices=bench.SCENARIOS)
    run.add_argument("--profile", required=True, help="profile name, or a comma-separated list")
    run.add_argument("--transport", default="ideal", help="ideal or loss")
    run.add_argument("--samples", type=int, default=300)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--out", required=True, help="CSV output path")
    run.add_argument("--bursts", type=_int_list, help="micropayment burst counts, e.g. 1,10,100")
    run.add_argument("--reconnect", action="store_true", help="new session for every sample")
    run.add_argument("--parallel", action="store_true", help="run the listed profiles concurrently")
    run.add_argument("--size", type=int, help="override the large payload size in bytes")

    rep = sub.add_parser("report", help="summarize one or more measurement CSVs")
    rep.add_argument("files", nargs="*")
    rep.add_argument("--dat", help="also write a gnuplot data file")

    orc = sub.add_parser("oracle", help="print the analytical exchange time in ms")
    orc.add_argument("--profile", required=True)
    orc.add_argument("--transport", default="ideal")
    orc.add_argument("--req", type=int, required=True)
    orc.add_argument("--resp", type=int, required=True)
    return p


def _run(args) -> int:
    extra = {"reconnect": args.reconnect}
    if args.bursts:
        extra["bursts"] = args.bursts
    if args.size:
        extra.update(image_bytes=args.size, log_bytes=args.size, fl_bytes=args.size)
    scenarios = [bench.Scenario(args.scenario, name.strip(), args.transport, args.samples, args.seed, extra)
                 for name in args.profile.split(",") if name.strip()]
    measurements = bench.run_many(scenarios, parallel=args.parallel)
    bench.write_csv(measurements, args.out)
    print(bench.format_table(bench.summarize(measurements)), end="")
    return EXIT_OK


def _report(args) -> int:
    rows, text = bench.report(args.files)
    print(text, end="")
    if args.dat:
        bench.write_gnuplot(rows, args.dat)
    return EXIT_OK


def _oracle(args) -> int:
    try:
        value = bench.oracle(args.profile, args.transport, args.req, args.resp)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    print(f"{value:.3f}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {"run": _run, "report": _report, "oracle": _oracle}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"evolve-bench: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (EvolveError, OSError) as exc:
        print(f"evolve-bench: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
