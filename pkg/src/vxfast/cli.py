"""Command-line entry point.

    vxfast run <scenario-file> [--mode ...] [--rpeer] [--cache-size N]
               [--ct-timeout N] [--seed N] [--report text|machine]
               [--dump-caches]

Exit status: 0 on success, 1 on scenario/validation errors, 2 on usage
errors.
"""

from __future__ import annotations

import argparse
import sys
from typing import Optional, Sequence

from .scenario import MODES, MODE_FASTPATH, ScenarioError, load_scenario
from .sim import Simulation, cost_report


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vxfast")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a scenario and print its report")
    run.add_argument("scenario", help="scenario file path")
    run.add_argument("--mode", choices=MODES, default=MODE_FASTPATH)
    run.add_argument("--rpeer", action="store_true", help="redirect from the container-side veth")
    run.add_argument("--cache-size", type=int, default=None, metavar="N")
    run.add_argument("--ct-timeout", type=int, default=None, metavar="N")
    run.add_argument("--seed", type=int, default=0, metavar="N")
    run.add_argument("--report", choices=("text", "machine"), default="text")
    run.add_argument("--dump-caches", action="store_true")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        scenario = load_scenario(args.scenario)
        sim = Simulation(
            scenario,
            mode=args.mode,
            rpeer=args.rpeer,
            seed=args.seed,
            cache_capacity=args.cache_size,
            ct_timeout=args.ct_timeout,
        )
        metrics = sim.run()
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.report == "machine":
        print(metrics.to_machine())
    else:
        print(metrics.to_text())
        print(cost_report(metrics).to_text())
    if args.dump_caches:
        for name in sorted(sim.cluster.hosts):
            print(f"=== caches on {name} ===")
            print(sim.cluster.hosts[name].caches.dump())
    return 0


if __name__ == "__main__":
    sys.exit(main())
