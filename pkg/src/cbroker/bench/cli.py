"""``bench`` command line: gen, run, sweep, verify."""
from __future__ import annotations

import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path

from ..cluster import ClusterSpec
from . import oracle
from .load import reports_to_csv, run_load
from .sweep import DIMENSIONS, SaturationSearch, summary_csv, sweep
from .workload import WorkloadProfile, dumps, gen_workload


def _load_json(path: str | None) -> dict:
    return json.loads(Path(path).read_text()) if path else {}


def cmd_gen(args) -> int:
    profile = WorkloadProfile.from_json(_load_json(args.profile))
    workload = gen_workload(profile)
    Path(args.out).write_text(dumps(workload))
    if args.groups_out:
        Path(args.groups_out).write_text(json.dumps(workload["groups"], indent=1))
    print(json.dumps({"subscriptions": len(workload["subscriptions"]),
                      "policies": len(workload["policies"]),
                      **workload["calibration"]}))
    return 0


def cmd_run(args) -> int:
    workload = _load_json(args.workload)
    rate = args.rate or workload["profile"]["publication_rate"]
    duration = args.duration or workload["profile"]["duration"]
    report = asyncio.run(run_load(workload, args.lb, rate, duration, warmup=args.warmup,
                                  permission_filtering=not args.no_permission_filtering,
                                  trace_out=args.trace))
    report.dimension, report.dimension_value = "rate", rate
    doc = report.to_json()
    if args.report:
        Path(args.report).write_text(json.dumps(doc, indent=1))
    if args.csv:
        Path(args.csv).write_text(reports_to_csv([report]))
    print(reports_to_csv([report]), end="")
    return 0


def cmd_sweep(args) -> int:
    profile = WorkloadProfile.from_json(_load_json(args.profile))
    spec = ClusterSpec.from_json(_load_json(args.cluster_config))
    search = SaturationSearch(start_rate=args.start_rate, growth=args.growth,
                              step_duration=args.step_duration, max_steps=args.max_steps,
                              verify=not args.no_verify)
    values = [v for v in args.values.split(",") if v]
    points = asyncio.run(sweep(args.dimension, values, profile, spec=spec, search=search,
                               lb_url=args.lb))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    all_reports = [r for p in points for r in p.reports]
    (out / "reports.csv").write_text(reports_to_csv(all_reports))
    (out / "summary.csv").write_text(summary_csv(points))
    (out / "reports.json").write_text(json.dumps(
        [{"value": p.value, "saturated_throughput": p.saturated_throughput, "error": p.error,
          "reports": [r.to_json() for r in p.reports]} for p in points], indent=1))
    print(summary_csv(points), end="")
    return 1 if any(p.error for p in points) else 0


def cmd_verify(args) -> int:
    result = oracle.verify(_load_json(args.trace))
    print(json.dumps(result))
    bad = result["missing"] or result["duplicates"] or result["extra"]
    return 1 if bad else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bench", description="workload generator and load harness")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a seeded workload")
    p.add_argument("--profile", help="WorkloadProfile JSON (defaults if omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--groups-out", help="also write the group map for the matchers")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("run", help="fixed-rate load against a running cluster")
    p.add_argument("--workload", required=True)
    p.add_argument("--lb", required=True, help="front-end base URL")
    p.add_argument("--rate", type=float)
    p.add_argument("--duration", type=float)
    p.add_argument("--warmup", type=int, default=20)
    p.add_argument("--report")
    p.add_argument("--csv")
    p.add_argument("--trace", help="write the recorded trace for `bench verify`")
    p.add_argument("--no-permission-filtering", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="saturation sweep over one dimension")
    p.add_argument("--dimension", required=True, choices=DIMENSIONS)
    p.add_argument("--values", required=True, help="comma separated, e.g. 1,2,4,8 or off,on")
    p.add_argument("--profile")
    p.add_argument("--cluster-config", help="ClusterSpec JSON for the spawned clusters")
    p.add_argument("--lb", help="existing front end (rate sweeps only)")
    p.add_argument("--start-rate", type=float, default=20.0)
    p.add_argument("--growth", type=float, default=1.5)
    p.add_argument("--step-duration", type=float, default=5.0)
    p.add_argument("--max-steps", type=int, default=12)
    p.add_argument("--no-verify", action="store_true")
    p.add_argument("--out-dir", default="sweep-out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="recompute expected deliveries for a trace")
    p.add_argument("--trace", required=True)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> None:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    sys.exit(args.func(args))


if __name__ == "__main__":
    main()
