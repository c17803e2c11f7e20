import argparse
import asyncio
import json
import logging
from pathlib import Path

from cbroker.bench.load import reports_to_csv
from cbroker.bench.sweep import SaturationSearch, summary_csv, sweep
from cbroker.bench.workload import WorkloadProfile
from cbroker.cluster import ClusterSpec


def base_parser(description):
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--out-dir", default="results")
    p.add_argument("--subscriptions", type=int, default=256)
    p.add_argument("--constraints", type=int, default=40)
    p.add_argument("--selectivity", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--start-rate", type=float, default=50.0)
    p.add_argument("--step-duration", type=float, default=5.0)
    p.add_argument("--verify", action="store_true", help="oracle-check every step (slower)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def profile_from(args, **extra):
    return WorkloadProfile(num_subscriptions=args.subscriptions,
                           constraints_per_subscription=args.constraints,
                           match_selectivity_target=args.selectivity, seed=args.seed, **extra)


def run_sweep(args, name, dimension, values, profile, spec=None):
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    search = SaturationSearch(start_rate=args.start_rate, step_duration=args.step_duration,
                              verify=args.verify)
    points = asyncio.run(sweep(dimension, values, profile, spec=spec or ClusterSpec(), search=search))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{name}_summary.csv").write_text(summary_csv(points))
    (out / f"{name}_steps.csv").write_text(reports_to_csv([r for p in points for r in p.reports]))
    (out / f"{name}.json").write_text(json.dumps(
        [{"value": p.value, "saturated_throughput": p.saturated_throughput, "error": p.error,
          "reports": [r.to_json() for r in p.reports]} for p in points], indent=1, default=str))
    print(summary_csv(points), end="")
    return points
