"""Latency percentiles across offered rates on one cluster (fresh local cluster
unless --lb points at a running front end)."""
import asyncio
import logging
from pathlib import Path

from _common import base_parser, profile_from
from cbroker.bench.load import reports_to_csv
from cbroker.bench.sweep import SaturationSearch, sweep
from cbroker.cluster import ClusterSpec


def main():
    p = base_parser(__doc__)
    p.add_argument("--rates", default="25,50,100,200,400")
    p.add_argument("--matchers", type=int, default=1)
    p.add_argument("--lb")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    search = SaturationSearch(step_duration=args.step_duration, verify=args.verify)
    points = asyncio.run(sweep("rate", [float(r) for r in args.rates.split(",")], profile_from(args),
                               spec=ClusterSpec(matchers=args.matchers), search=search, lb_url=args.lb))
    csv = reports_to_csv([pt.best for pt in points if pt.best])
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"latency_n{args.matchers}.csv").write_text(csv)
    print(csv, end="")


if __name__ == "__main__":
    main()
