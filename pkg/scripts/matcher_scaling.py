"""Saturated match throughput and latency vs number of matcher instances.

    python scripts/matcher_scaling.py --matchers 1,2,4,8
"""
from _common import base_parser, profile_from, run_sweep


def main():
    p = base_parser(__doc__)
    p.add_argument("--matchers", default="1,2,4,8")
    args = p.parse_args()
    values = [int(v) for v in args.matchers.split(",")]
    points = run_sweep(args, "matchers", "matchers", values, profile_from(args))
    base = points[0].saturated_throughput or float("nan")
    for pt in points:
        print(f"N={pt.value}: {pt.saturated_throughput:.1f} matches/s ({pt.saturated_throughput / base:.2f}x)")


if __name__ == "__main__":
    main()
