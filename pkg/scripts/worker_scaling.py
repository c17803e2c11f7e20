"""Worker-pool size sweep on one matcher; correctness is checked at every step."""
from _common import base_parser, profile_from, run_sweep


def main():
    p = base_parser(__doc__)
    p.add_argument("--workers", default="1,2,4")
    args = p.parse_args()
    args.verify = True
    points = run_sweep(args, "workers", "workers", [int(v) for v in args.workers.split(",")],
                       profile_from(args))
    for pt in points:
        bad = [r.correctness for r in pt.reports if r.correctness.get("missing") or r.correctness.get("duplicates")]
        print(f"workers={pt.value}: {pt.saturated_throughput:.1f} matches/s, "
              f"{'exact' if not bad else f'{len(bad)} inexact steps'}")


if __name__ == "__main__":
    main()
