"""Cost of the permission-filtering stage with a handful of policies installed.

Every subscriber belongs to every group, so policies are evaluated on each
matched pair without ever blocking; the difference is pure overhead.
"""
from _common import base_parser, profile_from, run_sweep


def main():
    p = base_parser(__doc__)
    p.add_argument("--policies", type=int, default=4)
    args = p.parse_args()
    profile = profile_from(args, num_policies=args.policies, groups=["A", "B"],
                           group_membership_prob=1.0)
    off, on = run_sweep(args, "permissions", "permission_filtering", ["off", "on"], profile)
    if off.saturated_throughput:
        drop = 1 - on.saturated_throughput / off.saturated_throughput
        print(f"saturated overhead with {args.policies} policies: {drop:.1%}")


if __name__ == "__main__":
    main()
