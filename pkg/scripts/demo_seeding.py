#!/usr/bin/env python3
"""Stack 8x8 with 5 demonstrations seeded into replay: GCR versus sparse reward."""

import sys

from _common import parser, report, setup

from gcr.studies import demo_seeding

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3])
    p.add_argument("--budget", type=int, default=150_000)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--demo-ratio", type=float, default=0.25)
    args = p.parse_args()
    setup(args)
    sys.exit(report(args, demo_seeding(tuple(args.seeds), args.budget, args.threshold, args.demo_ratio)))
