#!/usr/bin/env python3
"""Sparse reward versus learned GCR shaping on Lift 8x8 (4 seeds, 150k steps)."""

import sys

from _common import parser, report, setup

from gcr.studies import rl_rescue

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3])
    p.add_argument("--budget", type=int, default=150_000)
    p.add_argument("--threshold", type=float, default=0.8)
    p.add_argument("--methods", nargs="+", default=["sparse", "gcr_sc", "gcr_ic"])
    args = p.parse_args()
    setup(args)
    res = rl_rescue(tuple(args.seeds), args.budget, args.threshold, tuple(args.methods))
    sys.exit(report(args, res, f"gcr_ic within gcr_sc band: {res.ic_in_band}"))
