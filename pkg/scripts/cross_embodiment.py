#!/usr/bin/env python3
"""3 target-embodiment demos, with and without 50 other-embodiment demos, and the omega1=0 ablation."""

import sys

from _common import parser, report, setup

from gcr.studies import cross_embodiment

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3])
    p.add_argument("--budget", type=int, default=60_000)
    args = p.parse_args()
    setup(args)
    res = cross_embodiment(tuple(args.seeds), args.budget)
    sys.exit(report(args, res, f"improved on {res.n_improved} seeds; ablation within noise: "
                              f"{res.ablation_within_noise} (noise {res.noise:.3f})"))
