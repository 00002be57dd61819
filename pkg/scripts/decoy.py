#!/usr/bin/env python3
"""Does the reward model rank decoy states below the frame just before the goal?"""

import sys

from _common import parser, report, setup

from gcr.studies import decoy_discrimination

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=2000, help="reward-model training steps")
    p.add_argument("--task", default="lift", choices=["lift", "stack", "drawer"])
    args = p.parse_args()
    setup(args)
    res = decoy_discrimination(seed=args.seed, steps=args.steps, task=args.task)
    sys.exit(report(args, res, f"GCR(SC) {res.gcr_rate:.2f} vs VIP {res.vip_rate:.2f} on {res.n_pairs} pairs"))
