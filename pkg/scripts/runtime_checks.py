#!/usr/bin/env python3
"""Distributed-versus-synchronous equivalence, protocol fuzzing and actor liveness."""

import sys

from _common import parser, report, setup

from gcr import studies

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("check", choices=["equivalence", "fuzz", "liveness"])
    p.add_argument("--steps", type=int, default=5_000, help="equivalence run length")
    p.add_argument("--duration", type=float, default=120.0, help="liveness run length in seconds")
    p.add_argument("--control-hz", type=float, default=100.0)
    p.add_argument("--out-dir", help="keep the run directories here")
    args = p.parse_args()
    setup(args)
    if args.check == "equivalence":
        res = studies.distributed_equivalence(steps=args.steps, out_dir=args.out_dir)
    elif args.check == "fuzz":
        res = studies.protocol_fuzz()
    else:
        res = studies.actor_liveness(args.duration, args.control_hz, out_dir=args.out_dir)
    sys.exit(report(args, res))
