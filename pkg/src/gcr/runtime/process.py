"""Entry point for one runtime role: ``python -m gcr.runtime.process --role actor ...``."""

from __future__ import annotations

import argparse
import logging
import os
import sys

from gcr.config import ConfigError, load
from gcr.runtime.core import Schedule
from gcr.runtime.roles import ROLES, RUNNERS, RoleContext


def parse_peer(text: str) -> tuple[str, str]:
    name, sep, addr = text.partition("=")
    if not sep or name not in ROLES:
        raise argparse.ArgumentTypeError(f"expected ROLE=HOST:PORT with ROLE in {ROLES}, got {text!r}")
    return name, addr


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gcr-role", description=__doc__)
    p.add_argument("--role", required=True, choices=ROLES)
    p.add_argument("--listen", help="HOST:PORT to accept peers on")
    p.add_argument("--connect", action="append", type=parse_peer, default=[], metavar="ROLE=HOST:PORT")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--record-schedule", metavar="PATH", help="write this role's scheduling decisions here")
    p.add_argument("--replay-schedule", metavar="PATH", help="follow a previously recorded schedule")
    p.add_argument("--pretrained", metavar="PATH", help="initial reward model (computed if absent)")
    p.add_argument("--out-dir", metavar="DIR", help="where the predictor writes metrics and the label stream")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=os.environ.get("GCR_LOG_LEVEL", "WARNING").upper(),
                        format=f"%(asctime)s {args.role} %(levelname)s %(message)s")
    try:
        cfg = load(args.config)
        replay = Schedule.load(args.replay_schedule) if args.replay_schedule else None
    except (ConfigError, OSError, ValueError, KeyError) as exc:
        logging.error("bad configuration: %s", exc)
        return 2
    ctx = RoleContext(cfg, args.seed, args.listen, dict(args.connect), args.record_schedule, replay,
                      args.pretrained, args.out_dir)
    try:
        RUNNERS[args.role](ctx)
    except Exception:
        logging.exception("role %s failed", args.role)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
