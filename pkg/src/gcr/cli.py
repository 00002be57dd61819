"""Command-line entry point: ``gcr <verb> ...``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure,
4 acceptance-check failure (``replay-check`` found a mismatch).
"""

from __future__ import annotations

import argparse
import filecmp
import json
import logging
import os
import sys
from dataclasses import replace

from gcr import checkpoint
from gcr import config as C
from gcr import dataset
from gcr.config import ConfigError, ExperimentConfig

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 0, 2, 3, 4

log = logging.getLogger("gcr")


def _config(args) -> ExperimentConfig:
    cfg = C.load(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seeds", None):
        cfg = replace(cfg, seeds=tuple(args.seeds))
    if getattr(args, "steps", None):
        cfg = replace(cfg, steps=args.steps)
    return cfg


def cmd_gen_demos(args) -> int:
    from gcr.runtime import core
    cfg = _config(args)
    demos = core.make_demos(cfg, args.seed)
    dataset.save_episodes(os.path.join(args.out, "target"), demos.full)
    if demos.other:
        dataset.save_episodes(os.path.join(args.out, "other"), demos.other)
    print(json.dumps({"target": len(demos.full), "other": len(demos.other), "out": args.out}))
    return EXIT_OK


def cmd_pretrain_reward(args) -> int:
    from gcr.runtime import core
    from gcr.similarity import save_model
    cfg = _config(args)
    if cfg.reward_mode == "sparse":
        raise ConfigError("reward_mode=sparse has no reward model to pre-train")
    if args.demos:
        full = dataset.load_episodes(os.path.join(args.demos, "target"))
        other_dir = os.path.join(args.demos, "other")
        other = dataset.load_episodes(other_dir) if os.path.isdir(other_dir) else []
        demos = core.DemoSet([ep.passive() for ep in full], other, full)
    else:
        demos = core.make_demos(cfg, args.seed)
    model = core.pretrain_reward_model(cfg, args.seed, demos, log=log.info)
    save_model(args.out, model)
    print(json.dumps({"out": args.out, "steps": cfg.reward_model.pretrain_steps}))
    return EXIT_OK


def cmd_train(args) -> int:
    from gcr.experiment import run_experiment
    cfg = _config(args)
    if args.distributed:
        cfg = replace(cfg, runtime=replace(cfg.runtime, mode="distributed"))
    summary = run_experiment(cfg, args.out_dir, stop_at_success=args.stop_at_success)
    print(json.dumps(summary.to_json(), indent=2))
    return EXIT_RUNTIME if any(s.status != "ok" for s in summary.seeds) else EXIT_OK


def cmd_eval(args) -> int:
    from gcr.runtime.sync import evaluate
    cfg = _config(args)
    params = checkpoint.load(args.policy)
    sr, ml = evaluate(cfg, args.seed, params, args.episodes or cfg.eval_episodes)
    print(json.dumps({"success_rate": sr, "mean_length": ml}))
    return EXIT_OK


def cmd_aggregate(args) -> int:
    from gcr.experiment import aggregate, read_curve, write_aggregate
    curves = []
    for spec in args.csvs:
        method, sep, path = spec.partition("=")
        curves.append(read_curve(path, method) if sep else read_curve(spec))
    agg = aggregate(curves)
    paths = write_aggregate(agg, args.out)
    for note in agg.notes:
        log.warning(note)
    print(json.dumps({"divisor": agg.divisor, "resampled": agg.resampled,
                      "bars": {m: list(b) for m, b in agg.bars.items()}, "files": paths}, indent=2))
    return EXIT_OK


def cmd_replay_check(args) -> int:
    """Run the five-process runtime, replay its schedule synchronously and compare outputs byte for byte."""
    from gcr.runtime.distributed import run_distributed
    from gcr.runtime.sync import run_synchronous
    cfg = _config(args)
    dist_dir = os.path.join(args.out_dir, "distributed")
    sync_dir = os.path.join(args.out_dir, "sync")
    res = run_distributed(cfg, args.seed, dist_dir, timeout=args.timeout)
    sync_stream = os.path.join(sync_dir, f"stream_seed{args.seed}.bin")
    run_synchronous(cfg, args.seed, schedule=res.schedule, out_dir=sync_dir, stream_path=sync_stream,
                    evaluate_policy=False)
    report = {
        "episodes": len(res.schedule.episodes),
        "metrics_equal": filecmp.cmp(res.metrics_path, os.path.join(sync_dir, f"metrics_seed{args.seed}.csv"),
                                     shallow=False),
        "stream_equal": filecmp.cmp(res.stream_path, sync_stream, shallow=False),
    }
    print(json.dumps(report))
    return EXIT_OK if report["metrics_equal"] and report["stream_equal"] else EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gcr", description="Goal-contrastive reward experiments on GridManip.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def verb(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="experiment JSON (defaults apply when omitted)")
        sp.set_defaults(fn=fn)
        return sp

    sp = verb("gen-demos", cmd_gen_demos, "write scripted demonstrations to a directory")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = verb("pretrain-reward", cmd_pretrain_reward, "pre-train the similarity model on demonstrations")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--demos", help="directory written by gen-demos (generated on the fly if omitted)")
    sp.add_argument("--out", required=True)

    sp = verb("train", cmd_train, "run every seed of an experiment")
    sp.add_argument("--out-dir")
    sp.add_argument("--seeds", type=int, nargs="+")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--distributed", action="store_true", help="use the multi-process runtime")
    sp.add_argument("--stop-at-success", type=float, help="end a seed early once evaluation reaches this rate")

    sp = verb("eval", cmd_eval, "greedy evaluation of a saved policy")
    sp.add_argument("--policy", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--episodes", type=int)

    sp = sub.add_parser("aggregate", help="mean/std curves and normalized returns from CSVs")
    sp.add_argument("csvs", nargs="+", metavar="[METHOD=]CSV",
                    help="metric or eval CSVs; the method defaults to the parent directory name")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_aggregate)

    sp = verb("replay-check", cmd_replay_check, "check the distributed runtime against its synchronous replay")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--timeout", type=float, default=3600.0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, dataset.DatasetError) as exc:
        print(f"gcr: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"gcr: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
