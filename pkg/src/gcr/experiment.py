"""Multi-seed experiment orchestration and learning-curve aggregation.

``run_experiment`` runs every seed of a config (sequentially), writing per-seed
metric and evaluation CSVs plus a ``summary.json``. A crashing seed is recorded
in the summary and the remaining seeds still run.

``aggregate`` turns a set of CSVs from several methods into mean/std learning
curves, normalized cumulative-return bars and a gnuplot script.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import time
import traceback
from dataclasses import dataclass, field

import numpy as np

from gcr import checkpoint
from gcr import config as C
from gcr.config import ExperimentConfig
from gcr.runtime.sync import evaluate, run_synchronous

log = logging.getLogger(__name__)


@dataclass
class SeedOutcome:
    seed: int
    status: str  # "ok" or "crashed"
    metrics_csv: str | None = None
    eval_csv: str | None = None
    env_steps: int = 0
    cumulative_return: float = 0.0
    final_success: float | None = None
    best_success: float | None = None
    wall_time: float = 0.0
    error: str | None = None


@dataclass
class ExperimentSummary:
    name: str
    reward_mode: str
    out_dir: str
    seeds: list = field(default_factory=list)

    @property
    def ok(self) -> list:
        return [s for s in self.seeds if s.status == "ok"]

    def to_json(self) -> dict:
        returns = [s.cumulative_return for s in self.ok]
        divisor = max(returns) if returns and max(returns) > 0 else 1.0
        return {
            "name": self.name,
            "reward_mode": self.reward_mode,
            "out_dir": self.out_dir,
            "normalization_divisor": divisor,
            "seeds": [dict(vars(s), normalized_return=s.cumulative_return / divisor if s.status == "ok" else None)
                      for s in self.seeds],
            "n_crashed": sum(s.status != "ok" for s in self.seeds),
        }


def _sparse_total(metrics_csv: str) -> float:
    with open(metrics_csv, newline="") as f:
        return float(sum(float(row["sparse_return"]) for row in csv.DictReader(f)))


def _run_seed(cfg: ExperimentConfig, seed: int, out_dir: str, stop_at_success: float | None) -> SeedOutcome:
    t0 = time.time()
    metrics = os.path.join(out_dir, f"metrics_seed{seed}.csv")
    evals = os.path.join(out_dir, f"eval_seed{seed}.csv")
    if cfg.runtime.mode == "distributed":
        # imported lazily: the distributed runtime pulls in sockets and subprocess handling
        from gcr.runtime.distributed import run_distributed
        res = run_distributed(cfg, seed, os.path.join(out_dir, f"seed{seed}"))
        os.replace(res.metrics_path, metrics)
        params = checkpoint.load(os.path.join(out_dir, f"seed{seed}", f"policy_seed{seed}.gcrt"))
        sr, ml = evaluate(cfg, seed, params, cfg.eval_episodes)
        with open(evals, "w") as f:
            f.write(f"step,success_rate,mean_length\n{res.actor_steps},{sr!r},{ml!r}\n")
        successes, steps = [sr], res.actor_steps
    else:
        res = run_synchronous(cfg, seed, out_dir=out_dir, stop_at_success=stop_at_success)
        checkpoint.save(os.path.join(out_dir, f"policy_seed{seed}.gcrt"), res.policy_params)
        successes, steps = [e[1] for e in res.evals], res.env_steps
    return SeedOutcome(seed, "ok", metrics, evals, steps, _sparse_total(metrics),
                       successes[-1] if successes else None, max(successes) if successes else None,
                       time.time() - t0)


def run_experiment(cfg: ExperimentConfig, out_dir: str | None = None, *,
                   stop_at_success: float | None = None) -> ExperimentSummary:
    """Run every seed of ``cfg``; failures are recorded and do not stop later seeds."""
    out_dir = out_dir or os.path.join(cfg.output_dir, cfg.name)
    os.makedirs(out_dir, exist_ok=True)
    C.save(os.path.join(out_dir, "config.json"), cfg)
    summary = ExperimentSummary(cfg.name, cfg.reward_mode, out_dir)
    for seed in cfg.seeds:
        try:
            outcome = _run_seed(cfg, seed, out_dir, stop_at_success)
            log.info("%s seed %d: best success %s in %.0fs", cfg.name, seed, outcome.best_success,
                     outcome.wall_time)
        except Exception as exc:  # a crashed seed must not take the others down
            log.error("%s seed %d crashed: %s", cfg.name, seed, exc)
            outcome = SeedOutcome(seed, "crashed", error="".join(traceback.format_exception_only(exc)).strip())
        summary.seeds.append(outcome)
        _write_summary(out_dir, summary)
    return summary


def _write_summary(out_dir: str, summary: ExperimentSummary) -> None:
    tmp = os.path.join(out_dir, "summary.json.tmp")
    with open(tmp, "w") as f:
        json.dump(summary.to_json(), f, indent=2)
    os.replace(tmp, os.path.join(out_dir, "summary.json"))


# --- aggregation -----------------------------------------------------------------------------------


@dataclass
class Curve:
    method: str
    path: str
    steps: np.ndarray
    values: np.ndarray
    total: float  # the run's cumulative return


def read_curve(path: str, method: str | None = None, column: str | None = None) -> Curve:
    """Load one CSV as a curve.

    Evaluation CSVs give ``success_rate`` against step. Metric CSVs give the
    running sum of ``sparse_return``. In both cases ``total`` is the cumulative
    sparse return of the run (area under the success curve for evaluation CSVs).
    """
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise ValueError(f"{path}: no rows")
    steps = np.array([float(r["step"]) for r in rows])
    if column is None:
        column = "success_rate" if "success_rate" in rows[0] else "sparse_return"
    vals = np.array([float(r[column]) for r in rows])
    if column == "sparse_return":
        vals = np.cumsum(vals)
        total = float(vals[-1])
    else:
        total = float(np.trapezoid(vals, steps)) if len(vals) > 1 else float(vals[0])
    method = method or os.path.basename(os.path.dirname(os.path.abspath(path)))
    return Curve(method, path, steps, vals, total)


@dataclass
class Aggregate:
    grid: np.ndarray
    curves: dict  # method -> (mean, std, n) arrays over the grid
    bars: dict  # method -> (mean, std, n) of normalized cumulative return
    divisor: float
    resampled: bool
    notes: list = field(default_factory=list)


def aggregate(curves: list[Curve], n_grid: int | None = None) -> Aggregate:
    """Mean and (population) standard deviation per method on a shared step grid.

    Cumulative returns are divided by the largest one across every run of every
    method. Runs on different step grids are linearly interpolated onto a common
    grid spanning the range they all cover.
    """
    if not curves:
        raise ValueError("aggregate needs at least one curve")
    same = all(len(c.steps) == len(curves[0].steps) and np.array_equal(c.steps, curves[0].steps)
               for c in curves)
    notes = []
    if same:
        grid = curves[0].steps
    else:
        lo = max(c.steps[0] for c in curves)
        hi = min(c.steps[-1] for c in curves)
        if hi < lo:
            raise ValueError("step grids do not overlap")
        n = n_grid or max(len(c.steps) for c in curves)
        grid = np.linspace(lo, hi, n)
        notes.append(f"step grids differ; resampled to {n} points on [{lo:g}, {hi:g}]")
    totals = np.array([c.total for c in curves])
    divisor = float(totals.max()) if totals.max() > 0 else 1.0
    out_curves, bars = {}, {}
    for method in dict.fromkeys(c.method for c in curves):
        mine = [c for c in curves if c.method == method]
        ys = np.stack([c.values if same else np.interp(grid, c.steps, c.values) for c in mine])
        out_curves[method] = (ys.mean(axis=0), ys.std(axis=0), len(mine))
        norm = np.array([c.total for c in mine]) / divisor
        bars[method] = (float(norm.mean()), float(norm.std()), len(mine))
    return Aggregate(np.asarray(grid, dtype=float), out_curves, bars, divisor, not same, notes)


_PLOT_SCRIPT = """\
# gnuplot script: learning curves and normalized cumulative returns
set datafile separator ","
set terminal pngcairo size 1200,450
set output "{png}"
set multiplot layout 1,2
set key left top
set xlabel "environment steps"
set ylabel "{ylabel}"
plot {curve_plots}
set style data histogram
set style histogram errorbars gap 2 lw 1
set style fill solid 0.6
set yrange [0:*]
set ylabel "normalized cumulative return"
set xlabel ""
plot "bars.csv" using 2:3:xtic(1) skip 1 title ""
unset multiplot
"""


def write_aggregate(agg: Aggregate, out_dir: str, ylabel: str = "success rate") -> dict:
    """Write ``curves.csv``, ``bars.csv``, ``aggregate.json`` and ``plot.gp``; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {k: os.path.join(out_dir, k) for k in ("curves.csv", "bars.csv", "aggregate.json", "plot.gp")}
    methods = list(agg.curves)
    with open(paths["curves.csv"], "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step"] + [f"{m}_{s}" for m in methods for s in ("mean", "std")])
        for i, step in enumerate(agg.grid):
            w.writerow([repr(float(step))] + [repr(float(agg.curves[m][k][i])) for m in methods for k in (0, 1)])
    with open(paths["bars.csv"], "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["method", "mean", "std", "n"])
        for m, (mean, std, n) in agg.bars.items():
            w.writerow([m, repr(mean), repr(std), n])
    with open(paths["aggregate.json"], "w") as f:
        json.dump({"divisor": agg.divisor, "resampled": agg.resampled, "notes": agg.notes,
                   "bars": {m: {"mean": b[0], "std": b[1], "n": b[2]} for m, b in agg.bars.items()}},
                  f, indent=2)
    curve_plots = ", \\\n     ".join(
        f'"curves.csv" using 1:{2 + 2 * i} skip 1 with lines lw 2 title "{m}"' for i, m in enumerate(methods))
    with open(paths["plot.gp"], "w") as f:
        f.write(_PLOT_SCRIPT.format(png="curves.png", ylabel=ylabel, curve_plots=curve_plots))
    return paths


def success_auc(steps, success) -> float:
    """Area under a success-rate curve, divided by the step span (so it lies in [0, 1])."""
    steps = np.asarray(steps, dtype=float)
    success = np.asarray(success, dtype=float)
    if len(steps) < 2:
        return float(success[0]) if len(success) else 0.0
    return float(np.trapezoid(success, steps) / (steps[-1] - steps[0]))


def first_reaching(evals, threshold: float) -> int | None:
    """Step of the first evaluation at or above ``threshold``, else ``None``."""
    for step, sr, *_ in evals:
        if sr >= threshold:
            return int(step)
    return None


__all__ = ["Aggregate", "Curve", "ExperimentSummary", "SeedOutcome", "aggregate", "first_reaching",
           "read_curve", "run_experiment", "success_auc", "write_aggregate"]
