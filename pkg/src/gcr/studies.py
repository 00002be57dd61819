"""Scaled-down studies on GridManip: each returns a result object with a ``passed`` verdict.

These back the scripts in ``scripts/`` and the acceptance suite. Budgets and
thresholds are arguments so the same code runs at full and at smoke scale.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from gcr import env as E
from gcr.config import DemoConfig, ExperimentConfig, RewardModelConfig
from gcr.experiment import first_reaching, success_auc
from gcr.objectives import Episode, GcrHyperparams, RewardTrainer, update_negative_buffer
from gcr.runtime import core
from gcr.runtime.sync import run_synchronous
from gcr.similarity import init_model, similarity

log = logging.getLogger(__name__)


@dataclass
class SeedRun:
    method: str
    seed: int
    evals: list  # (step, success_rate, mean_length)
    wall_time: float

    def reached(self, threshold: float) -> int | None:
        return first_reaching(self.evals, threshold)

    def auc(self, budget: int) -> float:
        steps = [0] + [e[0] for e in self.evals]
        succ = [0.0] + [e[1] for e in self.evals]
        if steps[-1] < budget:  # an early stop keeps its last evaluation
            steps.append(budget)
            succ.append(succ[-1])
        return success_auc(steps, succ)


def run_seeds(method: str, cfg: ExperimentConfig, seeds, stop_at: float | None = None) -> list[SeedRun]:
    out = []
    for seed in seeds:
        t0 = time.time()
        res = run_synchronous(cfg, seed, stop_at_success=stop_at)
        run = SeedRun(method, seed, res.evals, time.time() - t0)
        log.info("%s seed %d: best %.2f in %.0fs", method, seed, max((e[1] for e in res.evals), default=0.0),
                 run.wall_time)
        out.append(run)
    return out


def lift_config(**overrides) -> ExperimentConfig:
    base = dict(env=E.EnvConfig(task="lift", width=8, height=8, obs_size=16), steps=150_000,
                eval_every=5_000, eval_episodes=50)
    base.update(overrides)
    return ExperimentConfig(**base)


# --- sparse-reward rescue on Lift --------------------------------------------------------------------


@dataclass
class RescueResult:
    threshold: float
    budget: int
    runs: dict = field(default_factory=dict)  # method -> list[SeedRun]

    def n_reached(self, method: str) -> int:
        return sum(r.reached(self.threshold) is not None for r in self.runs[method])

    def steps_to_threshold(self, method: str) -> list[int]:
        # an unreached seed counts as one evaluation past the budget
        miss = self.budget + 5_000
        return [r.reached(self.threshold) or miss for r in self.runs[method]]

    @property
    def ic_in_band(self) -> bool:
        """IC matches SC: reach counts differ by at most one seed and the IC median
        steps-to-threshold lies inside the range spanned by the SC seeds."""
        if "gcr_ic" not in self.runs:
            return True
        sc, ic = self.steps_to_threshold("gcr_sc"), self.steps_to_threshold("gcr_ic")
        close = abs(self.n_reached("gcr_ic") - self.n_reached("gcr_sc")) <= 1
        return close and min(sc) <= float(np.median(ic)) <= max(sc)

    @property
    def passed(self) -> bool:
        n = len(self.runs["gcr_sc"])
        need = int(np.ceil(0.75 * n))
        return (self.n_reached("gcr_sc") >= need and self.n_reached("sparse") <= n - need
                and self.ic_in_band)

    def table(self) -> str:
        lines = []
        for m, runs in self.runs.items():
            steps = ["-" if r.reached(self.threshold) is None else str(r.reached(self.threshold)) for r in runs]
            best = [f"{max((e[1] for e in r.evals), default=0.0):.2f}" for r in runs]
            lines.append(f"{m:>8}: reached {self.n_reached(m)}/{len(runs)}  steps {steps}  best {best}")
        return "\n".join(lines)


def rl_rescue(seeds=(0, 1, 2, 3), budget: int = 150_000, threshold: float = 0.8,
              methods=("sparse", "gcr_sc", "gcr_ic"), **overrides) -> RescueResult:
    """Sparse reward versus learned shaping on Lift 8x8; each seed stops once it reaches ``threshold``."""
    res = RescueResult(threshold, budget)
    for m in methods:
        cfg = lift_config(reward_mode=m, steps=budget, **overrides)
        res.runs[m] = run_seeds(m, cfg, seeds, stop_at=threshold)
    return res


# --- decoy discrimination --------------------------------------------------------------------------


def _states(cfg: E.EnvConfig, start: E.EnvState) -> list:
    return E.rollout(cfg, start, E.demo_actions(cfg, start))[0]


def decoy_episode(cfg: E.EnvConfig, rng: np.random.Generator, episode_id: str = "") -> Episode:
    """A failed episode that traces the demonstrated arm motion while the objects never move."""
    states = _states(cfg, E.reset(cfg, rng))
    frames = np.stack([E.render(E.make_decoy(cfg, s), cfg) for s in states])
    return Episode(frames, False, cfg.embodiment, "online", episode_id=episode_id, task=cfg.task)


@dataclass
class DecoyResult:
    gcr_rate: float
    vip_rate: float
    n_pairs: int
    min_rate: float = 0.9

    @property
    def passed(self) -> bool:
        return self.gcr_rate >= self.min_rate and self.vip_rate < self.gcr_rate


def decoy_discrimination(seed: int = 0, n_demos: int = 50, n_failures: int = 50, n_pairs: int = 100,
                         steps: int = 2000, task: str = "lift", hp: GcrHyperparams | None = None,
                         hidden=(256, 128)) -> DecoyResult:
    """Train SC and VIP-only models on the same demos and decoy failures; count held-out pairs
    where the decoy scores below the frame just before the goal."""
    cfg = E.EnvConfig(task=task, width=8, height=8, obs_size=16, seed=seed)
    hp = hp or GcrHyperparams()
    demos = E.generate_demos(cfg, n_demos, seed=seed * 1000 + 3)
    rng = np.random.default_rng(seed * 1000 + 5)
    failures = [decoy_episode(cfg, rng, f"decoy-{i}") for i in range(n_failures)]
    # held-out goals from a disjoint demo seed
    test_rng = np.random.default_rng(seed * 1000 + 7)
    pairs = []
    while len(pairs) < n_pairs:
        states = _states(cfg, E.reset(cfg, test_rng))
        pairs.append((E.render(states[-2], cfg), E.render(E.make_decoy(cfg, states[-1]), cfg),
                      E.render(states[-1], cfg)))

    rates = {}
    for kind in ("sc", "vip"):
        model = init_model(cfg.obs_shape, hidden, 32, seed=seed * 7 + 1)
        trainer = RewardTrainer(model, demos, hp, kind=kind, seed=seed * 7 + 2)
        for ep in failures:
            trainer.ingest(ep)
        for _ in range(steps):
            trainer.step()
        ok = [similarity(trainer.model, d, g) < similarity(trainer.model, near, g) for near, d, g in pairs]
        rates[kind] = float(np.mean(ok))
    return DecoyResult(rates["sc"], rates["vip"], n_pairs)


# --- demo-seeded replay on Stack ----------------------------------------------------------------------


def stack_config(**overrides) -> ExperimentConfig:
    base = dict(env=E.EnvConfig(task="stack", width=8, height=8, obs_size=16), steps=150_000,
                eval_every=5_000, eval_episodes=50, demos=DemoConfig(target=5, seeding=True))
    base.update(overrides)
    return ExperimentConfig(**base)


def demo_seeding(seeds=(0, 1, 2, 3), budget: int = 150_000, threshold: float = 0.5,
                 demo_ratio: float = 0.25, **overrides) -> RescueResult:
    """GCR versus sparse reward, both with demonstrations seeded into replay."""
    res = RescueResult(threshold, budget)
    for m in ("sparse", "gcr_sc"):
        cfg = stack_config(reward_mode=m, steps=budget, **overrides)
        cfg = replace(cfg, rl=replace(cfg.rl, demo_ratio=demo_ratio))
        res.runs[m] = run_seeds(m, cfg, seeds, stop_at=threshold)
    return res


# --- cross-embodiment demonstrations ---------------------------------------------------------------


@dataclass
class CrossEmbodimentResult:
    budget: int
    runs: dict = field(default_factory=dict)  # "target_only" | "cross" | "cross_no_pos" -> list[SeedRun]

    def aucs(self, key: str) -> np.ndarray:
        return np.array([r.auc(self.budget) for r in self.runs[key]])

    @property
    def n_improved(self) -> int:
        return int(np.sum(self.aucs("cross") > self.aucs("target_only")))

    @property
    def noise(self) -> float:
        """Spread of the baseline: the larger of its seed std and its median absolute deviation."""
        base = self.aucs("target_only")
        return float(max(base.std(), np.median(np.abs(base - np.median(base)))))

    @property
    def ablation_within_noise(self) -> bool:
        gap = abs(np.median(self.aucs("cross_no_pos")) - np.median(self.aucs("target_only")))
        return bool(gap <= self.noise)

    @property
    def passed(self) -> bool:
        n = len(self.runs["target_only"])
        return self.n_improved >= int(np.ceil(0.75 * n)) and self.ablation_within_noise

    def table(self) -> str:
        return "\n".join(f"{k:>13}: auc {np.round(self.aucs(k), 3).tolist()} median {np.median(self.aucs(k)):.3f}"
                         for k in self.runs)


def cross_embodiment(seeds=(0, 1, 2, 3), budget: int = 60_000, n_target: int = 3, n_other: int = 50,
                     **overrides) -> CrossEmbodimentResult:
    res = CrossEmbodimentResult(budget)
    variants = {
        "target_only": dict(demos=DemoConfig(target=n_target)),
        "cross": dict(demos=DemoConfig(target=n_target, other=n_other)),
        "cross_no_pos": dict(demos=DemoConfig(target=n_target, other=n_other),
                             gcr=replace(GcrHyperparams(), omega1=0.0)),
    }
    for key, kw in variants.items():
        cfg = lift_config(reward_mode="gcr_sc", steps=budget, **kw, **overrides)
        res.runs[key] = run_seeds(key, cfg, seeds)
    return res


# --- runtime checks ----------------------------------------------------------------------------------


@dataclass
class EquivalenceResult:
    episodes: int
    reward_versions: int
    policy_versions: int
    metrics_equal: bool
    stream_equal: bool
    wall_time: float

    @property
    def passed(self) -> bool:
        return self.metrics_equal and self.stream_equal


def distributed_equivalence(seed: int = 0, steps: int = 5_000, out_dir: str | None = None,
                            timeout: float = 600.0, checkpoint_every: int = 20, **overrides) -> EquivalenceResult:
    """Run the five-process runtime, replay its recorded schedule in one process, compare bytes.

    Reward checkpoints ship every ``checkpoint_every`` learner steps so that a
    short run still applies several reward-model versions.
    """
    import filecmp
    import tempfile

    from gcr.runtime.distributed import run_distributed

    t0 = time.time()
    overrides.setdefault("reward_model", RewardModelConfig(checkpoint_every=checkpoint_every))
    cfg = lift_config(reward_mode="gcr_sc", steps=steps, **overrides)
    with tempfile.TemporaryDirectory() as tmp:
        root = out_dir or tmp
        res = run_distributed(cfg, seed, f"{root}/distributed", timeout=timeout)
        sync_stream = f"{root}/sync/stream_seed{seed}.bin"
        run_synchronous(cfg, seed, schedule=res.schedule, out_dir=f"{root}/sync", stream_path=sync_stream,
                        evaluate_policy=False)
        eps = res.schedule.episodes
        return EquivalenceResult(
            len(eps), len({rv for _, rv in eps}), len({pv for pv, _ in eps}),
            filecmp.cmp(res.metrics_path, f"{root}/sync/metrics_seed{seed}.csv", shallow=False),
            filecmp.cmp(res.stream_path, sync_stream, shallow=False), time.time() - t0)


@dataclass
class FuzzResult:
    n: int
    roundtrip_failures: int
    stream_ok: bool
    corruption: dict  # corruption kind -> (expected code, codes seen)

    @property
    def passed(self) -> bool:
        return (self.roundtrip_failures == 0 and self.stream_ok
                and all(seen == {code} for code, seen in self.corruption.values()))


def protocol_fuzz(n: int = 100_000, seed: int = 0, max_payload: int = 256) -> FuzzResult:
    """Round-trip ``n`` random envelopes, then check that each kind of corruption maps to its error code."""
    import struct

    from gcr import protocol as P

    rng = np.random.default_rng(seed)
    types = list(P.MsgType)
    frames, failures = [], 0
    for _ in range(n):
        env = P.Envelope(types[rng.integers(len(types))], rng.bytes(int(rng.integers(0, max_payload + 1))))
        frame = P.encode_envelope(env)
        if P.decode_envelope(frame) != env:
            failures += 1
        frames.append((env, frame))

    # a sample of the frames, concatenated and fed back in uneven chunks
    sample = frames[:2_000]
    blob = b"".join(f for _, f in sample)
    reader, got, pos = P.FrameReader(), [], 0
    while pos < len(blob):
        step = int(rng.integers(1, 700))
        got += reader.feed(blob[pos:pos + step])
        pos += step
    stream_ok = got == [e for e, _ in sample] and reader.pending == 0

    def flip(b: bytes, i: int) -> bytes:
        return b[:i] + bytes([b[i] ^ 0xFF]) + b[i + 1:]

    mutations = {
        "magic": (P.BadMagic.code, lambda f: flip(f, 0)),
        "version": (P.BadVersion.code, lambda f: f[:4] + bytes([P.VERSION + 1]) + f[5:]),
        "msg_type": (P.UnknownMsgType.code, lambda f: f[:5] + bytes([250]) + f[6:]),
        "truncated": (P.Truncated.code, lambda f: f[:int(rng.integers(0, len(f)))]),
        "payload_bit": (P.BadCrc.code, lambda f: flip(f, P.HEADER_SIZE + int(rng.integers(0, len(f) - P.FRAME_OVERHEAD)))),
        "crc": (P.BadCrc.code, lambda f: flip(f, len(f) - 1)),
        "oversize": (P.PayloadTooLarge.code, lambda f: f[:6] + struct.pack("<I", P.MAX_PAYLOAD + 1) + f[10:]),
        "trailing": (P.TrailingData.code, lambda f: f + b"\0"),
    }
    corruption = {}
    for kind, (code, mutate) in mutations.items():
        seen = set()
        for env, frame in frames[:1_000]:
            if kind == "payload_bit" and not env.payload:
                continue
            try:
                P.decode_envelope(mutate(frame))
                seen.add(0)
            except P.ProtocolError as exc:
                seen.add(exc.code)
        corruption[kind] = (code, seen)
    return FuzzResult(n, failures, stream_ok, corruption)


@dataclass
class LivenessResult:
    base_steps_per_sec: float
    slow_steps_per_sec: float
    duration: float
    control_hz: float
    slowdown: float

    @property
    def change(self) -> float:
        return abs(self.slow_steps_per_sec - self.base_steps_per_sec) / self.base_steps_per_sec

    @property
    def passed(self) -> bool:
        return self.change < 0.10


def actor_liveness(duration: float = 120.0, control_hz: float = 100.0, slowdown: float = 10.0, seed: int = 0,
                   out_dir: str | None = None, **overrides) -> LivenessResult:
    """Actor throughput with the reward learner at normal speed and slowed ``slowdown`` times."""
    import tempfile

    from gcr.config import RuntimeConfig
    from gcr.runtime.distributed import run_distributed

    rates = {}
    with tempfile.TemporaryDirectory() as tmp:
        root = out_dir or tmp
        for factor in (1.0, slowdown):
            rt = RuntimeConfig(mode="distributed", control_hz=control_hz, duration=duration,
                               reward_slowdown=factor)
            cfg = lift_config(reward_mode="gcr_sc", steps=10**9, runtime=rt, **overrides)
            res = run_distributed(cfg, seed, f"{root}/slowdown{factor:g}", timeout=duration * 20 + 600)
            rates[factor] = res.steps_per_sec
            log.info("reward slowdown %gx: %.1f actor steps/s", factor, res.steps_per_sec)
    return LivenessResult(rates[1.0], rates[slowdown], duration, control_hz, slowdown)
