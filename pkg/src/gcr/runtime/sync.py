"""Single-process pipeline: actor, extrinsic + intrinsic labeling and both learners in one loop.

Without a schedule, learners run on a fixed cadence at episode boundaries and
the resulting interleaving is recorded. With a schedule (typically recorded by
the distributed runtime) the same interleaving is replayed exactly: work is
done on demand, labeling an episode once its recorded reward version exists,
acting once the recorded policy version exists, and advancing a learner only
when nothing else can proceed.
"""

from __future__ import annotations

import logging
import os
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from gcr import env as E
from gcr import rl
from gcr.config import ExperimentConfig
from gcr.protocol import MsgType, message
from gcr.runtime import core
from gcr.similarity import SimilarityModel

log = logging.getLogger(__name__)


class ScheduleError(RuntimeError):
    pass


def transition_frame(tr: rl.Transition) -> bytes:
    header = {"episode": tr.episode, "t": tr.t, "action": tr.action, "sparse": tr.sparse_reward,
              "labeled": tr.labeled_reward, "done": tr.done, "reward_version": tr.reward_version,
              "policy_version": tr.policy_version}
    return message(MsgType.TRANSITION, header, {"obs": tr.obs, "next_obs": tr.next_obs})


def evaluate(cfg: ExperimentConfig, seed: int, params: dict, n_episodes: int) -> tuple[float, float]:
    """Greedy rollouts on a fixed set of start states; returns (success rate, mean episode length)."""
    env_cfg = core.env_config(cfg, seed)
    net = rl.init_qnet(env_cfg.obs_shape, E.N_ACTIONS, cfg.rl.hidden, cfg.rl.pool, features=cfg.rl.features)
    net.params = params
    states = [E.reset(env_cfg, np.random.default_rng([seed, 9, k])) for k in range(n_episodes)]
    success = np.zeros(n_episodes, dtype=bool)
    lengths = np.zeros(n_episodes)
    live = list(range(n_episodes))
    while live:
        obs = np.stack([E.render(states[i], env_cfg) for i in live])
        acts = np.argmax(rl.q_values(net, obs), axis=1)
        still = []
        for i, a in zip(live, acts):
            states[i], r, done = E.step(states[i], int(a), env_cfg)
            lengths[i] += 1
            if r > 0:
                success[i] = True
            if not done:
                still.append(i)
        live = still
    return float(success.mean()), float(lengths.mean())


@dataclass
class RunResult:
    seed: int
    metrics: list = field(default_factory=list)
    evals: list = field(default_factory=list)  # (step, success_rate, mean_length)
    schedule: core.Schedule = field(default_factory=core.Schedule)
    reward_model: SimilarityModel | None = None
    policy_params: dict | None = None
    env_steps: int = 0


class _Pipeline:
    """All five roles in one process plus the output writers."""

    def __init__(self, cfg, seed, pretrained, out_dir, stream_path):
        self.cfg, self.seed = cfg, seed
        demos = core.make_demos(cfg, seed)
        self.model0 = None
        if cfg.reward_mode != "sparse":
            self.model0 = pretrained if pretrained is not None else core.pretrain_reward_model(cfg, seed, demos)
        self.actor = core.ActorCore(cfg, seed)
        self.predictor = core.PredictorCore(cfg, core.goal_frames(cfg, demos))
        self.predictor.apply(0, self.model0)
        self.learner = core.RLLearnerCore(cfg, seed)
        if cfg.demos.seeding:
            self.learner.seed_demos(demos.full, [self.predictor.label_demo(ep) for ep in demos.full])
        self.rw = core.RewardLearnerCore(cfg, seed, self.model0, demos) if cfg.online_reward_learning else None
        self.reward_models = {0: self.model0}
        self.classifier = E.OracleClassifier(self.actor.env_cfg)
        self.result = RunResult(seed)
        self.files = []
        self.metrics_f = self.stream_f = self.eval_f = None
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            self.metrics_f = self._open(os.path.join(out_dir, f"metrics_seed{seed}.csv"), "w")
            self.metrics_f.write(",".join(core.METRIC_FIELDS) + "\n")
            self.eval_f = self._open(os.path.join(out_dir, f"eval_seed{seed}.csv"), "w")
            self.eval_f.write("step,success_rate,mean_length\n")
        if stream_path is not None:
            self.stream_f = self._open(stream_path, "wb")
        self.next_eval = cfg.eval_every

    def _open(self, path, mode):
        f = open(path, mode) if "b" in mode else open(path, mode, newline="")
        self.files.append(f)
        return f

    def close(self):
        for f in self.files:
            f.close()

    def act(self, p_e: int) -> core.EpisodeRecord:
        params, td = self.learner.snapshots[p_e]
        rec = self.actor.run_episode(params, p_e, td)
        if self.rw is not None:
            self.rw.pending.append(core.online_episode(rec, self.actor.env_cfg.embodiment, self.cfg.env.task))
        return rec

    def label(self, rec: core.EpisodeRecord, r_e: int):
        if r_e >= 0 and r_e != self.predictor.version:
            self.predictor.apply(r_e, self.reward_models[r_e])
        sparse = core.extrinsic_labels(self.classifier, rec.frames)
        labeled = self.predictor.label(rec, sparse)
        row = core.metrics_row(rec, labeled)
        self.result.metrics.append(row)
        self.result.schedule.episodes.append([rec.policy_version, self.predictor.version])
        if self.metrics_f:
            self.metrics_f.write(core.format_metrics(row) + "\n")
        if self.stream_f:
            for tr in labeled:
                self.stream_f.write(transition_frame(tr))
        self.learner.pending.append(labeled)

    def reward_step(self):
        snap = self.rw.step()
        if snap is not None:
            self.reward_models[self.rw.version] = snap
            for old in [v for v in self.reward_models if 0 < v < self.rw.version - 2]:
                del self.reward_models[old]

    def maybe_evaluate(self) -> float | None:
        a = self.actor
        if a.global_step < self.next_eval and not a.finished:
            return None
        self.next_eval += self.cfg.eval_every
        sr, ml = evaluate(self.cfg, self.seed, self.learner.learner.qnet.params, self.cfg.eval_episodes)
        self.result.evals.append((a.global_step, sr, ml))
        if self.eval_f:
            self.eval_f.write(f"{a.global_step},{sr!r},{ml!r}\n")
            self.eval_f.flush()
        log.info("seed %d step %d eval success %.2f", self.seed, a.global_step, sr)
        return sr

    def finish(self) -> RunResult:
        res = self.result
        res.schedule.rl_updates = list(self.learner.update_log)
        res.schedule.reward_steps = list(self.rw.step_log) if self.rw is not None else []
        res.reward_model = self.rw.trainer.model if self.rw is not None else self.model0
        res.policy_params = self.learner.learner.qnet.params
        res.env_steps = self.actor.global_step
        return res


def run_synchronous(cfg: ExperimentConfig, seed: int, *, schedule: core.Schedule | None = None,
                    pretrained: SimilarityModel | None = None, out_dir: str | None = None,
                    stream_path: str | None = None, evaluate_policy: bool = True,
                    stop_at_success: float | None = None) -> RunResult:
    pipe = _Pipeline(cfg, seed, pretrained, out_dir, stream_path)
    try:
        if schedule is None:
            _run_cadence(pipe, evaluate_policy, stop_at_success)
        else:
            _run_replay(pipe, schedule, evaluate_policy)
    finally:
        pipe.close()
    return pipe.finish()


def _run_cadence(pipe: _Pipeline, evaluate_policy: bool, stop_at_success: float | None):
    learner, rw = pipe.learner, pipe.rw
    while not pipe.actor.finished:
        r_e = rw.version if rw is not None else pipe.predictor.version
        rec = pipe.act(learner.version)
        pipe.label(rec, r_e)
        learner.ingest_all()
        while learner.learner.updates < learner.allowed_updates():
            learner.update()
        if rw is not None:
            rw.ingest_all()
            while rw.trainer.steps < rw.allowed_steps():
                pipe.reward_step()
        if evaluate_policy:
            sr = pipe.maybe_evaluate()
            if stop_at_success is not None and sr is not None and sr >= stop_at_success:
                break


def _run_replay(pipe: _Pipeline, schedule: core.Schedule, evaluate_policy: bool):
    learner, rw = pipe.learner, pipe.rw
    n_episodes = len(schedule.episodes)
    unlabeled: deque = deque()

    def try_reward_step() -> bool:
        s = rw.trainer.steps
        if s >= len(schedule.reward_steps):
            return False
        if rw.ingested < schedule.reward_steps[s]:
            if not rw.pending:
                return False
            rw.ingest_next()
            return True
        pipe.reward_step()
        return True

    def try_rl_update() -> bool:
        u = learner.learner.updates
        if u >= len(schedule.rl_updates):
            return False
        if learner.ingested < schedule.rl_updates[u]:
            if not learner.pending:
                return False
            learner.ingest_next()
            return True
        learner.update()
        return True

    while True:
        while unlabeled:
            rec = unlabeled[0]
            r_e = schedule.episodes[rec.episode][1]
            if rw is not None and r_e > rw.version:
                break
            pipe.label(rec, r_e)
            unlabeled.popleft()
        e = pipe.actor.episodes
        if e >= n_episodes or pipe.actor.finished:
            if not unlabeled:
                break
        else:
            p_e = schedule.episodes[e][0]
            # the learner is only ever advanced up to the next episode's version
            if learner.version >= p_e:
                unlabeled.append(pipe.act(p_e))
                if evaluate_policy:
                    pipe.maybe_evaluate()
                continue
        # blocked: move a learner forward, the reward learner first if labels are waiting
        if unlabeled and rw is not None and try_reward_step():
            continue
        if e < n_episodes and try_rl_update():
            continue
        raise ScheduleError(f"schedule cannot make progress at episode {e} "
                            f"({len(unlabeled)} episodes awaiting labels)")
