"""Role logic shared by the synchronous runner and the distributed processes.

Each core is a plain object with no I/O. Both runtimes drive the same cores,
so a run is reproducible given the order of a few events: which policy and
reward versions each episode used, and how many episodes each learner had
ingested before each of its updates. That record is the :class:`Schedule`.
"""

from __future__ import annotations

import json
import time
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from gcr import env as E
from gcr import rl
from gcr.config import ExperimentConfig
from gcr.objectives import (Episode, EpisodeSampler, RewardTrainer, build_cross_embodiment_sampler,
                            goal_tail_indices)
from gcr.shaping import shaped_reward
from gcr.similarity import GoalSet, SimilarityModel, init_model


def env_config(cfg: ExperimentConfig, seed: int, embodiment: str | None = None) -> E.EnvConfig:
    return replace(cfg.env, seed=seed, embodiment=embodiment or cfg.env.embodiment)


@dataclass
class DemoSet:
    target: list
    other: list
    full: list  # target demos with actions, used for replay seeding

    @property
    def passive(self) -> list:
        return [*self.target, *self.other]


def make_demos(cfg: ExperimentConfig, seed: int) -> DemoSet:
    tcfg = env_config(cfg, seed)
    full = E.generate_demos(tcfg, cfg.demos.target, seed=seed * 1000 + 17, style="full", prefix="demo")
    target = [ep.passive() for ep in full]
    other = []
    if cfg.demos.other:
        ocfg = env_config(cfg, seed, cfg.demos.other_embodiment)
        other = E.generate_demos(ocfg, cfg.demos.other, seed=seed * 1000 + 29, style="passive", prefix="xemb")
    return DemoSet(target, other, full)


def make_sampler(demos: DemoSet) -> EpisodeSampler:
    if demos.other:
        return build_cross_embodiment_sampler(demos.target, demos.other)
    return EpisodeSampler(list(demos.target))


def goal_frames(cfg: ExperimentConfig, demos: DemoSet) -> np.ndarray:
    # only target-embodiment goals are used for labeling
    eps = demos.target[: cfg.reward_model.goal_set_size]
    return np.stack([ep.frames[-1] for ep in eps])


def pretrain_reward_model(cfg: ExperimentConfig, seed: int, demos: DemoSet,
                          steps: int | None = None, log=None) -> SimilarityModel:
    rm = cfg.reward_model
    model = init_model(cfg.env.obs_shape, rm.hidden, rm.embedding_dim, seed=seed * 7 + 1, features=rm.features)
    kind = cfg.objective
    trainer = RewardTrainer(model, demos.passive, cfg.gcr, kind=kind, seed=seed * 7 + 2,
                            sampler=make_sampler(demos))
    n = cfg.reward_model.pretrain_steps if steps is None else steps
    for i in range(n):
        loss = trainer.step()
        if log is not None and (i + 1) % 200 == 0:
            log(f"pretrain step {i + 1}/{n} loss={loss:.4f}")
    return trainer.model


@dataclass
class EpisodeRecord:
    episode: int
    frames: np.ndarray  # (T+1, C, H, W)
    actions: list
    env_rewards: list
    start_step: int
    epsilon: float
    policy_version: int
    td_loss: float

    @property
    def length(self) -> int:
        return len(self.actions)

    @property
    def success(self) -> bool:
        return any(r > 0 for r in self.env_rewards)


class ActorCore:
    def __init__(self, cfg: ExperimentConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        self.env_cfg = env_config(cfg, seed)
        self.qnet = rl.init_qnet(self.env_cfg.obs_shape, E.N_ACTIONS, cfg.rl.hidden, cfg.rl.pool,
                                 seed=seed * 7 + 3, features=cfg.rl.features)
        self.global_step = 0
        self.episodes = 0

    @property
    def finished(self) -> bool:
        return self.global_step >= self.cfg.steps

    def run_episode(self, params: dict, policy_version: int = 0, td_loss: float = 0.0,
                    on_step=None) -> EpisodeRecord:
        e = self.episodes
        act_rng = np.random.default_rng([self.seed, 1, e])
        env_rng = np.random.default_rng([self.seed, 2, e])
        net = self.qnet
        net.params = params
        state = E.reset(self.env_cfg, env_rng)
        frames = [E.render(state, self.env_cfg)]
        actions, rewards = [], []
        start = self.global_step
        eps = rl.epsilon_at(self.global_step, self.cfg.rl, self.cfg.steps)
        done = False
        while not done:
            eps = rl.epsilon_at(self.global_step, self.cfg.rl, self.cfg.steps)
            a = rl.act(net, frames[-1], eps, act_rng)
            state, r, done = E.step(state, a, self.env_cfg)
            frames.append(E.render(state, self.env_cfg))
            actions.append(a)
            rewards.append(r)
            self.global_step += 1
            if on_step is not None:
                on_step(e, len(actions) - 1, frames[-2], a, frames[-1], done)
        self.episodes += 1
        return EpisodeRecord(e, np.stack(frames), actions, rewards, start, eps, policy_version, td_loss)


def extrinsic_labels(classifier, frames: np.ndarray) -> np.ndarray:
    """Sparse reward per transition from the goal classifier applied to each next frame."""
    return np.array([1.0 if classifier.classify(f) else 0.0 for f in frames[1:]])


class PredictorCore:
    """Labels transitions with ``R + F`` using the newest applied reward checkpoint."""

    def __init__(self, cfg: ExperimentConfig, goal_frames: np.ndarray):
        self.cfg = cfg
        self.goal_frames = goal_frames
        self.goal_set: GoalSet | None = None
        self.version = -1

    def apply(self, version: int, model: SimilarityModel | None):
        if self.cfg.reward_mode == "sparse" or model is None:
            return
        self.goal_set = GoalSet(model, self.goal_frames)
        self.version = version

    def potentials(self, frames) -> np.ndarray | None:
        return None if self.goal_set is None else self.goal_set.potentials(frames)

    def label(self, rec: EpisodeRecord, sparse: np.ndarray) -> list[rl.Transition]:
        phi = self.potentials(rec.frames)
        if phi is None:
            labeled = sparse.copy()
        else:
            labeled = shaped_reward(self.cfg.shaping, sparse, phi[:-1], phi[1:])
        return [rl.Transition(rec.frames[t], int(rec.actions[t]), float(labeled[t]), rec.frames[t + 1],
                              bool(sparse[t] > 0), float(sparse[t]), rec.episode, t,
                              self.version, rec.policy_version)
                for t in range(rec.length)]

    def label_demo(self, ep: Episode) -> np.ndarray:
        phi = self.potentials(ep.frames)
        if phi is None:
            return ep.sparse_rewards.copy()
        return shaped_reward(self.cfg.shaping, ep.sparse_rewards, phi[:-1], phi[1:])


def metrics_row(rec: EpisodeRecord, labeled: list[rl.Transition]) -> dict:
    return {
        "step": rec.start_step + rec.length,
        "episode": rec.episode,
        "sparse_return": float(sum(t.sparse_reward for t in labeled)),
        "shaped_return": float(sum(t.labeled_reward for t in labeled)),
        "epsilon": rec.epsilon,
        "td_loss": rec.td_loss,
    }


METRIC_FIELDS = ("step", "episode", "sparse_return", "shaped_return", "epsilon", "td_loss")


def format_metrics(row: dict) -> str:
    return ",".join(repr(row[k]) if isinstance(row[k], float) else str(row[k]) for k in METRIC_FIELDS)


class RLLearnerCore:
    """Replay + double DQN. Labeled episodes wait in ``pending`` until ingested."""

    def __init__(self, cfg: ExperimentConfig, seed: int):
        self.cfg = cfg
        hp = cfg.rl
        obs_shape = cfg.env.obs_shape
        qnet = rl.init_qnet(obs_shape, E.N_ACTIONS, hp.hidden, hp.pool, seed=seed * 7 + 3, features=hp.features)
        self.learner = rl.DQNLearner(qnet, hp, seed=seed * 7 + 4)
        ratio = hp.demo_ratio if cfg.demos.seeding else 0.0
        # replay holds Q-network input rows, which keeps sampling cheap; keypoint
        # coordinates are not multiples of 1/8, so they are kept in float64
        self.replay = rl.ReplayBuffer((qnet.input_dim,), hp.replay_capacity, demo_ratio=ratio, dtype=np.float64,
                                      featurize=lambda x: rl.preprocess(qnet, x))
        self.pending: deque = deque()
        self.ingested = 0
        self.ingested_steps = 0
        self.update_log: list[int] = []
        self._losses: list[float] = []
        self.version = 0
        self.snapshots = {0: ({k: v.copy() for k, v in self.learner.qnet.params.items()}, 0.0)}

    def seed_demos(self, demos: list, labels: list[np.ndarray]):
        it = iter(labels)
        rl.seed_demos(self.replay, demos, self.cfg.rl.n_step, self.cfg.rl.gamma, label=lambda ep: next(it))

    def ingest_next(self):
        trs = self.pending.popleft()
        self.replay.add_episode(trs, self.cfg.rl.n_step, self.cfg.rl.gamma)
        self.ingested += 1
        self.ingested_steps += len(trs)

    def ingest_all(self):
        while self.pending:
            self.ingest_next()

    def allowed_updates(self) -> int:
        hp = self.cfg.rl
        if self.ingested_steps < hp.learning_starts:
            return 0
        return (self.ingested_steps - hp.learning_starts) // hp.train_every + 1

    def update(self) -> int | None:
        """One update; returns the new policy version if one was published."""
        self._losses.append(self.learner.update(self.replay))
        self.update_log.append(self.ingested)
        if self.learner.updates % self.cfg.rl.publish_every == 0:
            self.version += 1
            td = float(np.mean(self._losses))
            self._losses = []
            self.snapshots[self.version] = ({k: v.copy() for k, v in self.learner.qnet.params.items()}, td)
            for old in [v for v in self.snapshots if v < self.version - 4]:
                del self.snapshots[old]
            return self.version
        return None


class RewardLearnerCore:
    def __init__(self, cfg: ExperimentConfig, seed: int, model: SimilarityModel, demos: DemoSet):
        self.cfg = cfg
        self.trainer = RewardTrainer(model, demos.passive, cfg.gcr, kind=cfg.objective or "vip",
                                     seed=seed * 7 + 5, sampler=make_sampler(demos))
        self.pending: deque = deque()
        self.ingested = 0
        self.ingested_steps = 0
        self.step_log: list[int] = []
        self.version = 0
        self.slowdown = cfg.runtime.reward_slowdown

    def ingest_next(self):
        ep = self.pending.popleft()
        self.trainer.ingest(ep)
        if ep.success and self.cfg.reward_model.add_online_successes:
            self.trainer.add_successful(ep)
        self.ingested += 1
        self.ingested_steps += len(ep) - 1

    def ingest_all(self):
        while self.pending:
            self.ingest_next()

    def allowed_steps(self) -> int:
        if not self.cfg.online_reward_learning:
            return 0
        return self.ingested_steps // self.cfg.reward_model.online_every

    def step(self) -> SimilarityModel | None:
        t0 = time.perf_counter()
        self.trainer.step()
        if self.slowdown > 1.0:
            time.sleep((self.slowdown - 1.0) * (time.perf_counter() - t0))
        self.step_log.append(self.ingested)
        if self.trainer.steps % self.cfg.reward_model.checkpoint_every == 0:
            self.version += 1
            return self.trainer.checkpoint()
        return None


def online_episode(rec: EpisodeRecord, embodiment: str, task: str) -> Episode:
    return Episode(rec.frames, rec.success, embodiment, "online", episode_id=f"online-{rec.episode:06d}", task=task)


@dataclass
class Schedule:
    """Recorded interleaving of an asynchronous run."""

    episodes: list = field(default_factory=list)  # [policy_version, reward_version] per episode
    rl_updates: list = field(default_factory=list)  # episodes ingested before each RL update
    reward_steps: list = field(default_factory=list)  # episodes ingested before each reward step

    def to_json(self) -> dict:
        return {"episodes": self.episodes, "rl_updates": self.rl_updates, "reward_steps": self.reward_steps}

    @classmethod
    def from_json(cls, d: dict) -> "Schedule":
        return cls([list(x) for x in d["episodes"]], list(d["rl_updates"]), list(d["reward_steps"]))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f)

    @classmethod
    def load(cls, path) -> "Schedule":
        with open(path) as f:
            return cls.from_json(json.load(f))
