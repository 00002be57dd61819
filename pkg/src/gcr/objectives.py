"""Goal-contrastive reward learning: batches, losses and the training loop.

The temporal term is the VIP dual objective over (o0, o, o', g); the
contrastive terms pull goal frames of different successful episodes together
and push goals away from trailing frames of recently failed episodes.
"""

from __future__ import annotations

import math
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from gcr import tensor as T
from gcr.similarity import SimilarityModel, embed


@dataclass
class Episode:
    frames: np.ndarray
    success: bool
    embodiment: str = "A"
    source: str = "demo"
    actions: np.ndarray | None = None
    sparse_rewards: np.ndarray | None = None
    episode_id: str = ""
    task: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        n = len(self.frames)
        if n < 2:
            raise ValueError(f"episode {self.episode_id!r}: needs at least 2 frames, got {n}")
        if self.actions is not None:
            self.actions = np.asarray(self.actions, dtype=np.int64)
            if len(self.actions) != n - 1:
                raise ValueError(f"episode {self.episode_id!r}: {len(self.actions)} actions for {n} frames")
        if self.sparse_rewards is not None:
            self.sparse_rewards = np.asarray(self.sparse_rewards, dtype=np.float64)
            if len(self.sparse_rewards) != n - 1:
                raise ValueError(f"episode {self.episode_id!r}: {len(self.sparse_rewards)} rewards for {n} frames")
        if self.embodiment not in ("A", "B"):
            raise ValueError(f"unknown embodiment tag {self.embodiment!r}")
        if self.source not in ("demo", "online"):
            raise ValueError(f"unknown episode source {self.source!r}")

    def __len__(self):
        return len(self.frames)

    def passive(self) -> "Episode":
        return Episode(self.frames, self.success, self.embodiment, self.source,
                       episode_id=self.episode_id, task=self.task)


@dataclass(frozen=True)
class GcrHyperparams:
    gamma: float = 0.98
    omega1: float = 1.0
    omega2: float = 1.0
    neg_fraction: float = 0.25
    goal_tail: int = 2
    batch_size: int = 16
    num_negatives: int = 16
    relabel_prob: float = 0.5
    neg_capacity: int = 2048
    learning_rate: float = 3e-4
    # the TD term treats value_scale * S as the value, so a bounded cosine can
    # still span many steps to the goal; 1.0 gives the unscaled objective
    value_scale: float = 20.0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must be in (0, 1), got {self.gamma}")
        if self.omega1 < 0 or self.omega2 < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 < self.neg_fraction <= 1.0:
            raise ValueError(f"neg_fraction must be in (0, 1], got {self.neg_fraction}")
        if self.goal_tail < 1 or self.batch_size < 1 or self.num_negatives < 1:
            raise ValueError("goal_tail, batch_size and num_negatives must be >= 1")
        if not 0.0 <= self.relabel_prob <= 1.0:
            raise ValueError(f"relabel_prob must be in [0, 1], got {self.relabel_prob}")
        if self.neg_capacity < 1:
            raise ValueError("neg_capacity must be >= 1")
        if not self.value_scale > 0:
            raise ValueError("value_scale must be positive")


def goal_tail_indices(length: int, goal_tail: int) -> range:
    return range(max(0, length - goal_tail), length)


def negative_count(length: int, neg_fraction: float) -> int:
    # round away float noise before ceil: 0.25 * 20 must be exactly 5
    return min(length, math.ceil(round(neg_fraction * length, 9)))


class NegativeBuffer:
    """Bounded FIFO of trailing frames from failed online episodes.

    All operations take an internal lock, so one ingesting writer and one
    sampling reader may share an instance.
    """

    def __init__(self, capacity: int = 2048):
        self.capacity = capacity
        self._frames: deque = deque(maxlen=capacity)
        self._origin: deque = deque(maxlen=capacity)
        self._lock = threading.Lock()

    def __len__(self):
        with self._lock:
            return len(self._frames)

    def extend(self, frames, origin=""):
        with self._lock:
            for f in frames:
                self._frames.append(np.asarray(f, dtype=np.float64))
                self._origin.append(origin)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        with self._lock:
            if not self._frames:
                return np.empty((0,))
            idx = rng.integers(0, len(self._frames), size=n)
            return np.stack([self._frames[i] for i in idx])

    def origins(self) -> list:
        with self._lock:
            return list(self._origin)

    def frames(self) -> np.ndarray:
        with self._lock:
            return np.stack(list(self._frames)) if self._frames else np.empty((0,))


def update_negative_buffer(neg_buf: NegativeBuffer, episode: Episode, hp: GcrHyperparams) -> NegativeBuffer:
    if not episode.success:
        k = negative_count(len(episode), hp.neg_fraction)
        neg_buf.extend(episode.frames[len(episode) - k:], origin=episode.episode_id)
    return neg_buf


class EpisodeSampler:
    """Weighted draws over episodes; goal frames come only from ``goal_episodes``."""

    def __init__(self, episodes: Sequence[Episode], weights=None, goal_episodes=None):
        if not episodes:
            raise ValueError("EpisodeSampler needs at least one episode")
        self.episodes = list(episodes)
        w = np.ones(len(self.episodes)) if weights is None else np.asarray(weights, dtype=np.float64)
        self.weights = w
        self.probs = w / w.sum()
        self.goal_episodes = list(goal_episodes) if goal_episodes is not None else self.episodes

    def draw_index(self, rng: np.random.Generator) -> int:
        return int(rng.choice(len(self.episodes), p=self.probs))

    def draw(self, rng: np.random.Generator) -> Episode:
        return self.episodes[self.draw_index(rng)]

    def goal_frames(self, goal_tail: int) -> np.ndarray:
        out = [ep.frames[i] for ep in self.goal_episodes if ep.success
               for i in goal_tail_indices(len(ep), goal_tail)]
        return np.stack(out)


def build_cross_embodiment_sampler(target: Sequence[Episode], other: Sequence[Episode]) -> EpisodeSampler:
    """Oversample target-embodiment episodes until both groups carry equal mass."""
    if not target:
        raise ValueError("cross-embodiment sampler needs at least one target episode")
    w_target = len(other) / len(target) if len(other) > len(target) else 1.0
    weights = [w_target] * len(target) + [1.0] * len(other)
    return EpisodeSampler([*target, *other], weights, goal_episodes=target)


@dataclass
class GcrBatch:
    init_obs: np.ndarray
    goals: np.ndarray
    obs: np.ndarray
    next_obs: np.ndarray
    pair_goals: np.ndarray
    delta: np.ndarray
    pos_goals: np.ndarray
    neg_goals: np.ndarray
    # bookkeeping for invariant checks
    episode_idx: np.ndarray = field(default=None)
    pair_goal_episode: np.ndarray = field(default=None)
    frame_idx: np.ndarray = field(default=None)

    @property
    def size(self) -> int:
        return len(self.goals)


def sample_batch(demos: Sequence[Episode], neg_buf: NegativeBuffer | None, hp: GcrHyperparams,
                 rng: np.random.Generator, sampler: EpisodeSampler | None = None) -> GcrBatch:
    if sampler is None:
        good = [ep for ep in demos if ep.success]
        if not good:
            raise ValueError("sample_batch: no successful episodes")
        sampler = EpisodeSampler(good)
    eps = sampler.episodes
    if not any(ep.success for ep in eps):
        raise ValueError("sample_batch: no successful episodes")
    ok = [i for i, ep in enumerate(eps) if ep.success]
    ok_pos = {i: p for p, i in enumerate(ok)}

    init, goals, obs, nxt, pgoals, delta, pos = [], [], [], [], [], [], []
    ep_idx, pg_ep, fr_idx = [], [], []
    for _ in range(hp.batch_size):
        i = sampler.draw_index(rng)
        while not eps[i].success:
            i = sampler.draw_index(rng)
        ep = eps[i]
        n = len(ep)
        tail = goal_tail_indices(n, hp.goal_tail)
        g = ep.frames[rng.choice(tail)]
        t = int(rng.integers(0, n - 1))
        init.append(ep.frames[0])
        goals.append(g)
        obs.append(ep.frames[t])
        nxt.append(ep.frames[t + 1])
        j = i
        pg = g
        if hp.relabel_prob > 0 and rng.random() < hp.relabel_prob:
            j = ok[int(rng.integers(0, len(ok)))]
            other = eps[j]
            pg = other.frames[rng.choice(goal_tail_indices(len(other), hp.goal_tail))]
        pgoals.append(pg)
        delta.append(0.0 if (j == i and t in tail) else -1.0)
        if len(ok) > 1:
            # uniform over the other successful episodes
            r = int(rng.integers(0, len(ok) - 1))
            if r >= ok_pos[i]:
                r += 1
            other = eps[ok[r]]
            pos.append(other.frames[rng.choice(goal_tail_indices(len(other), hp.goal_tail))])
        ep_idx.append(i)
        pg_ep.append(j)
        fr_idx.append(t)

    shape = eps[0].frames.shape[1:]
    if neg_buf is not None and len(neg_buf) > 0:
        neg = neg_buf.sample(hp.num_negatives, rng)
    else:
        neg = np.empty((0, *shape))
    return GcrBatch(
        init_obs=np.stack(init), goals=np.stack(goals), obs=np.stack(obs), next_obs=np.stack(nxt),
        pair_goals=np.stack(pgoals), delta=np.array(delta),
        pos_goals=np.stack(pos) if pos else np.empty((0, *shape)), neg_goals=neg,
        episode_idx=np.array(ep_idx), pair_goal_episode=np.array(pg_ep), frame_idx=np.array(fr_idx),
    )


def _check(t: T.Tensor, term: str) -> T.Tensor:
    if not np.all(np.isfinite(t.data)):
        raise T.NonFiniteError(f"non-finite value in loss term {term!r}")
    return t


def gcr_objective(model: SimilarityModel, params: dict[str, T.Tensor], batch: GcrBatch,
                  hp: GcrHyperparams, kind: str = "sc") -> tuple[T.Tensor, dict[str, float]]:
    """Build the loss graph. ``kind`` is one of ``vip``, ``sc``, ``ic``."""
    if kind not in ("vip", "sc", "ic"):
        raise ValueError(f"unknown objective {kind!r}")
    if batch.size == 0:
        raise ValueError("empty batch")
    b = batch.size
    n_pos, n_neg = len(batch.pos_goals), len(batch.neg_goals)
    use_pos = kind != "vip" and n_pos > 0
    use_neg = kind != "vip" and n_neg > 0
    if kind == "ic" and n_neg == 0:
        raise ValueError("ic objective needs at least one negative")

    parts = [batch.init_obs, batch.goals, batch.obs, batch.next_obs, batch.pair_goals]
    if use_pos:
        parts.append(batch.pos_goals)
    if use_neg:
        parts.append(batch.neg_goals)
    e = embed(model, params, np.concatenate(parts))
    _check(e, "embedding")

    def rows(k, n):
        return T.index(e, slice(k, k + n))

    e_init, e_goal, e_obs, e_next, e_pg = (rows(i * b, b) for i in range(5))
    off = 5 * b

    terms = {}
    s_init = _check(T.cosine(e_init, e_goal), "S(o0;g)")
    first = ((1.0 - hp.gamma) * hp.value_scale) * T.mean(-s_init)
    s_obs = T.cosine(e_obs, e_pg)
    s_next = T.cosine(e_next, e_pg)
    k = hp.value_scale
    resid = _check(k * s_obs - T.Tensor(batch.delta) - (hp.gamma * k) * s_next, "TD residual")
    second = _check(T.logmeanexp(resid), "log-mean-exp TD")
    loss = first + second
    terms["vip_init"] = first.item()
    terms["vip_td"] = second.item()

    if kind == "vip":
        terms["total"] = loss.item()
        return _check(loss, "total"), terms

    s_pos = None
    if use_pos:
        e_pos = rows(off, n_pos)
        off += n_pos
        s_pos = _check(T.cosine(e_goal, e_pos), "S(g;g')")
        terms["pos_sim"] = float(s_pos.data.mean())
    if use_neg:
        e_neg = rows(off, n_neg)
        s_neg = _check(T.pairwise_cosine(e_goal, e_neg), "S(g;g_neg)")
        terms["neg_sim"] = float(s_neg.data.mean())

    if kind == "sc":
        contrast = T.Tensor(0.0)
        if use_pos:
            contrast = contrast - hp.omega1 * T.mean(s_pos)
        if use_neg:
            contrast = contrast + hp.omega2 * T.mean(s_neg)
    else:
        per_anchor = T.logmeanexp(hp.omega2 * s_neg, axis=1)
        if use_pos:
            per_anchor = per_anchor - hp.omega1 * s_pos
        contrast = T.mean(per_anchor)
    _check(contrast, "contrastive")
    terms["contrastive"] = contrast.item()
    loss = loss + contrast
    terms["total"] = loss.item()
    return _check(loss, "total"), terms


def loss_and_grads(model: SimilarityModel, batch: GcrBatch, hp: GcrHyperparams, kind: str):
    params = T.leaves(model.params)
    loss, terms = gcr_objective(model, params, batch, hp, kind)
    return loss.item(), T.grad(loss, params), terms


def loss_value(model: SimilarityModel, batch: GcrBatch, hp: GcrHyperparams, kind: str) -> float:
    loss, _ = gcr_objective(model, T.leaves(model.params), batch, hp, kind)
    return loss.item()


def vip_loss(model, batch, hp):
    value, grads, _ = loss_and_grads(model, batch, hp, "vip")
    return value, grads


def sc_loss(model, batch, hp):
    value, grads, _ = loss_and_grads(model, batch, hp, "sc")
    return value, grads


def ic_loss(model, batch, hp):
    value, grads, _ = loss_and_grads(model, batch, hp, "ic")
    return value, grads


class TrainingDiverged(RuntimeError):
    pass


class RewardTrainer:
    """Owns a private model copy, its optimizer and the negative buffer.

    On a non-finite loss the parameters roll back to the last checkpoint and the
    learning rate is halved once; a second divergence raises :class:`TrainingDiverged`.
    """

    def __init__(self, model: SimilarityModel, episodes: Sequence[Episode], hp: GcrHyperparams,
                 kind: str = "sc", seed: int = 0, sampler: EpisodeSampler | None = None,
                 neg_buf: NegativeBuffer | None = None):
        self.model = model.copy()
        self.hp = hp
        self.kind = kind
        self.rng = np.random.default_rng(seed)
        self.sampler = sampler or EpisodeSampler([ep for ep in episodes if ep.success])
        self.neg_buf = neg_buf if neg_buf is not None else NegativeBuffer(hp.neg_capacity)
        self.opt = T.AdamState(learning_rate=hp.learning_rate)
        self.steps = 0
        self.version = 0
        self._halved = False
        self._last_good = (self.model.copy(), self.opt.copy())
        self.last_terms: dict = {}

    def add_successful(self, episode: Episode) -> None:
        s = self.sampler
        s.episodes.append(episode)
        s.weights = np.append(s.weights, 1.0)
        s.probs = s.weights / s.weights.sum()

    def ingest(self, episode: Episode) -> None:
        update_negative_buffer(self.neg_buf, episode, self.hp)

    def step(self) -> float:
        batch = sample_batch(self.sampler.episodes, self.neg_buf, self.hp, self.rng, self.sampler)
        kind = self.kind
        if kind == "ic" and len(batch.neg_goals) == 0:
            kind = "sc"  # no negatives yet: IC degrades to the temporal + positive terms
        try:
            value, grads, terms = loss_and_grads(self.model, batch, self.hp, kind)
            grads = T.clip_grad_norm(grads, 10.0)
            params, self.opt = T.adam_step(self.model.params, grads, self.opt, inplace=True)
        except (T.NonFiniteError, FloatingPointError) as exc:
            if self._halved:
                raise TrainingDiverged(f"reward model diverged twice: {exc}") from exc
            self._halved = True
            self.model, self.opt = self._last_good[0].copy(), self._last_good[1].copy()
            self.opt.learning_rate *= 0.5
            return float("nan")
        self.model.params = params
        self.steps += 1
        self.last_terms = terms
        return value

    def checkpoint(self) -> SimilarityModel:
        self.version += 1
        snap = self.model.copy()
        self._last_good = (snap.copy(), self.opt.copy())
        return snap
