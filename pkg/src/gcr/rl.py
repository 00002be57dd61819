"""Value-based RL: epsilon-greedy actor, n-step double DQN, demo-seeded replay, tabular oracle."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from gcr import features as F
from gcr import tensor as T


@dataclass(frozen=True)
class RLHyperparams:
    gamma: float = 0.98
    learning_rate: float = 5e-4
    batch_size: int = 64
    n_step: int = 3
    target_refresh: int = 500
    replay_capacity: int = 30_000
    learning_starts: int = 1_000
    train_every: int = 2
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_fraction: float = 0.3
    hidden: tuple = (64, 64)
    pool: int = 2
    features: str = "keypoints"
    demo_ratio: float = 0.0
    grad_clip: float = 10.0
    publish_every: int = 50


@dataclass
class QNetwork:
    obs_shape: tuple
    n_actions: int
    hidden: tuple = (64, 64)
    pool: int = 2
    params: dict = field(default_factory=dict)
    features: str = "keypoints"

    @property
    def input_dim(self) -> int:
        return F.feature_dim(self.features, self.obs_shape, self.pool)

    def copy(self) -> "QNetwork":
        return QNetwork(tuple(self.obs_shape), self.n_actions, tuple(self.hidden), self.pool,
                        {k: v.copy() for k, v in self.params.items()}, self.features)


def init_qnet(obs_shape, n_actions, hidden=(64, 64), pool=2, seed=0, features="keypoints") -> QNetwork:
    net = QNetwork(tuple(obs_shape), n_actions, tuple(hidden), pool, features=features)
    rng = np.random.default_rng(seed)
    sizes = [net.input_dim, *hidden, n_actions]
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = np.sqrt(6.0 / (a + b)) if i < len(sizes) - 2 else np.sqrt(3.0 / a) * 0.1
        net.params[f"q.{i}.w"] = rng.uniform(-bound, bound, size=(a, b))
        net.params[f"q.{i}.b"] = np.zeros(b)
    return net


def preprocess(net: QNetwork, obs) -> np.ndarray:
    """Raw observations -> network input rows; rows that are already features pass through."""
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim == 2 and obs.shape[1] == net.input_dim:
        return obs
    return F.featurize(net.features, obs, net.obs_shape, net.pool)


def q_values(net: QNetwork, obs, params=None) -> np.ndarray:
    params = net.params if params is None else params
    x = preprocess(net, obs)
    n_layers = len(net.hidden) + 1
    for i in range(n_layers):
        x = x @ params[f"q.{i}.w"] + params[f"q.{i}.b"]
        if i < n_layers - 1:
            x = np.maximum(x, 0.0)
    return x


def q_graph(net: QNetwork, params: dict[str, T.Tensor], obs) -> T.Tensor:
    x = T.Tensor(preprocess(net, obs))
    n_layers = len(net.hidden) + 1
    for i in range(n_layers):
        x = T.linear(x, params[f"q.{i}.w"], params[f"q.{i}.b"])
        if i < n_layers - 1:
            x = T.relu(x)
    return x


def act(qnet: QNetwork, obs, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy; ties go to the lowest action index. Always consumes two draws."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must be in [0, 1], got {epsilon}")
    u = rng.random()
    random_action = int(rng.integers(0, qnet.n_actions))
    if u < epsilon:
        return random_action
    return int(np.argmax(q_values(qnet, np.asarray(obs)[None])[0]))


def epsilon_at(step: int, hp: RLHyperparams, budget: int) -> float:
    horizon = max(1, int(hp.eps_fraction * budget))
    frac = min(1.0, step / horizon)
    return hp.eps_start + frac * (hp.eps_end - hp.eps_start)


@dataclass
class Transition:
    obs: np.ndarray
    action: int
    labeled_reward: float
    next_obs: np.ndarray
    done: bool
    sparse_reward: float
    episode: int = 0
    t: int = 0
    reward_version: int = 0
    policy_version: int = 0


def nstep(transitions: list[Transition], n: int, gamma: float):
    """Collapse one episode into n-step tuples ``(obs, action, return, next_obs, discount)``.

    ``discount`` is ``gamma**m`` for the m steps actually summed, or 0 if a
    terminal transition occurs within the window.
    """
    out = []
    T_ = len(transitions)
    for t in range(T_):
        ret, disc, last = 0.0, 1.0, t
        terminal = False
        for k in range(n):
            if t + k >= T_:
                break
            tr = transitions[t + k]
            ret += disc * tr.labeled_reward
            disc *= gamma
            last = t + k
            if tr.done:
                terminal = True
                break
        out.append((transitions[t].obs, transitions[t].action, ret,
                    transitions[last].next_obs, 0.0 if terminal else disc))
    return out


class ReplayBuffer:
    """FIFO replay with an optional never-evicted demo partition.

    Each sampled element comes from the demo partition with probability
    ``demo_ratio`` (when it is non-empty). Observations are stored as float16
    by default; grid renders use multiples of 1/8, which float16 holds exactly.
    ``featurize`` maps a batch of raw observations to the stored shape
    ``obs_shape`` (e.g. the Q-network's pooled input) on the way in.
    """

    def __init__(self, obs_shape, capacity: int, demo_ratio: float = 0.0, dtype=np.float16,
                 featurize=None):
        self.featurize = featurize
        if not 0.0 <= demo_ratio <= 1.0:
            raise ValueError("demo_ratio must be in [0, 1]")
        self.capacity = capacity
        self.demo_ratio = demo_ratio
        self.obs = np.zeros((capacity, *obs_shape), dtype=dtype)
        self.next_obs = np.zeros((capacity, *obs_shape), dtype=dtype)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.returns = np.zeros(capacity)
        self.discounts = np.zeros(capacity)
        self.size = 0
        self.pos = 0
        self.demo: list[tuple] = []
        self._demo_arrays = None
        self._lock = threading.Lock()

    def __len__(self):
        return self.size

    def _features(self, obs_batch) -> np.ndarray:
        obs_batch = np.asarray(obs_batch)
        return obs_batch if self.featurize is None else self.featurize(obs_batch)

    def add(self, obs, action, ret, next_obs, discount):
        if self.featurize is not None:
            obs, next_obs = self._features(np.stack([obs, next_obs]))
        self._put(obs, action, ret, next_obs, discount)

    def _put(self, obs, action, ret, next_obs, discount):
        with self._lock:
            i = self.pos
            self.obs[i] = obs
            self.next_obs[i] = next_obs
            self.actions[i] = action
            self.returns[i] = ret
            self.discounts[i] = discount
            self.pos = (i + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def add_episode(self, transitions: list[Transition], n: int, gamma: float):
        tuples = nstep(transitions, n, gamma)
        if not tuples:
            return
        obs = self._features(np.stack([t[0] for t in tuples]))
        next_obs = self._features(np.stack([t[3] for t in tuples]))
        for i, (_, a, ret, _, disc) in enumerate(tuples):
            self._put(obs[i], a, ret, next_obs[i], disc)

    def set_demo(self, tuples: list[tuple]):
        with self._lock:
            self.demo = list(tuples)
            if self.demo:
                dtype = self.obs.dtype
                self._demo_arrays = (
                    self._features(np.stack([d[0] for d in self.demo])).astype(dtype),
                    np.array([d[1] for d in self.demo], dtype=np.int64),
                    np.array([d[2] for d in self.demo]),
                    self._features(np.stack([d[3] for d in self.demo])).astype(dtype),
                    np.array([d[4] for d in self.demo]),
                )
            else:
                self._demo_arrays = None

    def sample(self, batch_size: int, rng: np.random.Generator):
        with self._lock:
            n_demo = 0
            if self._demo_arrays is not None and self.demo_ratio > 0:
                n_demo = int(rng.binomial(batch_size, self.demo_ratio))
            if self.size == 0:
                n_demo = batch_size
                if self._demo_arrays is None:
                    raise ValueError("sample from an empty replay buffer")
            n_online = batch_size - n_demo
            parts = []
            if n_online:
                idx = rng.integers(0, self.size, size=n_online)
                parts.append((self.obs[idx], self.actions[idx], self.returns[idx],
                              self.next_obs[idx], self.discounts[idx]))
            if n_demo:
                o, a, r, no, d = self._demo_arrays
                idx = rng.integers(0, len(a), size=n_demo)
                parts.append((o[idx], a[idx], r[idx], no[idx], d[idx]))
            cat = [np.concatenate([p[k] for p in parts]) for k in range(5)]
            return {"obs": cat[0].astype(np.float64), "actions": cat[1], "returns": cat[2],
                    "next_obs": cat[3].astype(np.float64), "discounts": cat[4], "n_demo": n_demo}


def seed_demos(buffer: ReplayBuffer, demos, n: int, gamma: float, label=None) -> ReplayBuffer:
    """Fill the demo partition from demonstrations that carry actions and sparse rewards.

    ``label(episode) -> per-step rewards`` overrides the sparse rewards (e.g. shaped labels).
    """
    tuples = []
    for ep in demos:
        if ep.actions is None or ep.sparse_rewards is None:
            raise ValueError(f"demo {ep.episode_id!r} has no actions; demo seeding requires actions")
        rewards = ep.sparse_rewards if label is None else label(ep)
        trs = [Transition(ep.frames[t], int(ep.actions[t]), float(rewards[t]), ep.frames[t + 1],
                          bool(t == len(ep.actions) - 1 and ep.success), float(ep.sparse_rewards[t]))
               for t in range(len(ep.actions))]
        tuples.extend(nstep(trs, n, gamma))
    buffer.set_demo(tuples)
    return buffer


class NonFiniteLoss(FloatingPointError):
    pass


class DQNLearner:
    def __init__(self, qnet: QNetwork, hp: RLHyperparams, seed: int = 0):
        self.qnet = qnet.copy()
        self.target = {k: v.copy() for k, v in qnet.params.items()}
        self.hp = hp
        self.opt = T.AdamState(learning_rate=hp.learning_rate)
        self.rng = np.random.default_rng(seed)
        self.updates = 0

    def update(self, buffer: ReplayBuffer) -> float:
        batch = buffer.sample(self.hp.batch_size, self.rng)
        return learner_step(self, batch)


def learner_step(learner: DQNLearner, batch: dict) -> float:
    """One double-DQN update on an n-step batch; refreshes the target net every ``target_refresh`` updates."""
    if len(batch["actions"]) == 0:
        raise ValueError("learner_step: empty batch")
    net = learner.qnet
    q_next_online = q_values(net, batch["next_obs"])
    a_star = np.argmax(q_next_online, axis=1)
    q_next_target = q_values(net, batch["next_obs"], learner.target)
    target = batch["returns"] + batch["discounts"] * q_next_target[np.arange(len(a_star)), a_star]
    params = T.leaves(net.params)
    q = q_graph(net, params, batch["obs"])
    q_sa = T.pick(q, batch["actions"])
    loss = T.mean(T.huber(q_sa - T.Tensor(target)))
    value = loss.item()
    if not np.isfinite(value):
        raise NonFiniteLoss("TD loss is non-finite")
    grads = T.clip_grad_norm(T.grad(loss, params), learner.hp.grad_clip)
    net.params, learner.opt = T.adam_step(net.params, grads, learner.opt, inplace=True)
    learner.updates += 1
    if learner.updates % learner.hp.target_refresh == 0:
        learner.target = {k: v.copy() for k, v in net.params.items()}
    return value


@dataclass
class TabularMdp:
    transitions: np.ndarray  # (S, A, S)
    rewards: np.ndarray  # (S, A, S) or (S, A)
    gamma: float
    terminal: np.ndarray | None = None

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        r = np.asarray(self.rewards, dtype=np.float64)
        if r.ndim == 2:
            r = np.broadcast_to(r[:, :, None], self.transitions.shape).copy()
        self.rewards = r
        if not np.allclose(self.transitions.sum(axis=2), 1.0):
            raise ValueError("transition rows must sum to 1")
        if self.terminal is None:
            self.terminal = np.zeros(self.n_states, dtype=bool)

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]


def value_iteration(mdp: TabularMdp, tol: float = 1e-12, max_iter: int = 100_000):
    """Returns ``(V, Q, policy)``; the greedy policy breaks ties toward the lowest action."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    P, R = mdp.transitions, mdp.rewards
    expected_r = np.einsum("sat,sat->sa", P, R)
    cont = (~mdp.terminal).astype(np.float64)[:, None]
    V = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        Q = expected_r + cont * mdp.gamma * (P @ V)
        V_new = Q.max(axis=1)
        if np.max(np.abs(V_new - V)) < tol:
            V = V_new
            break
        V = V_new
    Q = expected_r + cont * mdp.gamma * (P @ V)
    return V, Q, np.argmax(Q, axis=1)


def shape_mdp(mdp: TabularMdp, phi) -> TabularMdp:
    """Add ``F = gamma * phi(s') - phi(s)``; successors of terminal states count as potential 0."""
    phi = np.asarray(phi, dtype=np.float64)
    nxt = np.where(mdp.terminal[:, None, None], 0.0, mdp.gamma * phi[None, None, :])
    F = nxt - phi[:, None, None]
    return TabularMdp(mdp.transitions, mdp.rewards + F, mdp.gamma, mdp.terminal.copy())
