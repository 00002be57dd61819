"""The five runtime roles, each a single-threaded loop over a :class:`Node`.

Connection topology (connector -> listener)::

    actor           -> reward_predictor, reward_learner
    reward_predictor -> extrinsic_predictor, rl_learner
    rl_learner      -> actor            (policy checkpoints)
    reward_learner  -> reward_predictor (reward checkpoints)

Each role appends what it decided to a small JSON log; the orchestrator merges
those logs into a :class:`~gcr.runtime.core.Schedule`.
"""

from __future__ import annotations

import json
import logging
import os
import time
from collections import deque
from dataclasses import dataclass

import numpy as np

from gcr import checkpoint
from gcr import env as E
from gcr.config import ExperimentConfig
from gcr.objectives import Episode
from gcr.protocol import MsgType, message, unpack_payload
from gcr.rl import Transition
from gcr.runtime import core
from gcr.runtime.node import ConnectionLost, Node
from gcr.runtime.sync import transition_frame
from gcr.similarity import SimilarityModel, from_tensors, load_model, to_tensors

log = logging.getLogger(__name__)

ROLES = ("actor", "rl_learner", "reward_learner", "reward_predictor", "extrinsic_predictor")


class ClassifierError(RuntimeError):
    pass


@dataclass
class RoleContext:
    cfg: ExperimentConfig
    seed: int
    listen: str | None = None
    peers: dict | None = None  # role name -> "host:port"
    record_path: str | None = None
    replay: core.Schedule | None = None
    pretrained: str | None = None
    out_dir: str | None = None

    def model0(self, demos: core.DemoSet) -> SimilarityModel | None:
        if self.cfg.reward_mode == "sparse":
            return None
        if self.pretrained:
            return load_model(self.pretrained)
        return core.pretrain_reward_model(self.cfg, self.seed, demos)

    def write_log(self, data: dict):
        if self.record_path:
            tmp = self.record_path + ".tmp"
            with open(tmp, "w") as f:
                json.dump(data, f)
            os.replace(tmp, self.record_path)


def _params_message(version: int, params: dict, **header) -> bytes:
    return message(MsgType.CHECKPOINT, {"version": version, **header}, params)


class BufferedLink:
    """Outbound link that holds frames locally while its peer is unreachable.

    Reconnection is attempted at each episode boundary; more than ``limit``
    episodes held without a connection is fatal. Receivers deduplicate, so
    resending after a reconnect is safe.
    """

    def __init__(self, node: Node, peer: str, addr: str, limit: int):
        self.node, self.peer, self.addr, self.limit = node, peer, addr, limit
        self.conn = node.connect(peer, addr)
        self.held: list[bytes] = []
        self.held_episodes = 0

    def send(self, frame: bytes):
        if not self.conn.closed and not self.held:
            self.node.send(self.conn, frame)
            if not self.conn.closed:
                return
        self.held.append(frame)

    def end_episode(self):
        if not self.held:
            return
        self.held_episodes += 1
        try:
            self.conn = self.node.connect(self.peer, self.addr, timeout=0.2)
        except ConnectionLost:
            if self.held_episodes > self.limit:
                raise ConnectionLost(f"actor: {self.peer} unreachable for {self.held_episodes} episodes")
            return
        held, self.held, self.held_episodes = self.held, [], 0
        for frame in held:
            self.send(frame)


def run_actor(ctx: RoleContext):
    cfg = ctx.cfg
    node = Node("actor", ctx.listen)
    limit = cfg.runtime.max_buffered_episodes
    pred = BufferedLink(node, "reward_predictor", ctx.peers["reward_predictor"], limit)
    rwl = (BufferedLink(node, "reward_learner", ctx.peers["reward_learner"], limit)
           if cfg.online_reward_learning else None)
    links = [link for link in (pred, rwl) if link is not None]
    actor = core.ActorCore(cfg, ctx.seed)
    snapshots = {0: (actor.qnet.params, 0.0)}
    latest = 0
    versions: list[int] = []
    stop = False
    period = 1.0 / cfg.runtime.control_hz if cfg.runtime.control_hz else 0.0
    started = time.monotonic()
    next_tick = started
    deadline = started + cfg.runtime.duration if cfg.runtime.duration else None

    def drain(timeout=0.0):
        nonlocal latest, stop
        for _, env in node.poll(timeout):
            if env.msg_type == MsgType.CHECKPOINT:
                head, arrays = unpack_payload(env.payload)
                snapshots[head["version"]] = (arrays, head["td_loss"])
                latest = max(latest, head["version"])
            elif env.msg_type == MsgType.SHUTDOWN:
                stop = True

    def on_step(e, t, obs, a, next_obs, done):
        nonlocal next_tick
        pred.send(message(MsgType.TRANSITION, {"episode": e, "t": t, "action": a, "done": done},
                          {"obs": obs, "next_obs": next_obs}))
        drain()
        if period:
            # fixed control rate: a late step resets the clock instead of bursting to catch up
            next_tick += period
            now = time.monotonic()
            if now > next_tick:
                next_tick = now
            while now < next_tick:
                drain(next_tick - now)
                now = time.monotonic()

    while not actor.finished and not stop:
        if deadline is not None and time.monotonic() >= deadline:
            break
        e = actor.episodes
        drain()
        if ctx.replay is not None:
            if e >= len(ctx.replay.episodes):
                break
            p_e = ctx.replay.episodes[e][0]
            while p_e not in snapshots and not stop:
                drain(0.05)
            if stop:
                break
        else:
            p_e = latest
        params, td = snapshots[p_e]
        rec = actor.run_episode(params, p_e, td, on_step=on_step)
        pred.send(message(MsgType.EPISODE_END, {
            "episode": rec.episode, "start_step": rec.start_step, "length": rec.length,
            "epsilon": rec.epsilon, "policy_version": p_e, "td_loss": td, "success": rec.success}))
        if rwl is not None:
            rwl.send(message(MsgType.EPISODE_END, {"episode": rec.episode, "success": rec.success},
                             {"frames": rec.frames}))
        versions.append(p_e)
        for old in [v for v in snapshots if v < p_e]:
            del snapshots[old]
        for link in links:
            link.end_episode()

    elapsed = time.monotonic() - started
    ctx.write_log({"policy_versions": versions, "steps": actor.global_step, "elapsed": elapsed})
    for link in links:
        link.send(message(MsgType.SHUTDOWN))
    node.flush()
    # wait for the predictor to finish so its last labels reach the learner
    end = time.monotonic() + 600
    while not pred.conn.closed and time.monotonic() < end:
        node.poll(0.05)
    node.close()
    log.info("actor: %d steps in %.1fs", actor.global_step, elapsed)


def run_extrinsic_predictor(ctx: RoleContext):
    node = Node("extrinsic_predictor", ctx.listen)
    classifier = E.OracleClassifier(core.env_config(ctx.cfg, ctx.seed))
    while True:
        for conn, env in node.poll(0.1):
            if env.msg_type == MsgType.EXTRINSIC_REQUEST:
                head, arrays = unpack_payload(env.payload)
                labels = core.extrinsic_labels(classifier, arrays["frames"])
                node.send(conn, message(MsgType.EXTRINSIC_RESPONSE, head, {"labels": labels}))
            elif env.msg_type == MsgType.REWARD_REQUEST:
                head, arrays = unpack_payload(env.payload)
                node.send(conn, message(MsgType.REWARD_RESPONSE,
                                        {"id": head.get("id"), "success": bool(classifier.classify(arrays["obs"]))}))
            elif env.msg_type == MsgType.SHUTDOWN:
                node.flush()
                node.close()
                return


class RemoteClassifier:
    """Goal classifier client that asks an extrinsic predictor endpoint, one observation per request."""

    def __init__(self, addr: str, timeout: float = 5.0, node: Node | None = None):
        self.node = node or Node("remote-classifier")
        self.conn = self.node.connect("extrinsic_predictor", addr, timeout=timeout)
        self.timeout = timeout
        self._next_id = 0

    def classify(self, obs) -> bool:
        rid = self._next_id
        self._next_id += 1
        self.node.send(self.conn, message(MsgType.REWARD_REQUEST, {"id": rid}, {"obs": np.asarray(obs)}))
        deadline = time.monotonic() + self.timeout
        while time.monotonic() < deadline:
            for _, env in self.node.poll(0.01):
                if env.msg_type != MsgType.REWARD_RESPONSE:
                    raise ClassifierError(f"unexpected reply type {env.msg_type.name}")
                try:
                    head, _ = unpack_payload(env.payload)
                except (ValueError, KeyError) as exc:
                    raise ClassifierError(f"malformed reply: {exc}") from exc
                if head.get("id") != rid or not isinstance(head.get("success"), bool):
                    raise ClassifierError(f"malformed reply {head!r}")
                return head["success"]
            if self.conn.closed:
                raise ClassifierError("classifier endpoint closed the connection")
        raise ClassifierError(f"no reply within {self.timeout}s")

    __call__ = classify

    def close(self, shutdown: bool = False):
        if shutdown and not self.conn.closed:
            self.node.send(self.conn, message(MsgType.SHUTDOWN))
            self.node.flush(5.0)
        self.node.close()


def run_reward_predictor(ctx: RoleContext):
    cfg = ctx.cfg
    node = Node("reward_predictor", ctx.listen)
    ext = node.connect("extrinsic_predictor", ctx.peers["extrinsic_predictor"])
    rll = node.connect("rl_learner", ctx.peers["rl_learner"])
    demos = core.make_demos(cfg, ctx.seed)
    predictor = core.PredictorCore(cfg, core.goal_frames(cfg, demos))
    models = {}
    model0 = ctx.model0(demos)
    if model0 is not None:
        models[0] = model0
        predictor.apply(0, model0)
    steps: dict[int, dict] = {}
    waiting: deque = deque()  # episode headers in actor order
    labels: dict[int, np.ndarray] = {}
    requested: dict[int, float] = {}
    versions: list[int] = []
    actor_done = False
    metrics_f = stream_f = None
    if ctx.out_dir:
        os.makedirs(ctx.out_dir, exist_ok=True)
        metrics_f = open(os.path.join(ctx.out_dir, f"metrics_seed{ctx.seed}.csv"), "w", newline="")
        metrics_f.write(",".join(core.METRIC_FIELDS) + "\n")
        stream_f = open(os.path.join(ctx.out_dir, f"stream_seed{ctx.seed}.bin"), "wb")

    def request(e):
        trs = steps[e]
        frames = np.stack([trs[0][0], *[trs[t][2] for t in range(len(trs))]])
        node.send(ext, message(MsgType.EXTRINSIC_REQUEST, {"episode": e}, {"frames": frames}))
        requested[e] = time.monotonic()

    try:
        while True:
            for _, env in node.poll(0.02):
                mt = env.msg_type
                if mt == MsgType.TRANSITION:
                    head, arrays = unpack_payload(env.payload)
                    # at-least-once delivery: (episode, t) identifies a transition
                    steps.setdefault(head["episode"], {}).setdefault(
                        head["t"], (arrays["obs"], head["action"], arrays["next_obs"], head["done"]))
                elif mt == MsgType.EPISODE_END:
                    head, _ = unpack_payload(env.payload)
                    if all(h["episode"] != head["episode"] for h in waiting):
                        waiting.append(head)
                        request(head["episode"])
                elif mt == MsgType.EXTRINSIC_RESPONSE:
                    head, arrays = unpack_payload(env.payload)
                    labels[head["episode"]] = arrays["labels"]
                elif mt == MsgType.CHECKPOINT:
                    head, arrays = unpack_payload(env.payload)
                    models[head["version"]] = from_tensors(arrays)
                elif mt == MsgType.SHUTDOWN:
                    actor_done = True
            # label finished episodes strictly in order
            while waiting and waiting[0]["episode"] in labels:
                head = waiting[0]
                e = head["episode"]
                if ctx.replay is not None:
                    r_e = ctx.replay.episodes[e][1]
                    if r_e >= 0 and r_e not in models:
                        break
                else:
                    r_e = max(models) if models else -1
                if r_e >= 0 and r_e != predictor.version:
                    predictor.apply(r_e, models[r_e])
                for old in [v for v in models if v < r_e]:
                    del models[old]
                trs = steps.pop(e)
                frames = np.stack([trs[0][0], *[trs[t][2] for t in range(len(trs))]])
                rec = core.EpisodeRecord(e, frames, [trs[t][1] for t in range(len(trs))], [],
                                         head["start_step"], head["epsilon"], head["policy_version"],
                                         head["td_loss"])
                labeled = predictor.label(rec, labels.pop(e))
                for tr in labeled:
                    frame = transition_frame(tr)
                    node.send(rll, frame)
                    if stream_f:
                        stream_f.write(frame)
                node.send(rll, message(MsgType.EPISODE_END, {"episode": e, "length": rec.length}))
                if metrics_f:
                    metrics_f.write(core.format_metrics(core.metrics_row(rec, labeled)) + "\n")
                    metrics_f.flush()
                versions.append(predictor.version)
                waiting.popleft()
            # a lost reply is retried
            now = time.monotonic()
            for h in waiting:
                e = h["episode"]
                if e not in labels and now - requested[e] > 30.0:
                    log.warning("reward_predictor: extrinsic label for episode %d timed out; retrying", e)
                    request(e)
            if actor_done and not waiting:
                break
    finally:
        for f in (metrics_f, stream_f):
            if f:
                f.close()
    ctx.write_log({"reward_versions": versions})
    for c in (rll, ext):
        if not c.closed:
            node.send(c, message(MsgType.SHUTDOWN))
    node.flush()
    node.close()


def run_rl_learner(ctx: RoleContext):
    cfg = ctx.cfg
    node = Node("rl_learner", ctx.listen)
    actor = node.connect("actor", ctx.peers["actor"])
    learner = core.RLLearnerCore(cfg, ctx.seed)
    if cfg.demos.seeding:
        demos = core.make_demos(cfg, ctx.seed)
        predictor = core.PredictorCore(cfg, core.goal_frames(cfg, demos))
        predictor.apply(0, ctx.model0(demos))
        learner.seed_demos(demos.full, [predictor.label_demo(ep) for ep in demos.full])
    partial: dict[int, dict] = {}
    seen: set[int] = set()
    stop = False
    schedule = ctx.replay

    def handle(env):
        nonlocal stop
        if env.msg_type == MsgType.TRANSITION:
            head, arrays = unpack_payload(env.payload)
            partial.setdefault(head["episode"], {}).setdefault(head["t"], Transition(
                arrays["obs"], head["action"], head["labeled"], arrays["next_obs"], head["done"],
                head["sparse"], head["episode"], head["t"], head["reward_version"], head["policy_version"]))
        elif env.msg_type == MsgType.EPISODE_END:
            head, _ = unpack_payload(env.payload)
            e = head["episode"]
            if e not in seen:
                seen.add(e)
                trs = partial.pop(e)
                learner.pending.append([trs[t] for t in range(head["length"])])
        elif env.msg_type == MsgType.SHUTDOWN:
            stop = True

    def publish(v):
        if v is not None and not actor.closed:
            params, td = learner.snapshots[v]
            node.send(actor, _params_message(v, params, td_loss=td))

    while True:
        for _, env in node.poll(0.0 if learner.pending else 0.02):
            handle(env)
        work = 0
        while work < 8:
            if schedule is None:
                learner.ingest_all()
                if learner.learner.updates >= learner.allowed_updates():
                    break
            else:
                u = learner.learner.updates
                if u >= len(schedule.rl_updates):
                    learner.ingest_all()
                    break
                if learner.ingested < schedule.rl_updates[u]:
                    if not learner.pending:
                        break
                    learner.ingest_next()
                    continue
            publish(learner.update())
            work += 1
        if stop and (work == 0 or actor.closed):
            break
    ctx.write_log({"rl_updates": learner.update_log})
    if ctx.out_dir:
        checkpoint.save(os.path.join(ctx.out_dir, f"policy_seed{ctx.seed}.gcrt"), learner.learner.qnet.params)
    node.flush(5.0)
    node.close()


def run_reward_learner(ctx: RoleContext):
    cfg = ctx.cfg
    node = Node("reward_learner", ctx.listen)
    pred = node.connect("reward_predictor", ctx.peers["reward_predictor"])
    demos = core.make_demos(cfg, ctx.seed)
    rw = core.RewardLearnerCore(cfg, ctx.seed, ctx.model0(demos), demos)
    seen: set[int] = set()
    stop = False
    schedule = ctx.replay
    task = cfg.env.task

    while True:
        for _, env in node.poll(0.0 if rw.pending else 0.02):
            if env.msg_type == MsgType.EPISODE_END:
                head, arrays = unpack_payload(env.payload)
                if head["episode"] not in seen:
                    seen.add(head["episode"])
                    rw.pending.append(Episode(arrays["frames"], head["success"], cfg.env.embodiment, "online",
                                              episode_id=f"online-{head['episode']:06d}", task=task))
            elif env.msg_type == MsgType.SHUTDOWN:
                stop = True
        did = False
        if schedule is None:
            rw.ingest_all()
            if rw.trainer.steps < rw.allowed_steps():
                snap = rw.step()
                did = True
                if snap is not None and not pred.closed:
                    node.send(pred, message(MsgType.CHECKPOINT, {"version": rw.version}, to_tensors(snap)))
        else:
            s = rw.trainer.steps
            if s < len(schedule.reward_steps):
                if rw.ingested < schedule.reward_steps[s]:
                    if rw.pending:
                        rw.ingest_next()
                        did = True
                else:
                    snap = rw.step()
                    did = True
                    if snap is not None and not pred.closed:
                        node.send(pred, message(MsgType.CHECKPOINT, {"version": rw.version}, to_tensors(snap)))
        if stop and not did:
            break
    ctx.write_log({"reward_steps": rw.step_log})
    node.flush(30.0)
    # keep the socket open until the predictor has drained our checkpoints
    end = time.monotonic() + 600
    while not pred.closed and time.monotonic() < end:
        node.poll(0.05)
    node.close()


RUNNERS = {
    "actor": run_actor,
    "rl_learner": run_rl_learner,
    "reward_learner": run_reward_learner,
    "reward_predictor": run_reward_predictor,
    "extrinsic_predictor": run_extrinsic_predictor,
}
