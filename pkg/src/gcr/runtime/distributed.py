"""Spawn and supervise the five role processes for one seed."""

from __future__ import annotations

import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import dataclass

from gcr import config as C
from gcr.config import ExperimentConfig
from gcr.runtime import core
from gcr.runtime.node import free_port
from gcr.similarity import SimilarityModel, save_model

log = logging.getLogger(__name__)


class RuntimeFailure(RuntimeError):
    pass


@dataclass
class DistributedResult:
    out_dir: str
    schedule: core.Schedule
    metrics_path: str
    stream_path: str
    actor_steps: int
    actor_elapsed: float

    @property
    def steps_per_sec(self) -> float:
        return self.actor_steps / self.actor_elapsed if self.actor_elapsed > 0 else 0.0


def role_names(cfg: ExperimentConfig) -> list[str]:
    roles = ["extrinsic_predictor", "rl_learner", "reward_predictor", "actor"]
    # without online reward learning there is nothing for a reward learner to do
    if cfg.online_reward_learning:
        roles.insert(2, "reward_learner")
    return roles


_PEERS = {
    "actor": ("reward_predictor", "reward_learner"),
    "reward_predictor": ("extrinsic_predictor", "rl_learner"),
    "rl_learner": ("actor",),
    "reward_learner": ("reward_predictor",),
    "extrinsic_predictor": (),
}


def merge_logs(logs: dict[str, dict]) -> core.Schedule:
    pv = logs["actor"]["policy_versions"]
    rv = logs["reward_predictor"]["reward_versions"]
    n = min(len(pv), len(rv))
    return core.Schedule([[pv[i], rv[i]] for i in range(n)], list(logs["rl_learner"]["rl_updates"]),
                         list(logs.get("reward_learner", {}).get("reward_steps", [])))


def run_distributed(cfg: ExperimentConfig, seed: int, out_dir: str, *, replay: core.Schedule | None = None,
                    pretrained: SimilarityModel | None = None, timeout: float = 3600.0,
                    host: str = "127.0.0.1") -> DistributedResult:
    os.makedirs(out_dir, exist_ok=True)
    cfg_path = os.path.join(out_dir, "config.json")
    C.save(cfg_path, cfg)
    pre_path = None
    if cfg.reward_mode != "sparse":
        if pretrained is None:
            pretrained = core.pretrain_reward_model(cfg, seed, core.make_demos(cfg, seed))
        pre_path = os.path.join(out_dir, "reward_v0.gcrt")
        save_model(pre_path, pretrained)
    replay_path = None
    if replay is not None:
        replay_path = os.path.join(out_dir, "replay_schedule.json")
        replay.save(replay_path)

    roles = role_names(cfg)
    addrs = {r: f"{host}:{free_port(host)}" for r in roles}
    env = dict(os.environ, OMP_NUM_THREADS="1", OPENBLAS_NUM_THREADS="1", MKL_NUM_THREADS="1")
    procs: dict[str, subprocess.Popen] = {}
    log_paths = {r: os.path.join(out_dir, f"{r}.log.json") for r in roles}
    err_paths = {r: os.path.join(out_dir, f"{r}.stderr") for r in roles}
    for path in log_paths.values():
        if os.path.exists(path):
            os.remove(path)
    try:
        for r in roles:
            cmd = [sys.executable, "-m", "gcr.runtime.process", "--role", r, "--listen", addrs[r],
                   "--config", cfg_path, "--seed", str(seed), "--record-schedule", log_paths[r],
                   "--out-dir", out_dir]
            for peer in _PEERS[r]:
                if peer in addrs:
                    cmd += ["--connect", f"{peer}={addrs[peer]}"]
            if pre_path:
                cmd += ["--pretrained", pre_path]
            if replay_path:
                cmd += ["--replay-schedule", replay_path]
            procs[r] = subprocess.Popen(cmd, env=env, stdout=subprocess.DEVNULL,
                                        stderr=open(err_paths[r], "w"))
        deadline = time.monotonic() + timeout
        while any(p.poll() is None for p in procs.values()):
            for r, p in procs.items():
                if p.poll() not in (None, 0):
                    raise RuntimeFailure(f"role {r} exited with code {p.returncode}: {_tail(err_paths[r])}")
            if time.monotonic() > deadline:
                raise RuntimeFailure(f"distributed run exceeded {timeout}s")
            time.sleep(0.05)
        for r, p in procs.items():
            if p.returncode != 0:
                raise RuntimeFailure(f"role {r} exited with code {p.returncode}: {_tail(err_paths[r])}")
    finally:
        for p in procs.values():
            if p.poll() is None:
                p.kill()
                p.wait()

    logs = {}
    for r in roles:
        if os.path.exists(log_paths[r]):
            with open(log_paths[r]) as f:
                logs[r] = json.load(f)
    schedule = merge_logs(logs)
    schedule.save(os.path.join(out_dir, "schedule.json"))
    return DistributedResult(out_dir, schedule, os.path.join(out_dir, f"metrics_seed{seed}.csv"),
                             os.path.join(out_dir, f"stream_seed{seed}.bin"),
                             logs["actor"]["steps"], logs["actor"]["elapsed"])


def _tail(path: str, n: int = 2000) -> str:
    try:
        with open(path) as f:
            return f.read()[-n:]
    except OSError:
        return ""
