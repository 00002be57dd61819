"""Experiment configuration: one JSON file with a schema version determines a run."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields, replace

from gcr.env import EnvConfig
from gcr.objectives import GcrHyperparams
from gcr.rl import RLHyperparams
from gcr.shaping import ShapingConfig

SCHEMA_VERSION = 1
REWARD_MODES = ("sparse", "vip_frozen", "vip_online", "gcr_sc", "gcr_ic", "gcr_abs")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RewardModelConfig:
    hidden: tuple = (256, 128)
    embedding_dim: int = 32
    features: str = "keypoints"
    pretrain_steps: int = 1000
    # one reward-learner step per this many environment steps
    online_every: int = 50
    # broadcast a checkpoint every this many reward-learner steps
    checkpoint_every: int = 200
    add_online_successes: bool = True
    goal_set_size: int = 16


@dataclass(frozen=True)
class DemoConfig:
    target: int = 20
    other: int = 0
    other_embodiment: str = "B"
    seeding: bool = False


@dataclass(frozen=True)
class RuntimeConfig:
    mode: str = "sync"
    control_hz: float | None = None
    max_buffered_episodes: int = 20
    heartbeat: float = 1.0
    reward_slowdown: float = 1.0
    duration: float | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    schema_version: int = SCHEMA_VERSION
    env: EnvConfig = field(default_factory=EnvConfig)
    reward_mode: str = "gcr_sc"
    shaping: ShapingConfig = field(default_factory=ShapingConfig)
    gcr: GcrHyperparams = field(default_factory=GcrHyperparams)
    rl: RLHyperparams = field(default_factory=RLHyperparams)
    reward_model: RewardModelConfig = field(default_factory=RewardModelConfig)
    demos: DemoConfig = field(default_factory=DemoConfig)
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)
    seeds: tuple = (0,)
    steps: int = 150_000
    eval_every: int = 5_000
    eval_episodes: int = 50
    output_dir: str = "runs"

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        if self.reward_mode not in REWARD_MODES:
            raise ConfigError(f"unknown reward_mode {self.reward_mode!r}; expected one of {REWARD_MODES}")
        if self.reward_mode == "gcr_abs" and self.shaping.mode != "absolute":
            object.__setattr__(self, "shaping", replace(self.shaping, mode="absolute"))
        if len(self.seeds) < 1:
            raise ConfigError("need at least one seed")
        if self.steps < 1:
            raise ConfigError("steps must be positive")
        if self.runtime.mode not in ("sync", "distributed"):
            raise ConfigError(f"unknown runtime mode {self.runtime.mode!r}")
        if self.demos.target < 1:
            raise ConfigError("need at least one target-embodiment demo")

    @property
    def objective(self) -> str | None:
        return {"sparse": None, "vip_frozen": "vip", "vip_online": "vip",
                "gcr_sc": "sc", "gcr_ic": "ic", "gcr_abs": "sc"}[self.reward_mode]

    @property
    def online_reward_learning(self) -> bool:
        return self.reward_mode not in ("sparse", "vip_frozen")


def _to_jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_jsonable(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_jsonable(x) for x in obj]
    return obj


_NESTED = {"env": EnvConfig, "shaping": ShapingConfig, "gcr": GcrHyperparams, "rl": RLHyperparams,
           "reward_model": RewardModelConfig, "demos": DemoConfig, "runtime": RuntimeConfig}


def _build(cls, data: dict):
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{cls.__name__}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for k, v in data.items():
        if isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from exc


def from_dict(data: dict) -> ExperimentConfig:
    data = dict(data)
    for key, cls in _NESTED.items():
        if key in data:
            if not isinstance(data[key], dict):
                raise ConfigError(f"{key} must be an object")
            data[key] = _build(cls, data[key])
    return _build(ExperimentConfig, data)


def to_dict(cfg: ExperimentConfig) -> dict:
    return _to_jsonable(cfg)


def load(path) -> ExperimentConfig:
    try:
        with open(path) as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return from_dict(data)


def save(path, cfg: ExperimentConfig) -> None:
    with open(path, "w") as f:
        json.dump(to_dict(cfg), f, indent=2, sort_keys=True)
        f.write("\n")
