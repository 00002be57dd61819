"""GridManip: deterministic top-down grid manipulation tasks with rendered observations.

The arm moves one cell per lateral action and travels at table height, so any
lateral move lowers it to z=0. ``Raise`` lifts the arm (and anything it holds)
one level. Tasks:

* lift   - grasp the block and raise it ``lift_height`` levels
* stack  - carry block A onto block B (A at B's cell, one level up)
* drawer - grasp the handle and pull it ``drawer_length`` cells to the right

Observations have 6 channels (arm, gripper, object A, object B, drawer,
arm height), each ``obs_size x obs_size``; every grid cell covers a square of
``obs_size // width`` pixels. All pixel values are multiples of 1/8.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from gcr.objectives import Episode

TASKS = ("lift", "stack", "drawer")
N_CHANNELS = 6
CH_ARM, CH_GRIP, CH_OBJ_A, CH_OBJ_B, CH_DRAWER, CH_HEIGHT = range(N_CHANNELS)


class Action(enum.IntEnum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3
    GRIP_TOGGLE = 4
    RAISE = 5


N_ACTIONS = len(Action)
_MOVES = {Action.UP: (0, -1), Action.DOWN: (0, 1), Action.LEFT: (-1, 0), Action.RIGHT: (1, 0)}


class EpisodeDoneError(RuntimeError):
    pass


class UnsolvableError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    width: int = 8
    height: int = 8
    task: str = "lift"
    max_steps: int | None = None
    embodiment: str = "A"
    seed: int = 0
    obs_size: int = 16
    max_height: int = 4
    lift_height: int = 3
    drawer_length: int = 3

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.width < 4 or self.height < 4:
            raise ValueError("width and height must be >= 4")
        if self.embodiment not in ("A", "B"):
            raise ValueError(f"unknown embodiment {self.embodiment!r}")
        if self.obs_size % self.width or self.obs_size % self.height:
            raise ValueError("obs_size must be a multiple of width and height")
        if self.max_steps is None:
            mult = 3 if self.task == "stack" else 2
            object.__setattr__(self, "max_steps", mult * (self.width + self.height))
        if self.max_steps < 2 * (self.width + self.height):
            raise ValueError("max_steps must be >= 2 * (width + height)")
        if not 1 <= self.lift_height <= self.max_height <= 8:
            raise ValueError("need 1 <= lift_height <= max_height <= 8")
        if self.task == "drawer" and self.drawer_length >= self.width:
            raise ValueError("drawer_length must be < width")

    @property
    def obs_shape(self) -> tuple:
        return (N_CHANNELS, self.obs_size, self.obs_size)

    @property
    def cell_px(self) -> tuple:
        return self.obs_size // self.width, self.obs_size // self.height


@dataclass(frozen=True)
class EnvState:
    arm: tuple
    z: int = 0
    closed: bool = False
    held: int | None = None
    # (x, y, z) per object: lift uses [block], stack uses [A, B], drawer uses [handle]
    objects: tuple = ()
    init_objects: tuple = ()
    drawer_ext: int = 0
    steps: int = 0
    done: bool = False


def reset(cfg: EnvConfig, rng: np.random.Generator) -> EnvState:
    cells = cfg.width * cfg.height
    if cfg.task == "drawer":
        hy = int(rng.integers(0, cfg.height))
        hx = int(rng.integers(0, cfg.width - cfg.drawer_length))
        while True:
            c = int(rng.integers(0, cells))
            arm = (c % cfg.width, c // cfg.width)
            if arm != (hx, hy):
                break
        objs = ((hx, hy, 0),)
    else:
        n_obj = 1 if cfg.task == "lift" else 2
        picks = rng.choice(cells, size=n_obj + 1, replace=False)
        arm = (int(picks[0] % cfg.width), int(picks[0] // cfg.width))
        objs = tuple((int(p % cfg.width), int(p // cfg.width), 0) for p in picks[1:])
    return EnvState(arm=arm, objects=objs, init_objects=objs)


def is_goal(state: EnvState, cfg: EnvConfig) -> bool:
    if cfg.task == "lift":
        return state.held == 0 and state.objects[0][2] >= cfg.lift_height
    if cfg.task == "stack":
        a, b = state.objects
        return a[:2] == b[:2] and a[2] == 1
    return state.drawer_ext >= cfg.drawer_length


def step(state: EnvState, action, cfg: EnvConfig) -> tuple[EnvState, float, bool]:
    if state.done:
        raise EpisodeDoneError("step() called on a finished episode")
    action = Action(int(action))
    objs = list(state.objects)
    arm, z, closed, held, ext = state.arm, state.z, state.closed, state.held, state.drawer_ext

    if action in _MOVES:
        dx, dy = _MOVES[action]
        nx, ny = arm[0] + dx, arm[1] + dy
        inside = 0 <= nx < cfg.width and 0 <= ny < cfg.height
        if cfg.task == "drawer" and held is not None:
            # the handle slides along its track only
            new_ext = ext + dx
            if dy == 0 and inside and 0 <= new_ext <= cfg.width - 1 - state.init_objects[0][0]:
                ext = new_ext
                arm = (nx, ny)
                objs[0] = (nx, ny, 0)
        else:
            if inside:
                arm = (nx, ny)
            z = 0
            if held is not None:
                objs[held] = (arm[0], arm[1], 0)
    elif action == Action.GRIP_TOGGLE:
        if closed:
            closed = False
            if held is not None:
                if cfg.task != "drawer":
                    x, y, oz = objs[held]
                    objs[held] = (x, y, _rest_height(objs, held, cfg, oz))
                held = None
        else:
            closed = True
            for i, (x, y, oz) in enumerate(objs):
                graspable = cfg.task != "stack" or i == 0
                if graspable and (x, y) == arm and oz == z:
                    held = i
                    break
    elif action == Action.RAISE:
        if not (cfg.task == "drawer" and held is not None):
            z = min(z + 1, cfg.max_height)
            if held is not None:
                objs[held] = (arm[0], arm[1], z)

    nxt = replace(state, arm=arm, z=z, closed=closed, held=held, objects=tuple(objs),
                  drawer_ext=ext, steps=state.steps + 1)
    goal = is_goal(nxt, cfg)
    done = goal or nxt.steps >= cfg.max_steps
    return replace(nxt, done=done), (1.0 if goal else 0.0), done


def _rest_height(objs, i, cfg, z) -> int:
    # a released object lands on the stack base if it is above it, else on the table
    if cfg.task == "stack" and i == 0 and objs[0][:2] == objs[1][:2] and z >= 1:
        return 1
    return 0


def _cell(img, cfg, x, y, value):
    px, py = cfg.cell_px
    img[y * py:(y + 1) * py, x * px:(x + 1) * px] = value


def render(state: EnvState, cfg: EnvConfig) -> np.ndarray:
    obs = np.zeros(cfg.obs_shape)
    px, py = cfg.cell_px
    ax, ay = state.arm
    if cfg.embodiment == "A":
        _cell(obs[CH_ARM], cfg, ax, ay, 1.0)
    else:
        # embodiment B: a gantry link down from the top edge and a diagonal end effector
        obs[CH_ARM, :ay * py, ax * px] = 0.25
        for k in range(min(px, py)):
            obs[CH_ARM, ay * py + k, ax * px + k] = 0.75
    if state.closed:
        _cell(obs[CH_GRIP], cfg, ax, ay, 1.0)
    _cell(obs[CH_HEIGHT], cfg, ax, ay, state.z / cfg.max_height)
    if cfg.task == "drawer":
        hx0, hy, _ = state.init_objects[0]
        for k in range(state.drawer_ext):
            _cell(obs[CH_DRAWER], cfg, hx0 + k, hy, 0.5)
        _cell(obs[CH_DRAWER], cfg, hx0 + state.drawer_ext, hy, 1.0)
    else:
        if cfg.task == "stack":
            bx, by, _ = state.objects[1]
            _cell(obs[CH_OBJ_B], cfg, bx, by, 1.0)
        x, y, oz = state.objects[0]
        _cell(obs[CH_OBJ_A], cfg, x, y, 0.5 + 0.5 * oz / cfg.max_height)
    return obs


def make_decoy(cfg: EnvConfig, goal_state: EnvState) -> EnvState:
    """Same arm pose and gripper as ``goal_state`` with every object back at its start."""
    return replace(goal_state, held=None, objects=goal_state.init_objects, drawer_ext=0, done=False)


def _path(start, target, strategy):
    (x, y), (tx, ty) = start, target
    xs = [Action.RIGHT if tx > x else Action.LEFT] * abs(tx - x)
    ys = [Action.DOWN if ty > y else Action.UP] * abs(ty - y)
    return xs + ys if strategy == "xy" else ys + xs


def demo_actions(cfg: EnvConfig, state: EnvState, strategy: str = "xy") -> list[Action]:
    if strategy not in ("xy", "yx"):
        raise ValueError(f"unknown strategy {strategy!r}")
    if cfg.task == "lift":
        block = state.objects[0][:2]
        return _path(state.arm, block, strategy) + [Action.GRIP_TOGGLE] + [Action.RAISE] * cfg.lift_height
    if cfg.task == "stack":
        a, b = state.objects[0][:2], state.objects[1][:2]
        return (_path(state.arm, a, strategy) + [Action.GRIP_TOGGLE]
                + _path(a, b, strategy) + [Action.RAISE])
    handle = state.objects[0][:2]
    return _path(state.arm, handle, strategy) + [Action.GRIP_TOGGLE] + [Action.RIGHT] * cfg.drawer_length


def rollout(cfg: EnvConfig, state: EnvState, actions) -> tuple[list[EnvState], list[float]]:
    states, rewards = [state], []
    for a in actions:
        state, r, done = step(state, a, cfg)
        states.append(state)
        rewards.append(r)
        if done:
            break
    return states, rewards


def scripted_demo(cfg: EnvConfig, rng: np.random.Generator, style: str = "passive",
                  strategy: str = "xy", episode_id: str = "", state: EnvState | None = None) -> Episode:
    """A successful scripted episode. ``style='passive'`` strips actions and rewards."""
    if style not in ("passive", "full"):
        raise ValueError(f"unknown style {style!r}")
    state = reset(cfg, rng) if state is None else state
    actions = demo_actions(cfg, state, strategy)
    if len(actions) > cfg.max_steps:
        raise UnsolvableError(f"scripted {cfg.task} needs {len(actions)} steps > max_steps={cfg.max_steps}")
    states, rewards = rollout(cfg, state, actions)
    if not is_goal(states[-1], cfg) or len(states) != len(actions) + 1:
        raise UnsolvableError(f"scripted {cfg.task} demo failed to reach the goal")
    frames = np.stack([render(s, cfg) for s in states])
    ep = Episode(frames, True, cfg.embodiment, "demo", episode_id=episode_id, task=cfg.task)
    if style == "full":
        ep.actions = np.array([int(a) for a in actions], dtype=np.int64)
        ep.sparse_rewards = np.array(rewards)
    return ep


def generate_demos(cfg: EnvConfig, n: int, seed: int, style: str = "passive", prefix: str = "demo"):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        strategy = "xy" if i % 2 == 0 else "yx"
        out.append(scripted_demo(cfg, rng, style, strategy, episode_id=f"{prefix}-{cfg.embodiment}-{i:04d}"))
    return out


def object_level(value: float, cfg: EnvConfig) -> int:
    return int(round((value - 0.5) * 2 * cfg.max_height))


class OracleClassifier:
    """Reads the goal predicate from an :class:`EnvState` or decodes it from a rendered observation."""

    def __init__(self, cfg: EnvConfig):
        self.cfg = cfg

    def __call__(self, x) -> bool:
        return self.classify(x)

    def classify(self, x) -> bool:
        cfg = self.cfg
        if isinstance(x, EnvState):
            return is_goal(x, cfg)
        obs = np.asarray(x)
        if obs.shape != cfg.obs_shape:
            raise ValueError(f"observation shape {obs.shape} != {cfg.obs_shape}")
        if cfg.task == "lift":
            top = obs[CH_OBJ_A].max()
            return object_level(top, cfg) >= cfg.lift_height
        if cfg.task == "stack":
            a = obs[CH_OBJ_A]
            b = obs[CH_OBJ_B]
            ya, xa = np.unravel_index(np.argmax(a), a.shape)
            return bool(b[ya, xa] == 1.0 and object_level(a[ya, xa], cfg) == 1)
        px, py = cfg.cell_px
        body = int(np.count_nonzero(obs[CH_DRAWER] == 0.5)) // (px * py)
        return body >= cfg.drawer_length


def classify_goal(classifier, x) -> bool:
    return bool(classifier.classify(x))
