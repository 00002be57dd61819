import pytest

from gcr import config as C


def tiny_config(**overrides):
    """A few hundred steps of Lift on a 4x4 grid: enough to exercise every role, fast on one core."""
    base = {
        "name": "tiny",
        "env": {"task": "lift", "width": 4, "height": 4, "obs_size": 8},
        "reward_mode": "gcr_sc",
        "rl": {"hidden": [16], "learning_starts": 64, "batch_size": 16, "target_refresh": 50},
        "reward_model": {"hidden": [16], "embedding_dim": 8, "pretrain_steps": 10, "online_every": 40,
                         "checkpoint_every": 2, "goal_set_size": 4},
        "gcr": {"batch_size": 4, "num_negatives": 4},
        "demos": {"target": 3},
        "steps": 400,
        "eval_every": 200,
        "eval_episodes": 4,
    }
    for k, v in overrides.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            base[k] = {**base[k], **v}
        else:
            base[k] = v
    return C.from_dict(base)


@pytest.fixture
def tiny():
    return tiny_config


# one verdict line per acceptance criterion, printed in the terminal summary
_VERDICTS: list[tuple[int, str, bool, str]] = []


@pytest.fixture
def verdict():
    def record(number: int, title: str, passed: bool, detail: str = ""):
        _VERDICTS.append((number, title, bool(passed), detail))
        print(f"criterion {number} {'PASS' if passed else 'FAIL'}: {title} | {detail}")
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(_VERDICTS):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number}. {title}: {detail}")
