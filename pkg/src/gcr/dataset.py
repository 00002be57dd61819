"""Episode datasets on disk: one GCRT file per episode plus a JSON manifest."""

from __future__ import annotations

import json
import os

import numpy as np

from gcr import checkpoint
from gcr.objectives import Episode

MANIFEST = "manifest.json"


class DatasetError(ValueError):
    pass


def _episode_tensors(ep: Episode) -> dict[str, np.ndarray]:
    out = {"frames": np.asarray(ep.frames, dtype=np.float64)}
    if ep.actions is not None:
        out["actions"] = np.asarray(ep.actions, dtype=np.float64)
    if ep.sparse_rewards is not None:
        out["sparse_rewards"] = np.asarray(ep.sparse_rewards, dtype=np.float64)
    return out


def save_episodes(directory, episodes: list[Episode]) -> str:
    os.makedirs(directory, exist_ok=True)
    entries = []
    for i, ep in enumerate(episodes):
        ep_id = ep.episode_id or f"episode-{i:05d}"
        fname = f"{i:05d}.gcrt"
        checkpoint.save(os.path.join(directory, fname), _episode_tensors(ep))
        entries.append({"episode_id": ep_id, "file": fname, "length": len(ep), "success": bool(ep.success),
                        "embodiment_tag": ep.embodiment, "source": ep.source, "task": ep.task})
    path = os.path.join(directory, MANIFEST)
    with open(path, "w") as f:
        json.dump({"episodes": entries}, f, indent=1)
    return path


def load_episodes(directory) -> list[Episode]:
    path = os.path.join(directory, MANIFEST)
    try:
        with open(path) as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read manifest {path}: {exc}") from exc
    episodes = []
    for entry in manifest["episodes"]:
        tensors = checkpoint.load(os.path.join(directory, entry["file"]))
        frames = tensors["frames"]
        if len(frames) != entry["length"]:
            raise DatasetError(f"{entry['episode_id']}: manifest length {entry['length']} != {len(frames)} frames")
        actions = tensors.get("actions")
        episodes.append(Episode(
            frames, bool(entry["success"]), entry["embodiment_tag"], entry["source"],
            actions=None if actions is None else actions.astype(np.int64),
            sparse_rewards=tensors.get("sparse_rewards"),
            episode_id=entry["episode_id"], task=entry.get("task", "")))
    return episodes
