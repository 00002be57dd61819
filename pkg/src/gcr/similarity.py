"""Goal-similarity encoder: an MLP over fixed features of grid observations.

``similarity`` is the cosine of two embeddings and ``potential`` rescales it
to [0, 1] for reward shaping.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from gcr import checkpoint
from gcr import features as F
from gcr import tensor as T


class DegenerateEncoderError(ZeroDivisionError):
    pass


@dataclass
class SimilarityModel:
    input_shape: tuple
    hidden: tuple = (256, 128)
    embedding_dim: int = 32
    params: dict = field(default_factory=dict)
    features: str = "keypoints"

    @property
    def input_dim(self) -> int:
        return F.feature_dim(self.features, self.input_shape)

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden, self.embedding_dim]

    def copy(self) -> "SimilarityModel":
        return SimilarityModel(
            tuple(self.input_shape), tuple(self.hidden), self.embedding_dim,
            {k: v.copy() for k, v in self.params.items()}, self.features,
        )


def init_model(input_shape, hidden=(256, 128), embedding_dim=32, seed=0, features="keypoints") -> SimilarityModel:
    model = SimilarityModel(tuple(input_shape), tuple(hidden), embedding_dim, features=features)
    rng = np.random.default_rng(seed)
    sizes = model.layer_sizes
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = np.sqrt(6.0 / (n_in + n_out))
        model.params[f"enc.{i}.w"] = rng.uniform(-bound, bound, size=(n_in, n_out))
        model.params[f"enc.{i}.b"] = np.zeros(n_out)
    # a non-zero output bias keeps blank inputs (all-zero features) off the zero embedding
    model.params[f"enc.{len(sizes) - 2}.b"] = rng.uniform(-0.1, 0.1, size=sizes[-1])
    return model


def _inputs(model: SimilarityModel, obs) -> np.ndarray:
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape[1:] != tuple(model.input_shape):
        raise T.ShapeError(f"encode: observation shape {obs.shape[1:]} != model input {model.input_shape}")
    return F.featurize(model.features, obs, model.input_shape)


def embed(model: SimilarityModel, params: dict[str, T.Tensor], obs: np.ndarray) -> T.Tensor:
    """Differentiable forward pass on a batch ``(N, *input_shape)`` -> ``(N, d)``."""
    x = T.Tensor(_inputs(model, obs))
    n_layers = len(model.layer_sizes) - 1
    for i in range(n_layers):
        x = T.linear(x, params[f"enc.{i}.w"], params[f"enc.{i}.b"])
        if i < n_layers - 1:
            x = T.tanh(x)
    return x


def encode_batch(model: SimilarityModel, obs: np.ndarray) -> np.ndarray:
    x = _inputs(model, obs)
    n_layers = len(model.layer_sizes) - 1
    for i in range(n_layers):
        x = x @ model.params[f"enc.{i}.w"] + model.params[f"enc.{i}.b"]
        if i < n_layers - 1:
            x = np.tanh(x)
    return x


def encode(model: SimilarityModel, obs: np.ndarray) -> np.ndarray:
    obs = np.asarray(obs, dtype=np.float64)
    return encode_batch(model, obs[None])[0]


def cosine(e1: np.ndarray, e2: np.ndarray) -> np.ndarray:
    """Cosine along the last axis; symmetric and exactly 1 for identical inputs."""
    n1 = np.sum(e1 * e1, axis=-1)
    n2 = np.sum(e2 * e2, axis=-1)
    if np.any(n1 == 0) or np.any(n2 == 0):
        raise DegenerateEncoderError("zero-norm embedding")
    s = np.sum(e1 * e2, axis=-1) / np.sqrt(n1 * n2)
    return np.clip(s, -1.0, 1.0)


def similarity(model: SimilarityModel, s1: np.ndarray, s2: np.ndarray) -> float:
    e = encode_batch(model, np.stack([s1, s2]))
    return float(cosine(e[0], e[1]))


def potential_from_similarity(s):
    return (np.asarray(s, dtype=np.float64) + 1.0) / 2.0


def potential(model: SimilarityModel, s: np.ndarray, g: np.ndarray) -> float:
    return float(potential_from_similarity(similarity(model, s, g)))


class GoalSet:
    """Precomputed goal embeddings; potential of a state is its mean potential over the goals."""

    def __init__(self, model: SimilarityModel, goal_frames: np.ndarray):
        goal_frames = np.asarray(goal_frames, dtype=np.float64)
        if len(goal_frames) == 0:
            raise ValueError("GoalSet needs at least one goal frame")
        self.model = model
        self.embeddings = encode_batch(model, goal_frames)

    def potentials(self, frames: np.ndarray) -> np.ndarray:
        e = encode_batch(self.model, frames)
        sims = cosine(e[:, None, :], self.embeddings[None, :, :])
        return potential_from_similarity(sims.mean(axis=1))


def to_tensors(model: SimilarityModel) -> dict[str, np.ndarray]:
    meta = np.array([*model.input_shape], dtype=np.float64)
    out = {"meta.input_shape": meta,
           "meta.hidden": np.array(model.hidden, dtype=np.float64),
           "meta.embedding_dim": np.array([model.embedding_dim], dtype=np.float64),
           "meta.features": np.array([F.FEATURE_KINDS.index(model.features)], dtype=np.float64)}
    out.update(model.params)
    return out


def from_tensors(tensors: dict[str, np.ndarray]) -> SimilarityModel:
    shape = tuple(int(x) for x in tensors["meta.input_shape"])
    hidden = tuple(int(x) for x in tensors["meta.hidden"])
    dim = int(tensors["meta.embedding_dim"][0])
    kind = F.FEATURE_KINDS[int(tensors["meta.features"][0])]
    params = {k: v for k, v in tensors.items() if not k.startswith("meta.")}
    return SimilarityModel(shape, hidden, dim, params, kind)


def save_model(path, model: SimilarityModel) -> None:
    checkpoint.save(path, to_tensors(model))


def load_model(path) -> SimilarityModel:
    return from_tensors(checkpoint.load(path))


def dump_embeddings(path: str | os.PathLike, model: SimilarityModel, episodes) -> None:
    """CSV of per-frame embeddings: episode_id, frame_index, embodiment_tag, e_0..e_{d-1}."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["episode_id", "frame_index", "embodiment_tag",
                    *[f"e_{i}" for i in range(model.embedding_dim)]])
        for ep in episodes:
            emb = encode_batch(model, ep.frames)
            for t, row in enumerate(emb):
                w.writerow([ep.episode_id, t, ep.embodiment, *[repr(float(x)) for x in row]])


def read_embeddings(path) -> tuple[list[tuple], np.ndarray]:
    keys, rows = [], []
    with open(path, newline="") as f:
        r = csv.reader(f)
        next(r)
        for rec in r:
            keys.append((rec[0], int(rec[1]), rec[2]))
            rows.append([float(x) for x in rec[3:]])
    return keys, np.array(rows, dtype=np.float64)
