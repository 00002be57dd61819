"""Fixed (parameter-free) input layers shared by the Q-network and the similarity encoder.

``keypoints`` is a spatial soft-argmax over each channel: the intensity-weighted
mean x and y in [-1, 1], the channel maximum and the mean intensity. It turns
"where is the arm relative to the block" into a difference of coordinates, which
small MLPs pick up far faster than from one-hot pixel maps. ``pixels`` keeps the
raw image, optionally average-pooled.
"""

from __future__ import annotations

import numpy as np

FEATURE_KINDS = ("keypoints", "pixels", "relational")
KEYPOINT_STATS = 4


def keypoints(obs) -> np.ndarray:
    """``(N, C, H, W)`` -> ``(N, 4C)`` as ``[cx, cy, max, mean]`` blocks; empty channels give zeros."""
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim != 4:
        raise ValueError(f"keypoints expects (N, C, H, W), got shape {obs.shape}")
    _, _, h, w = obs.shape
    ys = np.linspace(-1.0, 1.0, h)
    xs = np.linspace(-1.0, 1.0, w)
    mass = obs.sum(axis=(2, 3))
    safe = np.where(mass > 0, mass, 1.0)
    cx = obs.sum(axis=2) @ xs / safe
    cy = obs.sum(axis=3) @ ys / safe
    return np.concatenate([cx, cy, obs.max(axis=(2, 3)), mass / (h * w)], axis=1)


def relational(obs) -> np.ndarray:
    """Keypoints plus the centroid offsets between every pair of channels."""
    kp = keypoints(obs)
    c = kp.shape[1] // KEYPOINT_STATS
    cx, cy = kp[:, :c], kp[:, c:2 * c]
    i, j = np.triu_indices(c, k=1)
    return np.concatenate([kp, cx[:, j] - cx[:, i], cy[:, j] - cy[:, i]], axis=1)


def pool(obs, p: int) -> np.ndarray:
    """Average-pool the last two axes by ``p`` (sizes must divide)."""
    obs = np.asarray(obs, dtype=np.float64)
    if p == 1:
        return obs
    # strided slice sums are much faster than a multi-axis mean
    out = obs[..., 0::p, 0::p].copy()
    for i in range(p):
        for j in range(p):
            if i or j:
                out += obs[..., i::p, j::p]
    return out * (1.0 / (p * p))


def feature_dim(kind: str, obs_shape: tuple, p: int = 1) -> int:
    if kind == "keypoints":
        return obs_shape[0] * KEYPOINT_STATS
    if kind == "relational":
        c = obs_shape[0]
        return c * KEYPOINT_STATS + c * (c - 1)
    if kind == "pixels":
        if len(obs_shape) == 3 and p > 1:
            c, h, w = obs_shape
            return c * (h // p) * (w // p)
        return int(np.prod(obs_shape))
    raise ValueError(f"unknown feature kind {kind!r}; expected one of {FEATURE_KINDS}")


def featurize(kind: str, obs, obs_shape: tuple, p: int = 1) -> np.ndarray:
    """Batch of raw observations ``(N, *obs_shape)`` -> ``(N, feature_dim)``."""
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape[1:] != tuple(obs_shape):
        raise ValueError(f"observation shape {obs.shape[1:]} != expected {tuple(obs_shape)}")
    if kind == "keypoints":
        return keypoints(obs)
    if kind == "relational":
        return relational(obs)
    if kind == "pixels":
        if len(obs_shape) == 3 and p > 1:
            obs = pool(obs, p)
        return obs.reshape(len(obs), -1)
    raise ValueError(f"unknown feature kind {kind!r}; expected one of {FEATURE_KINDS}")
