"""Dense rewards from a learned potential: R' = R + alpha * phi(s') - beta * phi(s)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MODES = ("delta", "absolute", "ng_potential", "custom")


@dataclass(frozen=True)
class ShapingConfig:
    mode: str = "delta"
    gamma: float = 0.98
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown shaping mode {self.mode!r}; expected one of {MODES}")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must be in (0, 1), got {self.gamma}")
        # presets pin their coefficients regardless of what was passed
        if self.mode == "delta":
            object.__setattr__(self, "alpha", 1.0)
            object.__setattr__(self, "beta", 1.0)
        elif self.mode == "absolute":
            object.__setattr__(self, "alpha", 1.0)
            object.__setattr__(self, "beta", 0.0)
        elif self.mode == "ng_potential":
            object.__setattr__(self, "alpha", self.gamma)
            object.__setattr__(self, "beta", 1.0)
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")


def shaping_term(cfg: ShapingConfig, phi_s, phi_s_next):
    return cfg.alpha * np.asarray(phi_s_next) - cfg.beta * np.asarray(phi_s)


def shaped_reward(cfg: ShapingConfig, sparse_r, phi_s, phi_s_next):
    out = np.asarray(sparse_r, dtype=np.float64) + shaping_term(cfg, phi_s, phi_s_next)
    return float(out) if out.ndim == 0 else out


def shaping_bias(cfg: ShapingConfig, phi_s_next):
    """Gap between the plain potential difference and the discounted form, ``(1 - gamma) phi(s')``."""
    if cfg.mode != "delta":
        raise ValueError(f"shaping_bias is defined for mode 'delta', not {cfg.mode!r}")
    out = (1.0 - cfg.gamma) * np.asarray(phi_s_next, dtype=np.float64)
    return float(out) if out.ndim == 0 else out
