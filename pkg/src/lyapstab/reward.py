"""Turn a landscape V into a per-step reward for the policy learner.

    r(s, s') = g(V(s)) + beta2 * min(0, (V(s) - V(s')) / dt)

``g`` is a decreasing convex scaling (so lower landscape values pay more)
and the second term only ever penalises steps that climb the landscape.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lyapunov import evaluate

G_KINDS = ("neg_log", "neg_log_gauss")


class RewardConfigError(ValueError):
    pass


@dataclass
class RewardConfig:
    g: str = "neg_log_gauss"
    k: float = 1.0
    beta2: float = 0.1
    v_floor: float = 1e-6

    def __post_init__(self):
        if self.g not in G_KINDS:
            raise RewardConfigError(f"unknown g kind {self.g!r}; choose from {G_KINDS}")
        if self.k <= 0 or self.beta2 <= 0 or self.v_floor <= 0:
            raise RewardConfigError("k, beta2 and v_floor must be positive")


def default_reward_config(env: str) -> RewardConfig:
    """The same scaling for every environment: neg_log_gauss with k=1, beta2=0.1."""
    return RewardConfig()


def scale_g(cfg: RewardConfig, x):
    """g(max(x, v_floor)). Works elementwise on arrays."""
    x = np.maximum(np.asarray(x, dtype=np.float64), cfg.v_floor)
    if cfg.g == "neg_log":
        out = -np.log(x)
    else:
        # -log(1 - exp(-k x^2)) written with expm1 so tiny x keeps its precision
        out = -np.log(-np.expm1(-cfg.k * x * x))
    return float(out) if out.ndim == 0 else out


def descent_penalty(v_s, v_s2, dt: float, beta2: float):
    """beta2 * min(0, (V(s) - V(s')) / dt); never positive."""
    return beta2 * np.minimum(0.0, (np.asarray(v_s) - np.asarray(v_s2)) / dt)


def reward_from_values(v_s, v_s2, cfg: RewardConfig, dt: float):
    if dt <= 0:
        raise ValueError("dt must be positive")
    r = scale_g(cfg, v_s) + descent_penalty(v_s, v_s2, dt, cfg.beta2)
    return float(r) if np.ndim(r) == 0 else r


def proxy_reward(V, s, s2, cfg: RewardConfig, dt: float):
    """Landscape reward for one transition or a batch ``(B, n)`` of them."""
    return reward_from_values(evaluate(V, np.asarray(s, dtype=np.float64)),
                              evaluate(V, np.asarray(s2, dtype=np.float64)), cfg, dt)


def out_of_landscape(V, s) -> np.ndarray:
    """Mask of states where V is non-positive (the clamp decides the reward there)."""
    return np.asarray(evaluate(V, np.asarray(s, dtype=np.float64))) <= 0.0


class ProxyRewardSource:
    """Reward source for the policy learner built on a landscape ``V``."""

    name = "proxy"

    def __init__(self, V, cfg: RewardConfig, dt: float):
        self.V, self.cfg, self.dt = V, cfg, float(dt)

    def __call__(self, buf, rng=None):
        T, N = buf.shape
        s, s2 = buf.flat("obs"), buf.flat("next_obs")
        v_s = np.asarray(evaluate(self.V, s), dtype=np.float64)
        v_s2 = np.asarray(evaluate(self.V, s2), dtype=np.float64)
        base = scale_g(self.cfg, v_s)
        pen = descent_penalty(v_s, v_s2, self.dt, self.cfg.beta2)
        stats = {"out_of_landscape": int(np.sum(v_s <= 0.0)), "mean_g": float(np.mean(base)),
                 "mean_penalty": float(np.mean(pen))}
        return (base + pen).reshape(T, N), stats
