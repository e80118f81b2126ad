"""Lyapunov-like proxy landscapes learned from expert state transitions.

The learned landscape is trained so that it vanishes at the origin, is
non-negative on demonstrated states, and decreases at a fixed rate ``c``
along every demonstrated step. The Lie derivative is the finite difference
``(V(s') - V(s)) / dt`` with ``V(s')`` held constant for gradients.
Two baselines live here too: a fixed quadratic bowl and a sign-only
"Lyapunov risk" objective that ignores the descent rate.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numkit
from .expert import TransitionBatch, transitions
from .numkit import AdamState, MlpParams, adam_step, init_mlp, mlp_forward, mlp_gradient

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class ProxyTrainConfig:
    c: float = 1.0
    beta1: float = 0.001
    lr: float = 1e-3
    epochs: int = 8000
    batch_size: int = 256
    seed: int = 0
    hidden: tuple = (64, 64)
    loss: str = "llpm"  # or "risk"
    cosine_decay: bool = True
    # growth floor V(x) >= margin * (sqrt(|x|^2 + r^2) - r) on probe states drawn from
    # margin_box times the data's extent (see train_proxy's sampler)
    margin: float = 0.5
    margin_radius: float = 0.1
    margin_samples: int = 256
    margin_box: float = 5.0

    def __post_init__(self):
        if self.c <= 0 or self.beta1 <= 0:
            raise ConfigError("c and beta1 must be positive")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("epochs, batch_size and lr must be positive")
        if self.loss not in ("llpm", "risk"):
            raise ConfigError(f"unknown proxy loss {self.loss!r}")
        if self.margin < 0 or self.margin_samples < 0:
            raise ConfigError("margin and margin_samples must be >= 0")
        if self.margin_box <= 0 or self.margin_radius <= 0:
            raise ConfigError("margin_box and margin_radius must be positive")
        self.hidden = tuple(int(h) for h in self.hidden)


@dataclass
class ProxyModel:
    params: MlpParams
    env: str = ""
    config: dict = field(default_factory=dict)
    report: dict = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return self.params.n_in

    def value(self, x) -> np.ndarray:
        """V at a batch of residual states ``(B, n)`` -> ``(B,)``; scalar for a single state."""
        out = mlp_forward(self.params, x)
        return out[..., 0] if out.ndim == 2 else float(out[0])

    def save(self, path) -> None:
        numkit.save_params(self.params, path, extra={"env": self.env})
        sidecar = Path(path).with_suffix(".meta.json")
        sidecar.write_text(json.dumps({"config": self.config, "report": self.report}, indent=2))

    @classmethod
    def load(cls, path) -> "ProxyModel":
        d = json.loads(Path(path).read_text())
        sidecar = Path(path).with_suffix(".meta.json")
        meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
        return cls(numkit.params_from_dict(d), d.get("env", ""), meta.get("config", {}), meta.get("report", {}))


@dataclass
class QuadraticProxy:
    """``V(x) = sum_i w_i x_i^2`` in residual coordinates."""

    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 1 or np.any(self.weights <= 0):
            raise ConfigError("quadratic proxy weights must all be positive")

    @property
    def input_dim(self) -> int:
        return len(self.weights)

    def value(self, x):
        x = np.asarray(x, dtype=np.float64)
        v = (x**2) @ self.weights
        return float(v) if np.ndim(v) == 0 else v


def quadratic_proxy(weights) -> QuadraticProxy:
    return QuadraticProxy(weights)


def evaluate(V, x):
    """Landscape value for anything usable as a proxy: a model with ``.value`` or a plain callable."""
    if hasattr(V, "value"):
        return V.value(x)
    return V(x)


def _values(V, X):
    return np.asarray(evaluate(V, np.asarray(X, dtype=np.float64)), dtype=np.float64).reshape(len(X))


def finite_diff_lie(V, s, s2, dt: float):
    """``(V(s2) - V(s)) / dt`` for single states or batches."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    s = np.asarray(s, dtype=np.float64)
    if s.ndim == 1:
        return (float(evaluate(V, np.asarray(s2, dtype=np.float64))) - float(evaluate(V, s))) / dt
    return (_values(V, s2) - _values(V, s)) / dt


def lie_training_grad(model: ProxyModel, s, s2, dt: float):
    """Parameter gradient of the training-mode Lie term; ``V(s2)`` contributes nothing."""
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    up = np.full((len(s), 1), -1.0 / dt)
    grads, _ = mlp_gradient(model.params, s, up)
    return grads


def _origin(batch: TransitionBatch):
    return np.zeros((1, batch.s.shape[1]))


def loss_terms(V, batch: TransitionBatch, cfg: ProxyTrainConfig, kind: str | None = None) -> dict:
    """Per-term decomposition; ``total`` is the minimised objective."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    kind = kind or cfg.loss
    v0 = float(_values(V, _origin(batch))[0])
    vs = _values(V, batch.s)
    lie = (_values(V, batch.s2) - vs) / batch.dt
    anchor = v0**2
    hinge = float(np.mean(np.maximum(0.0, -vs)))
    if kind == "llpm":
        rate = float(np.mean(cfg.beta1 * (cfg.c + lie) ** 2))
    else:
        rate = float(np.mean(np.maximum(0.0, lie)))
    return {"anchor": anchor, "positivity": hinge, "rate": rate, "total": anchor + hinge + rate,
            "neg_lie_frac": float(np.mean(lie < 0)), "mean_lie": float(np.mean(lie))}


def llpm_loss(V, batch: TransitionBatch, cfg: ProxyTrainConfig) -> float:
    """Anchor + positivity hinge + squared deviation of the Lie derivative from ``-c``."""
    return loss_terms(V, batch, cfg, "llpm")["total"]


def lyapunov_risk_loss(V, batch: TransitionBatch, cfg: ProxyTrainConfig | None = None) -> float:
    """Sign-only variant: hinge on ``-V(s)`` and on the Lie derivative, plus the anchor."""
    return loss_terms(V, batch, cfg or ProxyTrainConfig(), "risk")["total"]


def loss_and_grad(params: MlpParams, batch: TransitionBatch, cfg: ProxyTrainConfig):
    """Objective and its gradient w.r.t. the network parameters (``V(s')`` frozen)."""
    n = len(batch)
    X = np.concatenate([_origin(batch), batch.s])
    out = mlp_forward(params, X)[:, 0]
    v0, vs = out[0], out[1:]
    vs2 = mlp_forward(params, batch.s2)[:, 0]
    lie = (vs2 - vs) / batch.dt
    up = np.empty_like(out)
    up[0] = 2.0 * v0
    hinge_grad = -(vs < 0).astype(np.float64) / n
    if cfg.loss == "llpm":
        resid = cfg.c + lie
        loss = v0**2 + np.mean(np.maximum(0.0, -vs)) + cfg.beta1 * np.mean(resid**2)
        up[1:] = hinge_grad + cfg.beta1 * 2.0 * resid * (-1.0 / batch.dt) / n
    else:
        loss = v0**2 + np.mean(np.maximum(0.0, -vs)) + np.mean(np.maximum(0.0, lie))
        up[1:] = hinge_grad + (lie > 0).astype(np.float64) * (-1.0 / batch.dt) / n
    grads, _ = mlp_gradient(params, X, up[:, None])
    return float(loss), grads


def growth_floor(X, margin: float, radius: float):
    """``margin * (sqrt(|x|^2 + r^2) - r)``: quadratic near the origin, linear far out."""
    r2 = np.sum(np.asarray(X, dtype=np.float64) ** 2, axis=-1)
    return margin * (np.sqrt(r2 + radius * radius) - radius)


def margin_loss_and_grad(params: MlpParams, X, margin: float, radius: float = 0.1):
    """``mean(max(0, floor(x) - V(x)))`` over probe states and its parameter gradient.

    Keeps the landscape growing away from the origin where there is no data,
    so unexplored regions cannot look like the goal.
    """
    X = np.asarray(X, dtype=np.float64)
    v = mlp_forward(params, X)[:, 0]
    gap = growth_floor(X, margin, radius) - v
    active = gap > 0
    up = -active.astype(np.float64)[:, None] / len(X)
    grads, _ = mlp_gradient(params, X, up)
    return float(np.mean(np.where(active, gap, 0.0))), grads


def probe_box(batch: TransitionBatch, scale: float) -> np.ndarray:
    """Per-dimension half-width of the probe box: ``scale`` times the largest demonstrated magnitude."""
    half = scale * np.maximum(np.abs(batch.s).max(0), np.abs(batch.s2).max(0))
    return np.where(half > 0, half, scale)


def train_proxy(dataset, cfg: ProxyTrainConfig | None = None, env: str = "", sampler=None) -> ProxyModel:
    """Minibatch Adam over all expert transitions for ``cfg.epochs`` epochs.

    ``sampler(rng, n, half)`` draws the growth-floor probes; by default they are
    uniform in the box ``[-half, half]``.
    """
    cfg = cfg or ProxyTrainConfig()
    batch = dataset if isinstance(dataset, TransitionBatch) else transitions(dataset)
    if len(batch) == 0:
        raise TrainingError("dataset yields no transitions")
    if not env and not isinstance(dataset, TransitionBatch):
        env = dataset[0].env
    rng = np.random.default_rng(cfg.seed)
    params = init_mlp([batch.s.shape[1], *cfg.hidden, 1], rng)
    opt = AdamState.fresh(params)
    n = len(batch)
    total_steps = cfg.epochs * -(-n // cfg.batch_size)
    half = probe_box(batch, cfg.margin_box)
    if sampler is None:
        def sampler(r, m, h):
            return r.uniform(-1.0, 1.0, (m, len(h))) * h
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            mb = batch.subset(order[start:start + cfg.batch_size])
            loss, grads = loss_and_grad(params, mb, cfg)
            if cfg.margin_samples:
                X = sampler(rng, cfg.margin_samples, half)
                m_loss, m_grads = margin_loss_and_grad(params, X, cfg.margin, cfg.margin_radius)
                loss, grads = loss + m_loss, numkit.add_grads(grads, m_grads)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite proxy loss at epoch {epoch}")
            lr = cfg.lr
            if cfg.cosine_decay:
                lr *= 0.5 * (1.0 + np.cos(np.pi * opt.step / total_steps))
            params, opt = adam_step(params, grads, opt, lr)
        if epoch % 500 == 0:
            log.debug("proxy epoch %d loss %.5f", epoch, loss)
    model = ProxyModel(params, env, asdict(cfg))
    terms = loss_terms(model, batch, cfg)
    model.report = {
        "final_loss": terms["total"],
        "terms": {k: terms[k] for k in ("anchor", "positivity", "rate")},
        "neg_lie_fraction": terms["neg_lie_frac"],
        "mean_lie": terms["mean_lie"],
        "v_origin": float(model.value(np.zeros(batch.s.shape[1]))),
        "n_transitions": n,
    }
    if cfg.margin_samples:
        probe = sampler(np.random.default_rng(cfg.seed + 1), 4096, half)
        model.report["margin_violation"] = float(np.mean(
            model.value(probe) < growth_floor(probe, cfg.margin, cfg.margin_radius)))
    return model
