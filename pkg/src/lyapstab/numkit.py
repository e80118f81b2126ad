"""Dense MLPs with hand-written backprop, and Adam.

Every learned model in the package (proxy landscape, policy mean, value
function, discriminator) is an :class:`MlpParams`. Forward and backward
passes accept either a single input vector or a batch ``(B, n_in)``; batch
gradients are summed over rows.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CHECKPOINT_FORMAT = "lyapstab-mlp-v1"


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


@dataclass
class MlpParams:
    """tanh hidden layers, identity output. ``layers[k] = (W, b)`` with W of shape (out, in)."""

    layers: list[tuple[np.ndarray, np.ndarray]]

    def __post_init__(self):
        for k, (W, b) in enumerate(self.layers):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ShapeError(f"layer {k}: weight {W.shape} / bias {b.shape} mismatch")
            if k > 0 and W.shape[1] != self.layers[k - 1][0].shape[0]:
                raise ShapeError(
                    f"layer {k} expects {W.shape[1]} inputs, layer {k - 1} gives "
                    f"{self.layers[k - 1][0].shape[0]}"
                )

    @property
    def sizes(self) -> list[int]:
        return [self.layers[0][0].shape[1]] + [W.shape[0] for W, _ in self.layers]

    @property
    def n_in(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def n_out(self) -> int:
        return self.layers[-1][0].shape[0]

    def copy(self) -> "MlpParams":
        return MlpParams([(W.copy(), b.copy()) for W, b in self.layers])

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in self.layers])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(W)) and np.all(np.isfinite(b)) for W, b in self.layers)


def init_mlp(sizes, rng: np.random.Generator, out_scale: float = 1.0) -> MlpParams:
    """Glorot-uniform weights, zero biases. ``out_scale`` shrinks the last layer."""
    if len(sizes) < 2:
        raise ShapeError("need at least input and output sizes")
    layers = []
    for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        lim = np.sqrt(6.0 / (n_in + n_out))
        W = rng.uniform(-lim, lim, size=(n_out, n_in))
        if k == len(sizes) - 2:
            W *= out_scale
        layers.append((W, np.zeros(n_out)))
    return MlpParams(layers)


def zeros_like(params: MlpParams) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(np.zeros_like(W), np.zeros_like(b)) for W, b in params.layers]


def _as_batch(params: MlpParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != params.n_in:
        raise ShapeError(f"input shape {x.shape} does not match network input size {params.n_in}")
    return X, single


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    X, single = _as_batch(params, x)
    h = X
    last = len(params.layers) - 1
    for k, (W, b) in enumerate(params.layers):
        h = h @ W.T + b
        if k < last:
            h = np.tanh(h)
    return h[0] if single else h


def mlp_gradient(params: MlpParams, x, upstream):
    """Gradients of ``sum(upstream * mlp_forward(params, x))``.

    Returns ``(grads, dx)`` where ``grads`` mirrors ``params.layers`` and
    ``dx`` has the shape of ``x``.
    """
    X, single = _as_batch(params, x)
    G = np.asarray(upstream, dtype=np.float64)
    G = G[None, :] if G.ndim == 1 else G
    if G.shape != (X.shape[0], params.n_out):
        raise ShapeError(f"upstream shape {np.shape(upstream)} does not match output {params.n_out}")

    acts = [X]
    h = X
    last = len(params.layers) - 1
    for k, (W, b) in enumerate(params.layers):
        h = h @ W.T + b
        if k < last:
            h = np.tanh(h)
        acts.append(h)

    grads = [None] * len(params.layers)
    delta = G
    for k in range(last, -1, -1):
        W, _ = params.layers[k]
        grads[k] = (delta.T @ acts[k], delta.sum(axis=0))
        delta = delta @ W
        if k > 0:
            delta = delta * (1.0 - acts[k] ** 2)
    return grads, (delta[0] if single else delta)


def add_grads(a, b):
    return [(Wa + Wb, ba + bb) for (Wa, ba), (Wb, bb) in zip(a, b)]


def scale_grads(g, s: float):
    return [(W * s, b * s) for W, b in g]


def grad_norm(g) -> float:
    return float(np.sqrt(sum(np.sum(W * W) + np.sum(b * b) for W, b in g)))


def clip_grads(g, max_norm: float):
    n = grad_norm(g)
    if n > max_norm > 0:
        return scale_grads(g, max_norm / n)
    return g


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta_m: float = 0.9
    beta_v: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: MlpParams) -> "AdamState":
        return cls(m=zeros_like(params), v=zeros_like(params))

    @classmethod
    def fresh_array(cls, x: np.ndarray) -> "AdamState":
        return cls(m=np.zeros_like(x), v=np.zeros_like(x))


def _moments(state: AdamState, p, g, m, v, t):
    m = state.beta_m * m + (1.0 - state.beta_m) * g
    v = state.beta_v * v + (1.0 - state.beta_v) * g * g
    step = (m / (1.0 - state.beta_m**t)) / (np.sqrt(v / (1.0 - state.beta_v**t)) + state.eps)
    return step, m, v


def adam_step(params: MlpParams, grads, state: AdamState, lr: float):
    """One bias-corrected Adam update. Returns new ``(params, state)``; inputs are not mutated."""
    if len(grads) != len(params.layers):
        raise ShapeError("gradient list length does not match layer count")
    for k, (gW, gb) in enumerate(grads):
        W, b = params.layers[k]
        if gW.shape != W.shape or gb.shape != b.shape:
            raise ShapeError(f"layer {k}: gradient shape mismatch")
        if not (np.all(np.isfinite(gW)) and np.all(np.isfinite(gb))):
            raise NumericError(f"non-finite gradient in layer {k}")

    t = state.step + 1
    new_layers, new_m, new_v = [], [], []
    for (W, b), (gW, gb), (mW, mb), (vW, vb) in zip(params.layers, grads, state.m, state.v):
        out = []
        for p, g, m, v in ((W, gW, mW, vW), (b, gb, mb, vb)):
            step, m, v = _moments(state, p, g, m, v, t)
            out.append((p - lr * step, m, v))
        new_layers.append((out[0][0], out[1][0]))
        new_m.append((out[0][1], out[1][1]))
        new_v.append((out[0][2], out[1][2]))
    new_state = AdamState(new_m, new_v, t, state.beta_m, state.beta_v, state.eps)
    return MlpParams(new_layers), new_state


def adam_array_step(x: np.ndarray, g: np.ndarray, state: AdamState, lr: float):
    """Adam on a plain array (e.g. a policy's log-std vector)."""
    if g.shape != x.shape:
        raise ShapeError("gradient shape mismatch")
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite gradient")
    t = state.step + 1
    step, m, v = _moments(state, x, g, state.m, state.v, t)
    return x - lr * step, AdamState(m, v, t, state.beta_m, state.beta_v, state.eps)


# -- checkpoints ---------------------------------------------------------


def params_to_dict(params: MlpParams) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "sizes": params.sizes,
        "activation": "tanh",
        "layers": [{"W": W.tolist(), "b": b.tolist()} for W, b in params.layers],
    }


def params_from_dict(d: dict) -> MlpParams:
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {d.get('format')!r}")
    layers = [(np.array(L["W"], dtype=np.float64), np.array(L["b"], dtype=np.float64)) for L in d["layers"]]
    params = MlpParams(layers)
    if params.sizes != list(d["sizes"]):
        raise ShapeError(f"header sizes {d['sizes']} disagree with stored layers {params.sizes}")
    return params


def save_params(params: MlpParams, path, extra: dict | None = None) -> None:
    d = params_to_dict(params)
    if extra:
        d.update(extra)
    Path(path).write_text(json.dumps(d))


def load_params(path) -> MlpParams:
    return params_from_dict(json.loads(Path(path).read_text()))
