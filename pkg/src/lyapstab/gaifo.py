"""Adversarial imitation from observation: a discriminator over (s, s') pairs
whose belief that a transition is expert-like becomes the learner's reward.

Shares the PPO learner, rollout code and curve schema with the landscape
method so the two can be compared column for column.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .expert import TransitionBatch, transitions
from .numkit import AdamState, MlpParams, adam_step, init_mlp, mlp_forward, mlp_gradient
from .policyopt import GaussianPolicy, PpoConfig, ValueFn, train_policy

P_MIN, P_MAX = 1e-6, 1.0 - 1e-6
REWARD_FORMS = ("neg_log_one_minus", "logit")


@dataclass
class GaifoConfig:
    hidden: tuple = (64, 64)
    lr: float = 3e-4
    disc_epochs: int = 1
    batch_size: int = 256
    reward_form: str = "neg_log_one_minus"

    def __post_init__(self):
        if self.reward_form not in REWARD_FORMS:
            raise ValueError(f"unknown reward form {self.reward_form!r}; choose from {REWARD_FORMS}")
        self.hidden = tuple(int(h) for h in self.hidden)


@dataclass
class Discriminator:
    params: MlpParams

    def __post_init__(self):
        if self.params.n_out != 1 or self.params.n_in % 2:
            raise ValueError("discriminator maps concatenated (s, s') to one logit")

    @property
    def state_dim(self) -> int:
        return self.params.n_in // 2

    def logits(self, s, s2):
        x = np.concatenate([np.atleast_2d(s), np.atleast_2d(s2)], axis=1)
        return mlp_forward(self.params, x)[:, 0]

    def prob(self, s, s2):
        """Clamped probability that each transition came from the expert."""
        return np.clip(_sigmoid(self.logits(s, s2)), P_MIN, P_MAX)


def make_discriminator(state_dim: int, rng: np.random.Generator, hidden=(64, 64)) -> Discriminator:
    return Discriminator(init_mlp([2 * state_dim, *hidden, 1], rng))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def disc_loss(D, expert: TransitionBatch, agent: TransitionBatch) -> float:
    """``-mean log D(expert) - mean log(1 - D(agent))``; ``D`` may be a Discriminator or a
    callable ``(s, s2) -> probabilities``."""
    if len(expert) == 0 or len(agent) == 0:
        raise ValueError("both batches must be non-empty")
    prob = D.prob if isinstance(D, Discriminator) else (lambda s, s2: np.clip(D(s, s2), P_MIN, P_MAX))
    pe, pa = prob(expert.s, expert.s2), prob(agent.s, agent.s2)
    return float(-np.mean(np.log(pe)) - np.mean(np.log(1.0 - pa)))


def disc_loss_grad(D: Discriminator, expert: TransitionBatch, agent: TransitionBatch):
    """Loss and parameter gradient (zero wherever the probability clamp is active)."""
    xe = np.concatenate([expert.s, expert.s2], axis=1)
    xa = np.concatenate([agent.s, agent.s2], axis=1)
    X = np.concatenate([xe, xa])
    p_raw = _sigmoid(mlp_forward(D.params, X)[:, 0])
    p = np.clip(p_raw, P_MIN, P_MAX)
    ne, na = len(xe), len(xa)
    pe, pa = p[:ne], p[ne:]
    loss = float(-np.mean(np.log(pe)) - np.mean(np.log(1.0 - pa)))
    inside = (p_raw > P_MIN) & (p_raw < P_MAX)
    up = np.empty(len(X))
    up[:ne] = (pe - 1.0) / ne  # d/dlogit of -log(sigmoid)
    up[ne:] = pa / na  # d/dlogit of -log(1 - sigmoid)
    up *= inside
    grads, _ = mlp_gradient(D.params, X, up[:, None])
    return loss, grads


def gaifo_reward(D: Discriminator, s, s2, form: str = "neg_log_one_minus"):
    """``-log(1 - D(s, s'))`` (or the logit ``log D - log(1 - D)``) with clamped D."""
    single = np.ndim(s) == 1
    p = D.prob(s, s2)
    r = -np.log(1.0 - p) if form == "neg_log_one_minus" else np.log(p) - np.log(1.0 - p)
    return float(r[0]) if single else r


def disc_accuracy(D: Discriminator, expert: TransitionBatch, agent: TransitionBatch) -> float:
    pe, pa = D.prob(expert.s, expert.s2), D.prob(agent.s, agent.s2)
    return float((np.sum(pe > 0.5) + np.sum(pa < 0.5)) / (len(pe) + len(pa)))


def disc_update(D: Discriminator, opt: AdamState, expert: TransitionBatch, agent: TransitionBatch,
                cfg: GaifoConfig, rng: np.random.Generator):
    """``cfg.disc_epochs`` passes over the agent batch, each minibatch paired with an
    equally sized expert sample. Returns ``(D, opt, mean loss)``."""
    params, losses = D.params, []
    n = len(agent)
    for _ in range(cfg.disc_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            e_idx = rng.integers(0, len(expert), size=len(idx))
            loss, grads = disc_loss_grad(Discriminator(params), expert.subset(e_idx), agent.subset(idx))
            params, opt = adam_step(params, grads, opt, cfg.lr)
            losses.append(loss)
    return Discriminator(params), opt, float(np.mean(losses))


class GaifoRewardSource:
    """Refits the discriminator on each fresh rollout batch, then scores it."""

    name = "gaifo"

    def __init__(self, D: Discriminator, expert: TransitionBatch, cfg: GaifoConfig):
        self.D, self.expert, self.cfg = D, expert, cfg
        self.opt = AdamState.fresh(D.params)

    def __call__(self, buf, rng):
        T, N = buf.shape
        agent = TransitionBatch(buf.flat("obs"), buf.flat("next_obs"), self.expert.dt)
        self.D, self.opt, loss = disc_update(self.D, self.opt, self.expert, agent, self.cfg, rng)
        r = gaifo_reward(self.D, agent.s, agent.s2, self.cfg.reward_form)
        return r.reshape(T, N), {"disc_loss": loss, "disc_acc": disc_accuracy(self.D, self.expert, agent)}


def train_gaifo(spec, dataset, policy: GaussianPolicy, valuefn: ValueFn, D: Discriminator, cfg: PpoConfig,
                iterations: int, gcfg: GaifoConfig | None = None, seed: int = 0, baselines=None, callback=None):
    """PPO against the discriminator reward. Returns ``(policy, valuefn, curve, D)``."""
    gcfg = gcfg or GaifoConfig()
    expert = dataset if isinstance(dataset, TransitionBatch) else transitions(dataset)
    source = GaifoRewardSource(D, expert, gcfg)
    policy, valuefn, curve = train_policy(spec, source, policy, valuefn, cfg, iterations, seed=seed,
                                          baselines=baselines, callback=callback)
    return policy, valuefn, curve, source.D


def config_dict(cfg: GaifoConfig) -> dict:
    d = asdict(cfg)
    d["hidden"] = list(d["hidden"])
    return d
