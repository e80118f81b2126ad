"""PPO with a diagonal-Gaussian policy, written against numkit.

The policy acts on residual coordinates. Its mean network works in a
normalised action space ``z``; raw actions are ``offset + scale * z``,
clamped to the environment bounds. Log-probabilities are always those of
the unclamped ``z`` sample.

Rollouts run ``n_envs`` copies of the environment in lockstep. Rewards are
computed after collection by a *reward source* (landscape reward, GAIfO
discriminator, or the task reward itself), which lets adversarial sources
refit on the fresh batch first.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import envs, numkit
from .envs import EnvSpec
from .numkit import AdamState, MlpParams, adam_array_step, adam_step, clip_grads, init_mlp, mlp_forward, mlp_gradient

log = logging.getLogger(__name__)

EVAL_SEED_BASE = 1_000_000
CURVE_COLUMNS = ("iteration", "env_steps", "mean_eval_return", "normalized_score",
                 "policy_loss", "value_loss", "kl", "clip_frac")
_LOG_2PI = math.log(2.0 * math.pi)


class TrainingError(RuntimeError):
    pass


@dataclass
class PpoConfig:
    clip_eps: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    epochs: int = 10
    minibatch: int = 64
    steps_per_iter: int = 4096
    n_envs: int = 16
    policy_lr: float = 3e-4
    value_lr: float = 1e-3
    ent_coef: float = 0.0
    max_grad_norm: float = 0.5
    hidden: tuple = (64, 64)
    init_log_std: float = -0.5
    normalize_rewards: bool = True
    n_eval: int = 10
    eval_every: int = 1

    def __post_init__(self):
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must lie in (0, 1)")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0 <= self.gae_lambda <= 1:
            raise ValueError("gae_lambda must lie in [0, 1]")
        if self.steps_per_iter % self.n_envs:
            raise ValueError("steps_per_iter must be a multiple of n_envs")
        self.hidden = tuple(int(h) for h in self.hidden)


# -- models ---------------------------------------------------------------


@dataclass
class GaussianPolicy:
    mean_net: MlpParams
    log_std: np.ndarray
    action_low: np.ndarray
    action_high: np.ndarray
    offset: np.ndarray | None = None
    scale: np.ndarray | None = None

    def __post_init__(self):
        self.log_std = np.asarray(self.log_std, dtype=np.float64)
        self.action_low = np.asarray(self.action_low, dtype=np.float64)
        self.action_high = np.asarray(self.action_high, dtype=np.float64)
        m = self.mean_net.n_out
        self.offset = np.zeros(m) if self.offset is None else np.asarray(self.offset, dtype=np.float64)
        self.scale = np.ones(m) if self.scale is None else np.asarray(self.scale, dtype=np.float64)
        if self.log_std.shape != (m,) or not np.all(np.isfinite(self.log_std)):
            raise ValueError("log_std must be a finite vector with one entry per action dim")

    @property
    def obs_dim(self) -> int:
        return self.mean_net.n_in

    def mean_z(self, obs):
        return mlp_forward(self.mean_net, obs)

    def to_action(self, z):
        return np.clip(self.offset + self.scale * z, self.action_low, self.action_high)

    def act(self, obs):
        """Deterministic action (the mean)."""
        return self.to_action(self.mean_z(obs))

    def log_prob(self, obs, z):
        mu = self.mean_z(obs)
        return gaussian_log_prob(z, mu, self.log_std)

    def copy(self) -> "GaussianPolicy":
        return GaussianPolicy(self.mean_net.copy(), self.log_std.copy(), self.action_low, self.action_high,
                              self.offset.copy(), self.scale.copy())

    def to_dict(self) -> dict:
        d = numkit.params_to_dict(self.mean_net)
        d.update(log_std=self.log_std.tolist(), action_low=self.action_low.tolist(),
                 action_high=self.action_high.tolist(), offset=self.offset.tolist(), scale=self.scale.tolist())
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianPolicy":
        return cls(numkit.params_from_dict(d), np.array(d["log_std"]), np.array(d["action_low"]),
                   np.array(d["action_high"]), np.array(d["offset"]), np.array(d["scale"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "GaussianPolicy":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class ValueFn:
    params: MlpParams

    def __post_init__(self):
        if self.params.n_out != 1:
            raise ValueError("value function must have scalar output")

    def __call__(self, obs):
        obs = np.asarray(obs, dtype=np.float64)
        if obs.ndim > 2:
            return mlp_forward(self.params, obs.reshape(-1, obs.shape[-1]))[:, 0].reshape(obs.shape[:-1])
        return mlp_forward(self.params, obs)[..., 0]


def make_policy(spec: EnvSpec, rng: np.random.Generator, hidden=(64, 64), init_log_std=-0.5) -> GaussianPolicy:
    """Policy whose zero output maps to the middle of the action box and unit output to its edge."""
    net = init_mlp([spec.residual_dim, *hidden, spec.action_dim], rng, out_scale=0.01)
    lo, hi = spec.action_low, spec.action_high
    return GaussianPolicy(net, np.full(spec.action_dim, float(init_log_std)), lo, hi,
                          offset=0.5 * (lo + hi), scale=0.5 * (hi - lo))


def make_valuefn(spec: EnvSpec, rng: np.random.Generator, hidden=(64, 64)) -> ValueFn:
    return ValueFn(init_mlp([spec.residual_dim, *hidden, 1], rng))


def gaussian_log_prob(z, mu, log_std):
    z = np.asarray(z, dtype=np.float64)
    u = (z - mu) * np.exp(-log_std)
    return -0.5 * np.sum(u * u, axis=-1) - np.sum(log_std) - 0.5 * z.shape[-1] * _LOG_2PI


def sample_action(policy: GaussianPolicy, s, rng: np.random.Generator):
    """Sample ``(action, log_prob, z)``; action is clamped, ``log_prob`` is of the unclamped ``z``.

    Accepts a single observation or a batch.
    """
    s = np.asarray(s, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ValueError("non-finite observation")
    mu = policy.mean_z(s)
    z = mu + np.exp(policy.log_std) * rng.standard_normal(mu.shape)
    logp = gaussian_log_prob(z, mu, policy.log_std)
    return policy.to_action(z), logp, z


# -- rollouts -------------------------------------------------------------


@dataclass
class RolloutBuffer:
    """Time-major arrays ``(T, N, ...)`` from ``N`` lockstep environments.

    ``dones[t, i]`` marks that the episode in env ``i`` ended after step ``t``
    (either cut at the horizon, flagged in ``truncs``, or diverged).
    ``next_obs`` holds the true successor even when the env was reset.
    """

    obs: np.ndarray
    next_obs: np.ndarray
    raw: np.ndarray
    next_raw: np.ndarray
    z: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    truncs: np.ndarray
    last_values: np.ndarray
    rewards: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        T, N = self.obs.shape[:2]
        for name in ("next_obs", "raw", "next_raw", "z", "actions", "logp", "values", "dones", "truncs"):
            if getattr(self, name).shape[:2] != (T, N):
                raise ValueError(f"buffer field {name} misaligned")

    @property
    def shape(self):
        return self.obs.shape[:2]

    def __len__(self):
        T, N = self.shape
        return T * N

    def flat(self, name):
        a = getattr(self, name)
        return a.reshape(len(self), *a.shape[2:])


def collect_rollouts(spec: EnvSpec, policy: GaussianPolicy, valuefn: ValueFn, n_steps: int, n_envs: int,
                     rng: np.random.Generator, carry=None):
    """Run ``n_steps`` lockstep steps in ``n_envs`` environments.

    ``carry`` is the ``(raw states, step counters)`` pair from the previous
    call so episodes continue across iterations. Returns ``(buffer, carry)``.
    """
    if carry is None:
        X = spec.model.reset(rng, n_envs)
        t = np.zeros(n_envs, dtype=int)
    else:
        X, t = carry
    d, m, n = spec.residual_dim, spec.action_dim, spec.state_dim
    obs = np.empty((n_steps, n_envs, d))
    nobs = np.empty_like(obs)
    raw = np.empty((n_steps, n_envs, n))
    nraw = np.empty_like(raw)
    zs = np.empty((n_steps, n_envs, m))
    acts = np.empty_like(zs)
    logp = np.empty((n_steps, n_envs))
    vals = np.empty_like(logp)
    dones = np.zeros((n_steps, n_envs), dtype=bool)
    truncs = np.zeros_like(dones)
    n_div = 0
    for k in range(n_steps):
        o = spec.model.residual(X)
        a, lp, z = sample_action(policy, o, rng)
        X2 = envs.rk4_step(spec, X, a)
        t = t + 1
        div = spec.model.diverged(X2)
        trunc = (t >= spec.horizon) & ~div
        obs[k], raw[k], nraw[k], zs[k], acts[k], logp[k] = o, X, X2, z, a, lp
        nobs[k] = spec.model.residual(X2)
        vals[k] = valuefn(o)
        dones[k], truncs[k] = div | trunc, trunc
        n_div += int(div.sum())
        end = dones[k]
        if end.any():
            X2 = X2.copy()
            X2[end] = spec.model.reset(rng, int(end.sum()))
            t = np.where(end, 0, t)
        X = X2
    last_values = valuefn(spec.model.residual(X))
    buf = RolloutBuffer(obs, nobs, raw, nraw, zs, acts, logp, vals, dones, truncs, last_values,
                        meta={"diverged": n_div, "episodes": int(dones.sum())})
    return buf, (X, t)


class RewardNormalizer:
    """Scale rewards by a running standard deviation of the discounted return."""

    def __init__(self, gamma: float, eps: float = 1e-8):
        self.gamma, self.eps = gamma, eps
        self.count, self.mean, self.m2 = 0, 0.0, 0.0
        self.ret = None

    @property
    def std(self) -> float:
        return math.sqrt(self.m2 / self.count) if self.count > 1 else 1.0

    def _update(self, x):
        n_b = len(x)
        mean_b, var_b = float(np.mean(x)), float(np.var(x))
        delta = mean_b - self.mean
        tot = self.count + n_b
        self.mean += delta * n_b / tot
        self.m2 += var_b * n_b + delta**2 * self.count * n_b / tot
        self.count = tot

    def __call__(self, rewards, dones):
        T, N = rewards.shape
        if self.ret is None or len(self.ret) != N:
            self.ret = np.zeros(N)
        for k in range(T):
            self.ret = self.ret * self.gamma + rewards[k]
            self._update(self.ret)
            self.ret = np.where(dones[k], 0.0, self.ret)
        return rewards / (self.std + self.eps)

    def state_dict(self) -> dict:
        return {"count": self.count, "mean": self.mean, "m2": self.m2}


# -- PPO pieces -----------------------------------------------------------


def normalize_advantages(adv):
    adv = np.asarray(adv, dtype=np.float64)
    std = adv.std()
    return (adv - adv.mean()) / (std if std > 1e-12 else 1.0)


def gae_advantages(buffer: RolloutBuffer, cfg: PpoConfig, normalize: bool = True):
    """GAE over time-major arrays. Returns ``(advantages, returns)`` shaped ``(T, N)``.

    ``returns`` are computed from the raw advantages; only the advantages are
    normalised.
    """
    if buffer.rewards is None:
        raise ValueError("buffer has no rewards")
    r, v, done = buffer.rewards, buffer.values, buffer.dones.astype(np.float64)
    T = r.shape[0]
    adv = np.zeros_like(r)
    last = np.zeros(r.shape[1:])
    for k in range(T - 1, -1, -1):
        v_next = buffer.last_values if k == T - 1 else v[k + 1]
        delta = r[k] + cfg.gamma * v_next * (1.0 - done[k]) - v[k]
        last = delta + cfg.gamma * cfg.gae_lambda * (1.0 - done[k]) * last
        adv[k] = last
    returns = adv + v
    if normalize:
        adv = normalize_advantages(adv)
    return adv, returns


def clipped_surrogate(ratio, adv, eps):
    """Per-sample ``min(rho A, clip(rho, 1-eps, 1+eps) A)``."""
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv)


def surrogate_grad(policy: GaussianPolicy, obs, z, logp_old, adv, eps):
    """Loss ``-mean(surrogate)`` and its gradients ``(net grads, log-std grad)`` plus diagnostics."""
    mu = policy.mean_z(obs)
    sig = np.exp(policy.log_std)
    logp = gaussian_log_prob(z, mu, policy.log_std)
    ratio = np.exp(logp - logp_old)
    surr = clipped_surrogate(ratio, adv, eps)
    n = len(adv)
    # d surr / d logp is rho*A where the unclipped branch is the active min, else 0
    active = ratio * adv <= np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
    dlogp = -np.where(active, ratio * adv, 0.0) / n
    diff = (z - mu) / sig**2
    g_mu = dlogp[:, None] * diff
    g_logstd = np.sum(dlogp[:, None] * ((z - mu) ** 2 / sig**2 - 1.0), axis=0)
    grads, _ = mlp_gradient(policy.mean_net, obs, g_mu)
    stats = {"loss": float(-surr.mean()), "kl": float(np.mean((ratio - 1.0) - np.log(ratio))),
             "clip_frac": float(np.mean(np.abs(ratio - 1.0) > eps))}
    return grads, g_logstd, stats


def value_grad(valuefn: ValueFn, obs, targets):
    pred = valuefn(obs)
    err = pred - targets
    grads, _ = mlp_gradient(valuefn.params, obs, (2.0 * err / len(err))[:, None])
    return float(np.mean(err**2)), grads


@dataclass
class PpoState:
    """Optimiser state carried across iterations."""

    pi: AdamState
    log_std: AdamState
    vf: AdamState

    @classmethod
    def fresh(cls, policy: GaussianPolicy, valuefn: ValueFn) -> "PpoState":
        return cls(AdamState.fresh(policy.mean_net), AdamState.fresh_array(policy.log_std),
                   AdamState.fresh(valuefn.params))


def ppo_update(policy: GaussianPolicy, valuefn: ValueFn, buffer: RolloutBuffer, cfg: PpoConfig,
               rng: np.random.Generator, opt: PpoState | None = None):
    """Clipped-surrogate epochs over shuffled minibatches. Returns ``(policy, valuefn, stats, opt)``."""
    opt = opt or PpoState.fresh(policy, valuefn)
    adv, ret = gae_advantages(buffer, cfg)
    obs, z, logp_old = buffer.flat("obs"), buffer.flat("z"), buffer.flat("logp")
    adv, ret = adv.reshape(-1), ret.reshape(-1)
    policy, valuefn = policy.copy(), ValueFn(valuefn.params.copy())
    n = len(adv)
    pl, vl, kls, cfs = [], [], [], []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch):
            idx = order[start:start + cfg.minibatch]
            g_net, g_ls, st = surrogate_grad(policy, obs[idx], z[idx], logp_old[idx], adv[idx], cfg.clip_eps)
            if cfg.ent_coef:
                g_ls = g_ls - cfg.ent_coef * np.ones_like(g_ls)
            if not np.isfinite(st["loss"]):
                raise TrainingError("non-finite policy loss")
            g_net = clip_grads(g_net, cfg.max_grad_norm)
            policy.mean_net, opt.pi = adam_step(policy.mean_net, g_net, opt.pi, cfg.policy_lr)
            policy.log_std, opt.log_std = adam_array_step(policy.log_std, g_ls, opt.log_std, cfg.policy_lr)
            v_loss, g_v = value_grad(valuefn, obs[idx], ret[idx])
            if not np.isfinite(v_loss):
                raise TrainingError("non-finite value loss")
            valuefn.params, opt.vf = adam_step(valuefn.params, clip_grads(g_v, cfg.max_grad_norm), opt.vf,
                                               cfg.value_lr)
            pl.append(st["loss"])
            vl.append(v_loss)
            kls.append(st["kl"])
            cfs.append(st["clip_frac"])
    stats = {"policy_loss": float(np.mean(pl)), "value_loss": float(np.mean(vl)),
             "kl": float(np.mean(kls)), "clip_frac": float(np.mean(cfs))}
    return policy, valuefn, stats, opt


# -- evaluation -----------------------------------------------------------


def eval_seeds(n: int) -> list[int]:
    return [EVAL_SEED_BASE + i for i in range(n)]


def rollout_returns(spec: EnvSpec, act, seeds, horizon=None) -> np.ndarray:
    """Task-reward returns of a batched controller ``act(raw states, step) -> actions``.

    An episode that diverges stops there and is charged the worst per-step
    reward for each remaining step.
    """
    horizon = spec.horizon if horizon is None else horizon
    X = envs.reset_states(spec, seeds)
    ret = np.zeros(len(seeds))
    alive = np.ones(len(seeds), dtype=bool)
    worst = envs.min_step_reward(spec)
    for t in range(horizon):
        U = act(X, t)
        r = envs.task_reward(spec, X, U)
        ret += np.where(alive, r, 0.0)
        X = envs.rk4_step(spec, X, U)
        div = alive & spec.model.diverged(X)
        if div.any():
            ret[div] += worst * (horizon - t - 1)
            alive &= ~div
            X[div] = spec.model.equilibrium()
        if not alive.any():
            break
    return ret


def evaluate_policy(spec: EnvSpec, policy: GaussianPolicy, n_episodes: int = 10) -> np.ndarray:
    """Deterministic (mean-action) returns on the fixed evaluation seeds."""
    return rollout_returns(spec, lambda X, t: policy.act(spec.model.residual(X)), eval_seeds(n_episodes))


# -- training loop --------------------------------------------------------


def episode_end_rewards(r, buf: RolloutBuffer, valuefn: ValueFn, gamma: float):
    """Adjust rewards at episode ends before GAE (which treats every end as terminal).

    A horizon cut is not a real terminal, so ``gamma * V(s')`` is folded into
    the last reward. A diverged state is treated as absorbing: its reward
    keeps being collected, which adds ``r * gamma / (1 - gamma)``. Without
    this, a reward source that is negative somewhere would make diverging on
    purpose the best way to end an episode.
    """
    r = np.array(r, dtype=np.float64)
    if buf.truncs.any():
        r = r + gamma * np.where(buf.truncs, valuefn(buf.next_obs), 0.0)
    div = buf.dones & ~buf.truncs
    if div.any() and gamma < 1.0:
        r = r + np.where(div, r * gamma / (1.0 - gamma), 0.0)
    return r


class TaskReward:
    """Oracle reward source: the environment's own task reward."""

    name = "task"

    def __init__(self, spec: EnvSpec):
        self.spec = spec

    def __call__(self, buf: RolloutBuffer, rng=None):
        T, N = buf.shape
        r = envs.task_reward(self.spec, buf.flat("raw"), buf.flat("actions"))
        return r.reshape(T, N), {}


def train_policy(spec: EnvSpec, reward_source, policy: GaussianPolicy, valuefn: ValueFn, cfg: PpoConfig,
                 iterations: int, seed: int = 0, baselines=None, callback=None):
    """Collect, reward, GAE, update, evaluate; ``iterations`` times.

    ``reward_source(buffer, rng) -> (rewards (T, N), stats)``. ``baselines``
    is ``(R_random, R_expert)`` for the normalised score column.
    Returns ``(policy, valuefn, curve)`` with one dict per iteration.
    """
    from .harness import normalized_score  # deferred: harness imports this module

    rng = np.random.default_rng(seed)
    opt = PpoState.fresh(policy, valuefn)
    norm = RewardNormalizer(cfg.gamma)
    carry = None
    curve = []
    n_steps = cfg.steps_per_iter // cfg.n_envs
    for it in range(iterations):
        buf, carry = collect_rollouts(spec, policy, valuefn, n_steps, cfg.n_envs, rng, carry)
        raw_r, rstats = reward_source(buf, rng)
        raw_r = np.asarray(raw_r, dtype=np.float64)
        if not np.all(np.isfinite(raw_r)):
            raise TrainingError(f"non-finite rewards at iteration {it}")
        r = norm(raw_r, buf.dones) if cfg.normalize_rewards else raw_r.copy()
        buf.rewards = episode_end_rewards(r, buf, valuefn, cfg.gamma)
        policy, valuefn, stats, opt = ppo_update(policy, valuefn, buf, cfg, rng, opt)
        row = {"iteration": it, "env_steps": (it + 1) * cfg.steps_per_iter}
        if cfg.eval_every and (it % cfg.eval_every == 0 or it == iterations - 1):
            ret = float(np.mean(evaluate_policy(spec, policy, cfg.n_eval)))
            row["mean_eval_return"] = ret
            row["normalized_score"] = normalized_score(ret, *baselines) if baselines else float("nan")
        else:
            row["mean_eval_return"] = row["normalized_score"] = float("nan")
        row.update(stats)
        row["mean_raw_reward"] = float(raw_r.mean())
        row["diverged"] = buf.meta["diverged"]
        row.update({f"reward_{k}": v for k, v in rstats.items()})
        curve.append(row)
        log.info("iter %d return %.3f score %.3f kl %.4f", it, row["mean_eval_return"], row["normalized_score"],
                 stats["kl"])
        if callback is not None:
            callback(it, policy, row)
    return policy, valuefn, curve


def config_dict(cfg: PpoConfig) -> dict:
    d = asdict(cfg)
    d["hidden"] = list(d["hidden"])
    return d
