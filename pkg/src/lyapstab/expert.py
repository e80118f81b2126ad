"""Scripted experts and state-only demonstration datasets."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.linalg import expm, solve_discrete_are

from . import envs
from .envs import AcrobotModel, CarModel, EnvSpec, QuadrotorModel


class DatasetError(ValueError):
    pass


class DatasetParseError(DatasetError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


@dataclass
class Trajectory:
    """Residual-coordinate states of one expert episode. No actions are kept."""

    states: np.ndarray
    dt: float
    env: str
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.ndim != 2 or len(self.states) < 2:
            raise DatasetError("a trajectory needs at least two states")
        if self.dt <= 0:
            raise DatasetError("dt must be positive")

    def __len__(self):
        return len(self.states)

    def __eq__(self, other):
        return (isinstance(other, Trajectory) and self.env == other.env and self.dt == other.dt
                and self.seed == other.seed and np.array_equal(self.states, other.states))


@dataclass
class TransitionBatch:
    s: np.ndarray
    s2: np.ndarray
    dt: float

    def __post_init__(self):
        if self.s.shape != self.s2.shape:
            raise DatasetError("s and s' arrays must have equal shape")

    def __len__(self):
        return len(self.s)

    def subset(self, idx) -> "TransitionBatch":
        return TransitionBatch(self.s[idx], self.s2[idx], self.dt)


def transitions(trajs) -> TransitionBatch:
    """Consecutive ``(s, s')`` pairs from every trajectory (never across trajectories)."""
    trajs = list(trajs)
    if not trajs:
        raise DatasetError("no trajectories")
    dts = {t.dt for t in trajs}
    if len(dts) != 1:
        raise DatasetError(f"mixed timesteps in dataset: {sorted(dts)}")
    s = np.concatenate([t.states[:-1] for t in trajs])
    s2 = np.concatenate([t.states[1:] for t in trajs])
    return TransitionBatch(s, s2, dts.pop())


# -- controllers ----------------------------------------------------------


def _linearize(spec: EnvSpec, x0, u0, h=1e-6):
    n, m = len(x0), len(u0)
    A = np.zeros((n, n))
    B = np.zeros((n, m))
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        A[:, i] = (spec.model.deriv((x0 + e)[None], u0[None])[0] - spec.model.deriv((x0 - e)[None], u0[None])[0]) / (2 * h)
    for j in range(m):
        e = np.zeros(m)
        e[j] = h * max(1.0, abs(u0[j]))
        B[:, j] = (spec.model.deriv(x0[None], (u0 + e)[None])[0] - spec.model.deriv(x0[None], (u0 - e)[None])[0]) / (2 * e[j])
    return A, B


def lqr_gain(spec: EnvSpec, Q, R):
    """Discrete LQR gain for the zero-order-hold sampled linearisation at ``spec.dt``.

    Returns ``(K, P)`` with control ``u = trim - K (x - x_eq)``.
    """
    x0, u0 = spec.model.equilibrium(), spec.model.trim_action()
    A, B = _linearize(spec, x0, u0)
    n, m = B.shape
    M = np.zeros((n + m, n + m))
    M[:n, :n], M[:n, n:] = A, B
    E = expm(M * spec.dt)
    Ad, Bd = E[:n, :n], E[:n, n:]
    Qd, Rd = Q * spec.dt, R * spec.dt
    P = solve_discrete_are(Ad, Bd, Qd, Rd)
    K = np.linalg.solve(Rd + Bd.T @ P @ Bd, Bd.T @ P @ Ad)
    return K, P


@lru_cache(maxsize=None)
def _quad_gain(spec: EnvSpec):
    Q = np.diag([4, 4, 4, 1, 1, 1, 2, 2, 2, 0.2, 0.2, 0.2]).astype(float)
    R = np.eye(4) * 1e-5
    K, _ = lqr_gain(spec, Q, R)
    return K


@lru_cache(maxsize=None)
def _acrobot_gain(spec: EnvSpec):
    return lqr_gain(spec, np.diag([10.0, 10.0, 1.0, 1.0]), np.eye(1) * 10.0)


def _angle_err(dx):
    dx = np.array(dx, dtype=np.float64)
    dx[..., 0:2] = envs.wrap_angle(dx[..., 0:2])
    return dx


def _sampled_step(spec: EnvSpec, X, U):
    """One control interval without action clamping or angle wrapping (smooth for differentiation)."""
    X = np.atleast_2d(X)
    U = np.broadcast_to(np.atleast_2d(U), (X.shape[0], spec.action_dim))
    h = spec.dt / spec.substeps
    for _ in range(spec.substeps):
        X = envs._rk4(lambda s: spec.model.deriv(s, U), X, h)
    return X


def _step_jacobians(spec: EnvSpec, X, U, h=1e-6):
    """Finite-difference Jacobians of the sampled dynamics along a trajectory."""
    N, n = X.shape
    A = np.zeros((N, n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        A[:, :, i] = (_sampled_step(spec, X + e, U) - _sampled_step(spec, X - e, U)) / (2 * h)
    B = np.zeros((N, n, U.shape[1]))
    for j in range(U.shape[1]):
        e = np.zeros(U.shape[1])
        e[j] = h
        B[:, :, j] = (_sampled_step(spec, X, U + e) - _sampled_step(spec, X, U - e)) / (2 * h)
    return A, B


def ilqr_swingup(spec: EnvSpec, steps=100, iters=100, u_init=None, q_final=(1000.0, 1000.0, 100.0, 100.0),
                 r=1e-2):
    """Open-loop acrobot swing-up from rest by iterative LQR on a terminal cost.

    Returns the control sequence ``(steps,)``.
    """
    m: AcrobotModel = spec.model
    tmax = float(m.action_high[0])
    xg = m.equilibrium()
    Qf = np.diag(q_final)
    rr = r * spec.dt
    if u_init is None:
        u_init = 0.6 * tmax * np.sin(5.0 * np.arange(steps) * spec.dt + np.pi)
    u = np.clip(np.asarray(u_init, dtype=np.float64), -tmax, tmax)

    def rollout(u):
        xs = [np.zeros(4)]
        for k in range(steps):
            xs.append(_sampled_step(spec, xs[-1], u[k:k + 1])[0])
        return np.array(xs)

    def cost(xs, u):
        e = _angle_err(xs[-1] - xg)
        return 0.5 * e @ Qf @ e + 0.5 * rr * np.sum(u**2)

    xs = rollout(u)
    J, mu = cost(xs, u), 1e-6
    for _ in range(iters):
        A, B = _step_jacobians(spec, xs[:-1], u[:, None])
        e = _angle_err(xs[-1] - xg)
        Vx, Vxx = Qf @ e, Qf.copy()
        ks, Ks = np.zeros(steps), np.zeros((steps, 4))
        for k in range(steps - 1, -1, -1):
            a, b = A[k], B[k][:, 0]
            Qx, Qu = a.T @ Vx, b @ Vx + rr * u[k]
            Qxx, Quu, Qux = a.T @ Vxx @ a, b @ Vxx @ b + rr + mu, b @ Vxx @ a
            ks[k], Ks[k] = -Qu / Quu, -Qux / Quu
            Vx = Qx + Ks[k] * Quu * ks[k] + Ks[k] * Qu + Qux * ks[k]
            Vxx = Qxx + Quu * np.outer(Ks[k], Ks[k]) + np.outer(Ks[k], Qux) + np.outer(Qux, Ks[k])
            Vxx = 0.5 * (Vxx + Vxx.T)
        for alpha in (1.0, 0.5, 0.25, 0.1, 0.05, 0.01):
            xn, un = [np.zeros(4)], np.zeros(steps)
            for k in range(steps):
                un[k] = np.clip(u[k] + alpha * ks[k] + Ks[k] @ _angle_err(xn[-1] - xs[k]), -tmax, tmax)
                xn.append(_sampled_step(spec, xn[-1], un[k:k + 1])[0])
            xn = np.array(xn)
            Jn = cost(xn, un)
            if Jn < J:
                xs, u, J = xn, un, Jn
                mu = max(mu / 5, 1e-8)
                break
        else:
            mu *= 10
            if mu > 1e6:
                break
    return u


_SWINGUP_FILE = Path(__file__).with_name("data") / "acrobot_swingup.json"


def _swingup_key(spec: EnvSpec) -> dict:
    m = spec.model
    return {"dt": spec.dt, "substeps": spec.substeps, "max_torque": float(m.action_high[0]),
            "m1": m.m1, "m2": m.m2, "l1": m.l1, "l2": m.l2, "g": m.g}


@lru_cache(maxsize=None)
def _acrobot_plan(spec: EnvSpec):
    """Nominal swing-up (from the stored plan when the model matches) plus TVLQR tracking gains."""
    key = _swingup_key(spec)
    u = None
    if _SWINGUP_FILE.exists():
        rec = json.loads(_SWINGUP_FILE.read_text())
        if rec["model"] == key:
            u = np.array(rec["controls"])
    if u is None:
        u = ilqr_swingup(spec)
    xs = [np.zeros(4)]
    for k in range(len(u)):
        xs.append(_sampled_step(spec, xs[-1], u[k:k + 1])[0])
    xs = np.array(xs)
    A, B = _step_jacobians(spec, xs[:-1], u[:, None])
    Q = np.diag([10.0, 10.0, 1.0, 1.0]) * spec.dt
    R = np.eye(1) * 0.1 * spec.dt
    _, P = _acrobot_gain(spec)
    Ks = np.zeros((len(u), 1, 4))
    for k in range(len(u) - 1, -1, -1):
        Ks[k] = np.linalg.solve(R + B[k].T @ P @ B[k], B[k].T @ P @ A[k])
        P = Q + A[k].T @ P @ (A[k] - B[k] @ Ks[k])
    return u, xs, Ks


def save_swingup(spec: EnvSpec, u, path=None) -> None:
    path = Path(path or _SWINGUP_FILE)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"model": _swingup_key(spec), "controls": np.asarray(u).tolist()}, indent=1))


def _car_action(m: CarModel, X, k_speed=1.0, k_stanley=0.5):
    r = m.residual(X)
    e_v, theta_e, d_e = r[:, 0], r[:, 1], r[:, 2]
    v = X[:, 3]
    delta = theta_e + np.arctan2(k_stanley * d_e, np.abs(v) + 0.05)
    return np.stack([k_speed * e_v, delta], axis=1)


def _acrobot_action(spec: EnvSpec, X, t):
    """Track the nominal swing-up with time-varying LQR, then hold upright with LQR."""
    u_nom, xs, Ks = _acrobot_plan(spec)
    if t is not None and t < len(u_nom):
        e = _angle_err(X - xs[t])
        return (u_nom[t] - e @ Ks[t].T[:, 0])[:, None]
    K, _ = _acrobot_gain(spec)
    dx = _angle_err(X - spec.model.equilibrium())
    return -(dx @ K.T)


def expert_action_batch(spec: EnvSpec, X, t: int | None = None) -> np.ndarray:
    """Expert controls for a batch of raw states. ``t`` is the episode step; only the
    acrobot expert (a tracked swing-up plan) uses it."""
    X = np.asarray(X, dtype=np.float64)
    m = spec.model
    if isinstance(m, CarModel):
        u = _car_action(m, X)
    elif isinstance(m, QuadrotorModel):
        u = m.trim_action()[None] - X @ _quad_gain(spec).T
    elif isinstance(m, AcrobotModel):
        u = _acrobot_action(spec, X, t)
    else:
        raise ValueError(f"no expert for {spec.name}")
    return envs.clamp_action(spec, u)


def expert_action(env, x, t: int | None = None) -> np.ndarray:
    """Expert control for one raw state. ``env`` is an EnvSpec or an env name."""
    spec = env if isinstance(env, EnvSpec) else envs.make_env(env)
    return expert_action_batch(spec, np.asarray(x, dtype=np.float64)[None], t)[0]


# -- collection -----------------------------------------------------------


def rollout_expert(spec: EnvSpec, seeds, horizon=None):
    """Run the expert from the reset state of each seed; returns raw states ``(N, T+1, n)``."""
    horizon = spec.horizon if horizon is None else horizon
    X = envs.reset_states(spec, seeds)
    out = [X]
    for t in range(horizon):
        X = envs.rk4_step(spec, X, expert_action_batch(spec, X, t))
        out.append(X)
    return np.stack(out, axis=1)


def collect_trajectories(env, count: int, horizon=None, seed: int = 0, tol: float = 0.05,
                         stop_at_convergence: bool = True, max_fail_rate: float = 0.5):
    """Collect ``count`` converged expert trajectories in residual coordinates.

    Episode ``i`` uses reset seed ``seed * 100_003 + i``; candidates that never
    enter the ``tol`` ball are discarded and replaced. With
    ``stop_at_convergence`` each trajectory ends at its first state inside the
    ball.
    """
    if count < 1:
        raise DatasetError("count must be >= 1")
    spec = env if isinstance(env, EnvSpec) else envs.make_env(env)
    horizon = spec.horizon if horizon is None else horizon
    kept, tried = [], 0
    while len(kept) < count:
        n = count - len(kept)
        seeds = [seed * 100_003 + tried + i for i in range(n)]
        tried += n
        raw = rollout_expert(spec, seeds, horizon)
        for s, traj in zip(seeds, raw):
            res = spec.model.residual(traj)
            norms = np.linalg.norm(res, axis=1)
            inside = np.nonzero(norms < tol)[0]
            if len(inside) == 0 or (not stop_at_convergence and norms[-1] >= tol):
                continue
            end = max(inside[0], 1) + 1 if stop_at_convergence else len(res)
            kept.append(Trajectory(res[:end], spec.dt, spec.name, s, {"length": int(end)}))
        failed = tried - len(kept)
        if failed / tried > max_fail_rate:
            raise DatasetError(f"expert failed on {failed}/{tried} episodes of {spec.name}")
    return kept


# -- serialization ---------------------------------------------------------


def save_dataset(trajs, path) -> None:
    with open(path, "w") as fh:
        for t in trajs:
            rec = {"env": t.env, "dt": t.dt, "seed": t.seed, "states": t.states.tolist()}
            fh.write(json.dumps(rec) + "\n")


def load_dataset(path, state_dim: int | None = None) -> list[Trajectory]:
    """Read a ``.jsonl`` dataset. Every state in the file must share one dimension."""
    trajs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetParseError(lineno, f"invalid JSON ({e.msg})") from None
            for key in ("env", "dt", "states"):
                if key not in rec:
                    raise DatasetParseError(lineno, f"missing field {key!r}")
            states = rec["states"]
            if not isinstance(states, list) or len(states) < 2:
                raise DatasetParseError(lineno, "need at least two states")
            dim = state_dim if state_dim is not None else (trajs[0].states.shape[1] if trajs else len(states[0]))
            for i, s in enumerate(states):
                if not isinstance(s, list) or len(s) != dim:
                    raise DatasetParseError(lineno, f"state {i} has dimension {len(s) if isinstance(s, list) else '?'}, expected {dim}")
            trajs.append(Trajectory(np.array(states, dtype=np.float64), float(rec["dt"]), rec["env"], rec.get("seed")))
    if not trajs:
        raise DatasetError(f"{path}: dataset contains zero trajectories")
    return trajs
