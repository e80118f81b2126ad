"""Stabilization environments: kinematic car path tracking, quadrotor hover, acrobot.

All dynamics are vectorised over a leading batch axis: states are ``(B, n)``
and actions ``(B, m)``; 1-D inputs are accepted and returned as 1-D.
Raw states are what the integrator advances. Learners only ever see
*residual* coordinates, in which the stabilisation target is the origin.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numkit import NumericError

ENV_NAMES = ("car", "car-hw", "quadrotor", "acrobot")


def wrap_angle(a):
    """Map angles into (-pi, pi]."""
    return np.pi - np.mod(np.pi - a, 2.0 * np.pi)


def _batch(x):
    x = np.asarray(x, dtype=np.float64)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


# -- car ----------------------------------------------------------------


class Polyline:
    """Piecewise-linear reference path with nearest-point projection."""

    def __init__(self, points):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise ValueError("path needs at least two (x, y) waypoints")
        self.points = pts
        self.a = pts[:-1]
        self.d = pts[1:] - pts[:-1]
        self.len2 = np.sum(self.d**2, axis=1)
        if np.any(self.len2 <= 0):
            raise ValueError("path has repeated consecutive waypoints")
        self.yaw = np.arctan2(self.d[:, 1], self.d[:, 0])

    @classmethod
    def from_csv(cls, path) -> "Polyline":
        pts = []
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].strip().startswith("#"):
                    continue
                try:
                    pts.append((float(row[0]), float(row[1])))
                except ValueError:
                    if pts:
                        raise
                    continue  # header row
        return cls(pts)

    def project(self, p):
        """For positions ``(B, 2)`` return (signed left offset, segment yaw)."""
        rel = p[:, None, :] - self.a[None, :, :]
        t = np.clip(np.sum(rel * self.d[None], axis=2) / self.len2[None], 0.0, 1.0)
        foot = self.a[None] + t[..., None] * self.d[None]
        dist2 = np.sum((p[:, None, :] - foot) ** 2, axis=2)
        k = np.argmin(dist2, axis=1)
        idx = np.arange(len(p))
        yaw = self.yaw[k]
        off = p - foot[idx, k]
        left = -np.sin(yaw) * off[:, 0] + np.cos(yaw) * off[:, 1]
        return left, yaw


class CarModel:
    """Kinematic bicycle ``(x, y, yaw, v)`` with controls ``(a, delta)``.

    Residual coordinates are ``(V_t - v, theta_e, d_e)`` with
    ``theta_e = path_yaw - yaw`` and ``d_e`` positive when the path lies to
    the vehicle's left.
    """

    raw_dim = 4
    residual_dim = 3
    action_dim = 2
    angle_idx = (2,)

    def __init__(self, target_speed=0.5, wheelbase=0.25, path=None, max_accel=1.0,
                 max_steer=0.6, init_offset=0.5, init_heading=0.4, diverge_offset=3.0,
                 cost_weights=(1.0, 1.0, 1.0), cost_cap=1.0):
        self.target_speed = float(target_speed)
        self.wheelbase = float(wheelbase)
        self.path = path if path is not None else Polyline([(0.0, 0.0), (500.0, 0.0)])
        self.action_low = np.array([-max_accel, -max_steer])
        self.action_high = np.array([max_accel, max_steer])
        self.init_offset = float(init_offset)
        self.init_heading = float(init_heading)
        self.diverge_offset = float(diverge_offset)
        self.cost_weights = np.asarray(cost_weights, dtype=np.float64)
        self.cost_cap = float(cost_cap)

    def equilibrium(self):
        x0, y0 = self.path.points[0]
        yaw = self.path.yaw[0]
        return np.array([x0, y0, yaw, self.target_speed])

    def trim_action(self):
        return np.zeros(2)

    def deriv(self, x, u):
        yaw, v = x[:, 2], x[:, 3]
        a, delta = u[:, 0], u[:, 1]
        return np.stack([v * np.cos(yaw), v * np.sin(yaw), v / self.wheelbase * np.tan(delta), a], axis=1)

    def residual(self, x):
        left, path_yaw = self.path.project(x[:, :2])
        return np.stack([self.target_speed - x[:, 3], wrap_angle(path_yaw - x[:, 2]), -left], axis=1)

    def reset(self, rng, n):
        x0, y0 = self.path.points[0]
        yaw0 = self.path.yaw[0]
        # start a little way along the first segment so projection is interior
        along = np.full(n, 0.5)
        off = rng.uniform(-self.init_offset, self.init_offset, n)
        head = rng.uniform(-self.init_heading, self.init_heading, n)
        v = rng.uniform(0.0, 2.0 * self.target_speed, n)
        px = x0 + along * np.cos(yaw0) - off * np.sin(yaw0)
        py = y0 + along * np.sin(yaw0) + off * np.cos(yaw0)
        return np.stack([px, py, wrap_angle(yaw0 + head), v], axis=1)

    def reward(self, x, u):
        r = self.residual(x)
        cost = r**2 @ self.cost_weights
        return -np.minimum(cost, self.cost_cap)

    def diverged(self, x):
        r = self.residual(x)
        return (np.abs(r[:, 2]) > self.diverge_offset) | (np.abs(r[:, 0]) > 3.0 * max(self.target_speed, 1.0))


# -- quadrotor ------------------------------------------------------------


class QuadrotorModel:
    """12-state rigid-body quadrotor; actions are the four rotor speeds [rad/s].

    State ``(x, y, z, vx, vy, vz, phi, theta, psi, p, q, r)``; the rate
    states are treated as Euler-angle rates (small-angle body dynamics).
    Rotor layout: 1 front (+x), 2 left (+y), 3 back, 4 right.
    """

    raw_dim = 12
    residual_dim = 12
    action_dim = 4
    angle_idx = (6, 7, 8)

    def __init__(self, mass=0.5, arm=0.25, g=9.81, k_thrust=3e-6, k_drag=1e-7,
                 inertia=(5e-3, 5e-3, 1e-2), init_pos=0.5, init_vel=0.2, init_ang=0.2,
                 init_rate=0.2, diverge_pos=5.0, diverge_ang=1.2, cost_cap=10.0):
        self.mass, self.arm, self.g = float(mass), float(arm), float(g)
        self.k_thrust, self.k_drag = float(k_thrust), float(k_drag)
        self.inertia = np.asarray(inertia, dtype=np.float64)
        self.hover_speed = np.sqrt(self.mass * self.g / (4.0 * self.k_thrust))
        self.action_low = np.zeros(4)
        self.action_high = np.full(4, 2.0 * self.hover_speed)
        self.init_box = np.repeat([init_pos, init_vel, init_ang, init_rate], 3).astype(np.float64)
        self.diverge_pos, self.diverge_ang = float(diverge_pos), float(diverge_ang)
        self.cost_cap = float(cost_cap)

    def equilibrium(self):
        return np.zeros(12)

    def trim_action(self):
        return np.full(4, self.hover_speed)

    def deriv(self, x, u):
        w2 = u**2
        thrust = self.k_thrust * w2.sum(axis=1)
        tau_phi = self.arm * self.k_thrust * (w2[:, 1] - w2[:, 3])
        tau_theta = self.arm * self.k_thrust * (w2[:, 2] - w2[:, 0])
        tau_psi = self.k_drag * (w2[:, 0] - w2[:, 1] + w2[:, 2] - w2[:, 3])
        phi, theta, psi = x[:, 6], x[:, 7], x[:, 8]
        p, q, r = x[:, 9], x[:, 10], x[:, 11]
        Ixx, Iyy, Izz = self.inertia
        a = thrust / self.mass
        ax = a * (np.cos(phi) * np.sin(theta) * np.cos(psi) + np.sin(phi) * np.sin(psi))
        ay = a * (np.cos(phi) * np.sin(theta) * np.sin(psi) - np.sin(phi) * np.cos(psi))
        az = a * np.cos(phi) * np.cos(theta) - self.g
        dp = (tau_phi + (Iyy - Izz) * q * r) / Ixx
        dq = (tau_theta + (Izz - Ixx) * p * r) / Iyy
        dr = (tau_psi + (Ixx - Iyy) * p * q) / Izz
        return np.concatenate([x[:, 3:6], np.stack([ax, ay, az], 1), x[:, 9:12], np.stack([dp, dq, dr], 1)], axis=1)

    def residual(self, x):
        r = x.copy()
        r[:, 6:9] = wrap_angle(r[:, 6:9])
        return r

    def reset(self, rng, n):
        return rng.uniform(-1.0, 1.0, size=(n, 12)) * self.init_box

    def reward(self, x, u):
        cost = (np.sum(x[:, 0:3] ** 2, 1) + 0.1 * np.sum(x[:, 3:6] ** 2, 1)
                + 0.1 * np.sum(wrap_angle(x[:, 6:9]) ** 2, 1) + 0.01 * np.sum(x[:, 9:12] ** 2, 1))
        return -np.minimum(cost, self.cost_cap)

    def diverged(self, x):
        return (np.linalg.norm(x[:, 0:3], axis=1) > self.diverge_pos) | np.any(
            np.abs(wrap_angle(x[:, 6:8])) > self.diverge_ang, axis=1)


# -- acrobot --------------------------------------------------------------


class AcrobotModel:
    """Two-link acrobot (uniform rods), torque on the elbow only.

    Raw state ``(theta1, theta2, omega1, omega2)`` with ``theta1 = 0``
    hanging straight down. The residual map is the continuous embedding
    ``(sin p1, 1 - cos p1, sin p2, 1 - cos p2, omega1, omega2)`` where
    ``p1 = theta1 - pi`` is the shoulder angle from upright; it is zero at
    the upright configuration and has no wrap discontinuity.
    """

    raw_dim = 4
    residual_dim = 6
    action_dim = 1
    angle_idx = (0, 1)

    def __init__(self, m1=1.0, m2=1.0, l1=1.0, l2=1.0, g=9.81, max_torque=10.0,
                 init_angle=0.1, init_rate=0.1, diverge_rate=40.0):
        self.m1, self.m2, self.l1, self.l2, self.g = m1, m2, l1, l2, g
        self.lc1, self.lc2 = l1 / 2.0, l2 / 2.0
        self.I1, self.I2 = m1 * l1**2 / 12.0, m2 * l2**2 / 12.0
        self.action_low = np.array([-max_torque])
        self.action_high = np.array([max_torque])
        self.init_angle, self.init_rate = float(init_angle), float(init_rate)
        self.diverge_rate = float(diverge_rate)

    def equilibrium(self):
        return np.array([np.pi, 0.0, 0.0, 0.0])

    def trim_action(self):
        return np.zeros(1)

    def mass_terms(self, x):
        """Mass matrix entries and bias forces: ``D qdd + h = (0, tau)``."""
        t1, t2, w1, w2 = x[:, 0], x[:, 1], x[:, 2], x[:, 3]
        m1, m2, l1, lc1, lc2 = self.m1, self.m2, self.l1, self.lc1, self.lc2
        c2, s2 = np.cos(t2), np.sin(t2)
        d11 = m1 * lc1**2 + m2 * (l1**2 + lc2**2 + 2 * l1 * lc2 * c2) + self.I1 + self.I2
        d12 = m2 * (lc2**2 + l1 * lc2 * c2) + self.I2
        d22 = m2 * lc2**2 + self.I2
        phi2 = m2 * lc2 * self.g * np.sin(t1 + t2)
        phi1 = (m1 * lc1 + m2 * l1) * self.g * np.sin(t1) + phi2
        h1 = -m2 * l1 * lc2 * s2 * w2**2 - 2 * m2 * l1 * lc2 * s2 * w2 * w1 + phi1
        h2 = m2 * l1 * lc2 * s2 * w1**2 + phi2
        return d11, d12, d22, h1, h2

    def deriv(self, x, u):
        d11, d12, d22, h1, h2 = self.mass_terms(x)
        tau = u[:, 0]
        det = d11 * d22 - d12**2
        a1 = (-d22 * h1 - d12 * (tau - h2)) / det
        a2 = (d12 * h1 + d11 * (tau - h2)) / det
        return np.stack([x[:, 2], x[:, 3], a1, a2], axis=1)

    def residual(self, x):
        p1 = x[:, 0] - np.pi
        p2 = x[:, 1]
        return np.stack([np.sin(p1), 1.0 - np.cos(p1), np.sin(p2), 1.0 - np.cos(p2), x[:, 2], x[:, 3]], axis=1)

    def reset(self, rng, n):
        ang = rng.uniform(-self.init_angle, self.init_angle, size=(n, 2))
        rate = rng.uniform(-self.init_rate, self.init_rate, size=(n, 2))
        return np.concatenate([ang, rate], axis=1)

    def probe_residual(self, rng, n, half):
        """Residuals of raw states with uniform joint angles and rates inside ``half[4:6]``."""
        ang = rng.uniform(-np.pi, np.pi, size=(n, 2))
        rate = rng.uniform(-1.0, 1.0, size=(n, 2)) * half[4:6]
        return self.residual(np.concatenate([ang + [np.pi, 0.0], rate], axis=1))

    def tip_height(self, x):
        return -self.l1 * np.cos(x[:, 0]) - self.l2 * np.cos(x[:, 0] + x[:, 1])

    def energy(self, x):
        d11, d12, d22, _, _ = self.mass_terms(x)
        w1, w2 = x[:, 2], x[:, 3]
        kin = 0.5 * (d11 * w1**2 + 2 * d12 * w1 * w2 + d22 * w2**2)
        pot = -(self.m1 * self.lc1 + self.m2 * self.l1) * self.g * np.cos(x[:, 0]) \
            - self.m2 * self.lc2 * self.g * np.cos(x[:, 0] + x[:, 1])
        return kin + pot

    def reward(self, x, u):
        return self.tip_height(x) - (self.l1 + self.l2)

    def diverged(self, x):
        return np.any(np.abs(x[:, 2:4]) > self.diverge_rate, axis=1)


# -- spec / state ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EnvSpec:
    name: str
    model: object
    dt: float
    horizon: int
    options: dict = field(default_factory=dict)
    substeps: int = 1

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if np.any(self.model.action_low >= self.model.action_high):
            raise ValueError("action bounds must satisfy lo < hi")

    @property
    def state_dim(self) -> int:
        return self.model.raw_dim

    @property
    def residual_dim(self) -> int:
        return self.model.residual_dim

    @property
    def action_dim(self) -> int:
        return self.model.action_dim

    @property
    def action_low(self) -> np.ndarray:
        return self.model.action_low

    @property
    def action_high(self) -> np.ndarray:
        return self.model.action_high


@dataclass
class EnvState:
    x: np.ndarray
    t: int = 0


_DEFAULTS = {
    "car": dict(dt=0.1, horizon=300),
    "car-hw": dict(dt=0.5, horizon=120),
    "quadrotor": dict(dt=0.02, horizon=500),
    "acrobot": dict(dt=0.05, horizon=400, substeps=4),
}


def make_env(name: str, dt=None, horizon=None, path_csv=None, substeps=None, **model_kwargs) -> EnvSpec:
    """Build an environment by name; keyword arguments override model constants.

    ``substeps`` splits each control interval into that many RK4 steps
    (the acrobot uses 4 to keep energy drift negligible at its control rate).
    """
    if name not in _DEFAULTS:
        raise ValueError(f"unknown environment {name!r}; choose from {ENV_NAMES}")
    d = _DEFAULTS[name]
    options = dict(model_kwargs)
    if path_csv is not None:
        options["path_csv"] = str(path_csv)
    if name in ("car", "car-hw"):
        if path_csv is not None:
            model_kwargs["path"] = Polyline.from_csv(path_csv)
        if name == "car-hw":
            model_kwargs.setdefault("target_speed", 0.3)
            model_kwargs.setdefault("init_offset", 0.3)
        model = CarModel(**model_kwargs)
    elif name == "quadrotor":
        model = QuadrotorModel(**model_kwargs)
    else:
        model = AcrobotModel(**model_kwargs)
    return EnvSpec(name, model, float(d["dt"] if dt is None else dt),
                   int(d["horizon"] if horizon is None else horizon), options,
                   int(d.get("substeps", 1) if substeps is None else substeps))


def clamp_action(spec: EnvSpec, u):
    return np.clip(u, spec.action_low, spec.action_high)


def dynamics_deriv(spec: EnvSpec, x, u):
    X, single = _batch(x)
    U, _ = _batch(u)
    U = clamp_action(spec, U)
    dx = spec.model.deriv(X, U)
    if not np.all(np.isfinite(dx)):
        bad = np.where(~np.all(np.isfinite(dx), axis=1))[0][0]
        raise NumericError(f"{spec.name}: non-finite derivative at state {X[bad].tolist()}")
    return dx[0] if single else dx


def _rk4(f, x, dt):
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_integrate(f, x, dt: float):
    """Classical RK4 step for an arbitrary autonomous field ``f``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    return _rk4(f, np.asarray(x, dtype=np.float64), dt)


def rk4_step(spec: EnvSpec, x, u, dt=None):
    """Advance one zero-order-hold step (``spec.substeps`` RK4 sub-steps) and re-wrap angles."""
    dt = spec.dt if dt is None else dt
    if dt <= 0:
        raise ValueError("dt must be positive")
    X, single = _batch(x)
    U, _ = _batch(u)
    U = clamp_action(spec, U)
    if U.shape[0] == 1 and X.shape[0] > 1:
        U = np.repeat(U, X.shape[0], axis=0)
    x_next = X
    h = dt / spec.substeps
    for _ in range(spec.substeps):
        x_next = _rk4(lambda s: spec.model.deriv(s, U), x_next, h)
    if not np.all(np.isfinite(x_next)):
        raise NumericError(f"{spec.name}: non-finite state after RK4 step")
    for i in spec.model.angle_idx:
        x_next[:, i] = wrap_angle(x_next[:, i])
    return x_next[0] if single else x_next


def residual(spec: EnvSpec, x):
    X, single = _batch(x)
    r = spec.model.residual(X)
    return r[0] if single else r


def residual_rate(spec: EnvSpec, x, u, h: float = 1e-6):
    """Time derivative of the residual coordinates along the dynamics."""
    X, single = _batch(x)
    dx = dynamics_deriv(spec, X, u)
    rp = spec.model.residual(X + h * dx)
    rm = spec.model.residual(X - h * dx)
    out = (rp - rm) / (2.0 * h)
    return out[0] if single else out


def probe_sampler(spec: EnvSpec):
    """``f(rng, n, half)`` drawing reachable residual states, or None when the residual box is enough.

    Needed where residual coordinates live on a manifold (angles embedded as
    sin / 1 - cos), so most of a box in residual space is unreachable.
    """
    return getattr(spec.model, "probe_residual", None)


def reset_states(spec: EnvSpec, seeds) -> np.ndarray:
    """One initial raw state per seed; each depends only on its own seed."""
    return np.concatenate([spec.model.reset(np.random.default_rng(int(s)), 1) for s in seeds], axis=0)


def env_reset(spec: EnvSpec, seed) -> EnvState:
    return EnvState(reset_states(spec, [seed])[0], 0)


def task_reward(spec: EnvSpec, x, u):
    X, single = _batch(x)
    U, _ = _batch(u)
    r = spec.model.reward(X, clamp_action(spec, U))
    return float(r[0]) if single else r


def diverged(spec: EnvSpec, x):
    X, single = _batch(x)
    d = spec.model.diverged(X)
    return bool(d[0]) if single else d


def env_step(spec: EnvSpec, state: EnvState, u) -> tuple[EnvState, float, bool]:
    """Single-environment convenience step: returns (next state, task reward, done)."""
    r = task_reward(spec, state.x, u)
    x = rk4_step(spec, state.x, u)
    t = state.t + 1
    done = t >= spec.horizon or diverged(spec, x)
    return EnvState(x, t), r, done


def min_step_reward(spec: EnvSpec) -> float:
    """Worst per-step task reward; charged for every step lost to divergence."""
    m = spec.model
    if isinstance(m, AcrobotModel):
        return -2.0 * (m.l1 + m.l2)
    return -m.cost_cap
