"""Experiment orchestration: datasets, end-to-end runs, sweeps, baselines, CLI.

Every run writes to ``<out>/<env>/<method>/<n_traj>/<seed>/``:
``curve.csv``, ``summary.json``, ``policy.json``, ``config.json`` and, for
landscape methods, ``proxy.json``.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from filelock import FileLock

from . import envs, expert, gaifo, lyapunov, numkit, policyopt, reward
from .lyapunov import ProxyTrainConfig
from .policyopt import CURVE_COLUMNS, PpoConfig
from .reward import RewardConfig

log = logging.getLogger(__name__)

METHODS = ("lso-llpm", "gaifo", "quadratic", "lyap-risk", "oracle-rl")
SWEEP_COLUMNS = ("method", "env", "n_traj", "seed", "score", "status", "config_hash")
FINAL_WINDOW = 5
SCORE_FLAG_RANGE = (-0.5, 1.5)


class MetricError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, err: Exception):
        super().__init__(f"stage {stage!r} failed: {err}")
        self.stage = stage


# -- metric ---------------------------------------------------------------


def normalized_score(R, R_random, R_expert):
    """0 at the random-policy return, 1 at the expert return."""
    if R_expert == R_random:
        raise MetricError("expert and random returns coincide; score undefined")
    return (R - R_random) / (R_expert - R_random)


def final_score(curve, window: int = FINAL_WINDOW) -> float:
    """Mean normalised score over the last ``window`` evaluated iterations."""
    pts = [r["normalized_score"] for r in curve if not math.isnan(r["normalized_score"])]
    if not pts:
        return float("nan")
    return float(np.mean(pts[-window:]))


def random_returns(spec, n_episodes: int = 10, seeds=(0, 1, 2)) -> np.ndarray:
    """Uniform-random actions over the bounds, one action stream per seed."""
    out = []
    for s in seeds:
        rng = np.random.default_rng(s)
        act = lambda X, t: rng.uniform(spec.action_low, spec.action_high, size=(len(X), spec.action_dim))
        out.append(policyopt.rollout_returns(spec, act, policyopt.eval_seeds(n_episodes)))
    return np.concatenate(out)


def expert_returns(spec, n_episodes: int = 10) -> np.ndarray:
    return policyopt.rollout_returns(spec, lambda X, t: expert.expert_action_batch(spec, X, t),
                                     policyopt.eval_seeds(n_episodes))


def _spec_key(spec) -> str:
    m = spec.model
    params = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in vars(m).items()
              if isinstance(v, (int, float, str, tuple, np.ndarray))}
    blob = json.dumps({"name": spec.name, "dt": spec.dt, "horizon": spec.horizon, "substeps": spec.substeps,
                       "model": params, "options": spec.options}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def estimate_baselines(spec, n_episodes: int = 10, seeds=(0, 1, 2), cache_dir=None):
    """``(R_random, R_expert)`` on the evaluation start states, cached per env in ``cache_dir``."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    key = f"{spec.name}-{_spec_key(spec)}-{n_episodes}-{'_'.join(map(str, seeds))}"
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / spec.name / "baselines.json"
        if path.exists():
            cached = json.loads(path.read_text())
            if key in cached:
                return tuple(cached[key])
    R_random = float(np.mean(random_returns(spec, n_episodes, seeds)))
    R_expert = float(np.mean(expert_returns(spec, n_episodes)))
    if not R_expert > R_random:
        raise MetricError(f"{spec.name}: expert return {R_expert:.3f} does not beat random {R_random:.3f}")
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        with FileLock(str(path) + ".lock"):
            cached = json.loads(path.read_text()) if path.exists() else {}
            cached[key] = [R_random, R_expert]
            path.write_text(json.dumps(cached, indent=2))
    return R_random, R_expert


# -- config ---------------------------------------------------------------


def _sub(cls, d):
    if d is None or isinstance(d, cls):
        return d
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


@dataclass
class ExperimentConfig:
    env: str = "car"
    method: str = "lso-llpm"
    n_traj: int = 10
    pool_size: int = 20
    data_seed: int = 0
    dataset: str | None = None
    env_kwargs: dict = field(default_factory=dict)
    proxy: ProxyTrainConfig = field(default_factory=ProxyTrainConfig)
    reward: RewardConfig | None = None
    ppo: PpoConfig = field(default_factory=PpoConfig)
    gaifo: gaifo.GaifoConfig = field(default_factory=gaifo.GaifoConfig)
    quadratic_weights: list | None = None
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    iterations: int = 300
    baseline_episodes: int = 10
    out: str = "out"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.env not in envs.ENV_NAMES:
            raise ValueError(f"unknown env {self.env!r}")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.n_traj < 1:
            raise ValueError("n_traj must be >= 1")
        self.proxy = _sub(ProxyTrainConfig, self.proxy)
        self.reward = _sub(RewardConfig, self.reward) or reward.default_reward_config(self.env)
        self.ppo = _sub(PpoConfig, self.ppo)
        self.gaifo = _sub(gaifo.GaifoConfig, self.gaifo)
        if self.quadratic_weights is not None:
            lyapunov.quadratic_proxy(self.quadratic_weights)  # validates positivity

    def make_env(self):
        return envs.make_env(self.env, **self.env_kwargs)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("proxy", "ppo", "gaifo"):
            d[k]["hidden"] = list(d[k]["hidden"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def replace(self, **kw) -> "ExperimentConfig":
        d = self.to_dict()
        d.update(kw)
        return ExperimentConfig.from_dict(d)

    def config_hash(self) -> str:
        """Digest of everything that affects results (seed list and output dir excluded)."""
        d = self.to_dict()
        d.pop("seeds")
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    def run_dir(self, seed: int) -> Path:
        return Path(self.out) / self.env / self.method / str(self.n_traj) / str(seed)


@dataclass
class RunRecord:
    """One learning-curve row plus run metadata."""

    method: str
    env: str
    seed: int
    n_trajectories: int
    config_hash: str
    metrics: dict

    @property
    def flagged(self) -> bool:
        s = self.metrics.get("normalized_score", float("nan"))
        return not math.isnan(s) and not SCORE_FLAG_RANGE[0] <= s <= SCORE_FLAG_RANGE[1]

    def row(self) -> dict:
        r = {k: self.metrics.get(k, float("nan")) for k in CURVE_COLUMNS}
        r.update(method=self.method, env=self.env, seed=self.seed, n_traj=self.n_trajectories,
                 config_hash=self.config_hash, flagged=int(self.flagged))
        return r


RUN_CSV_COLUMNS = CURVE_COLUMNS + ("method", "env", "seed", "n_traj", "config_hash", "flagged")


def write_curve(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RUN_CSV_COLUMNS)
        w.writeheader()
        for rec in records:
            w.writerow({k: _fmt(v) for k, v in rec.row().items()})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


# -- datasets -------------------------------------------------------------


def dataset_pool(cfg: ExperimentConfig):
    """The trajectory pool for ``cfg``: the configured file, or a generated pool."""
    if cfg.dataset:
        spec = cfg.make_env()
        return expert.load_dataset(cfg.dataset, spec.residual_dim)
    size = max(cfg.pool_size, cfg.n_traj)
    return expert.collect_trajectories(cfg.make_env(), size, seed=cfg.data_seed)


def subset_dataset(pool, n: int, seed: int):
    """``n`` trajectories drawn without replacement; deterministic in ``seed``."""
    if n > len(pool):
        raise ValueError(f"asked for {n} trajectories from a pool of {len(pool)}")
    idx = np.sort(np.random.default_rng(seed).choice(len(pool), size=n, replace=False))
    return [pool[i] for i in idx]


# -- single run -----------------------------------------------------------


def _stage(name, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except Exception as e:  # noqa: BLE001 - rewrapped with the stage name
        raise StageError(name, e) from e


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    return x


def build_landscape(cfg: ExperimentConfig, trajs, seed: int):
    """Train (or construct) the landscape for a landscape-reward method."""
    spec = cfg.make_env()
    if cfg.method == "quadratic":
        w = cfg.quadratic_weights or [1.0] * spec.residual_dim
        return lyapunov.quadratic_proxy(w)
    loss = "risk" if cfg.method == "lyap-risk" else "llpm"
    pcfg = ProxyTrainConfig(**{**asdict(cfg.proxy), "loss": loss, "seed": cfg.proxy.seed + seed})
    return lyapunov.train_proxy(trajs, pcfg, env=spec.name, sampler=envs.probe_sampler(spec))


def run_single(cfg: ExperimentConfig, seed: int, write: bool = True, callback=None) -> dict:
    """Dataset -> landscape (or discriminator) -> PPO -> artifacts. Returns the summary dict."""
    spec = _stage("env", cfg.make_env)
    chash = cfg.config_hash()
    out = cfg.run_dir(seed)
    if write:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    baselines = _stage("baselines", estimate_baselines, spec, cfg.baseline_episodes,
                       cache_dir=cfg.out if write else None)

    trajs = None
    if cfg.method != "oracle-rl":
        pool = _stage("dataset", dataset_pool, cfg)
        trajs = _stage("dataset", subset_dataset, pool, cfg.n_traj, seed)

    rng = np.random.default_rng(seed)
    policy = policyopt.make_policy(spec, rng, cfg.ppo.hidden, cfg.ppo.init_log_std)
    valuefn = policyopt.make_valuefn(spec, rng, cfg.ppo.hidden)
    proxy_report = {}
    if cfg.method == "oracle-rl":
        policy, valuefn, curve = _stage("train_policy", policyopt.train_policy, spec, policyopt.TaskReward(spec),
                                        policy, valuefn, cfg.ppo, cfg.iterations, seed, baselines, callback)
    elif cfg.method == "gaifo":
        D = gaifo.make_discriminator(spec.residual_dim, rng, cfg.gaifo.hidden)
        policy, valuefn, curve, D = _stage("train_gaifo", gaifo.train_gaifo, spec, trajs, policy, valuefn, D,
                                           cfg.ppo, cfg.iterations, cfg.gaifo, seed, baselines, callback)
        if write:
            numkit.save_params(D.params, out / "discriminator.json")
    else:
        V = _stage("train_proxy", build_landscape, cfg, trajs, seed)
        if isinstance(V, lyapunov.ProxyModel):
            proxy_report = V.report
            if write:
                V.save(out / "proxy.json")
        elif write:
            (out / "proxy.json").write_text(json.dumps({"format": "quadratic", "weights": V.weights.tolist()}))
        source = reward.ProxyRewardSource(V, cfg.reward, spec.dt)
        policy, valuefn, curve = _stage("train_policy", policyopt.train_policy, spec, source, policy, valuefn,
                                        cfg.ppo, cfg.iterations, seed, baselines, callback)

    records = [RunRecord(cfg.method, cfg.env, seed, cfg.n_traj, chash, row) for row in curve]
    summary = {
        "method": cfg.method, "env": cfg.env, "seed": seed, "n_traj": cfg.n_traj, "config_hash": chash,
        "iterations": cfg.iterations,
        "final_score": final_score(curve),
        "final_return": float(np.mean([r["mean_eval_return"] for r in curve][-FINAL_WINDOW:])) if curve else None,
        "R_random": baselines[0], "R_expert": baselines[1],
        "flagged": any(r.flagged for r in records[-FINAL_WINDOW:]),
        "proxy_report": proxy_report,
    }
    summary = _jsonable(summary)
    if write:
        write_curve(out / "curve.csv", records)
        policy.save(out / "policy.json")
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


# -- sweep ----------------------------------------------------------------


def append_rows(path, rows, columns=SWEEP_COLUMNS) -> None:
    """Append rows to a CSV under a file lock, writing the header for a new file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with FileLock(str(path) + ".lock"):
        new = not path.exists() or path.stat().st_size == 0
        with open(path, "a", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=columns)
            if new:
                w.writeheader()
            for r in rows:
                w.writerow({k: _fmt(r.get(k)) for k in columns})


def run_sweep(cfg: ExperimentConfig, trajectory_counts, methods=None, csv_path=None, runner=None) -> Path:
    """Every (method, count, seed) cell end to end; one long-format CSV row per cell.

    A failing cell is recorded with its error in ``status`` and the sweep
    moves on.
    """
    counts = list(trajectory_counts)
    if not counts or any(c < 1 for c in counts) or counts != sorted(counts):
        raise ValueError("trajectory counts must be ascending and >= 1")
    methods = list(methods or [cfg.method])
    csv_path = Path(csv_path or Path(cfg.out) / "sweep.csv")
    runner = runner or run_single
    for method in methods:
        for n in counts:
            cell_cfg = cfg.replace(method=method, n_traj=n, pool_size=max(cfg.pool_size, n))
            for seed in cfg.seeds:
                row = {"method": method, "env": cfg.env, "n_traj": n, "seed": seed,
                       "config_hash": cell_cfg.config_hash()}
                try:
                    summary = runner(cell_cfg, seed)
                    row.update(score=summary["final_score"], status="ok")
                except Exception as e:  # noqa: BLE001 - recorded, sweep continues
                    log.error("cell %s/%d/%d failed: %s", method, n, seed, e)
                    row.update(score=float("nan"), status=f"failed: {e}")
                append_rows(csv_path, [row])
    return csv_path


# -- CLI ------------------------------------------------------------------


def _load_cfg(args) -> ExperimentConfig:
    d = json.loads(Path(args.config).read_text()) if getattr(args, "config", None) else {}
    for key in ("env", "method", "out"):
        v = getattr(args, key, None)
        if v is not None:
            d[key] = v
    return ExperimentConfig.from_dict(d)


def _cmd_gen_data(args):
    spec = envs.make_env(args.env)
    trajs = expert.collect_trajectories(spec, args.count, seed=args.seed or 0)
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    expert.save_dataset(trajs, path)
    print(f"wrote {len(trajs)} trajectories to {path}")


def _cmd_train_proxy(args):
    cfg = _load_cfg(args)
    spec = cfg.make_env()
    trajs = expert.load_dataset(args.dataset, spec.residual_dim) if args.dataset else \
        subset_dataset(dataset_pool(cfg), cfg.n_traj, args.seed or 0)
    pcfg = ProxyTrainConfig(**{**asdict(cfg.proxy), "loss": "risk" if cfg.method == "lyap-risk" else "llpm"})
    V = lyapunov.train_proxy(trajs, pcfg, env=spec.name, sampler=envs.probe_sampler(spec))
    path = Path(args.out_file)
    path.parent.mkdir(parents=True, exist_ok=True)
    V.save(path)
    print(json.dumps(V.report, indent=2))


def _cmd_train(args):
    cfg = _load_cfg(args)
    seeds = [args.seed] if args.seed is not None else cfg.seeds
    for s in seeds:
        summary = run_single(cfg, s)
        print(json.dumps(summary, sort_keys=True))


def _cmd_sweep(args):
    cfg = _load_cfg(args)
    counts = [int(c) for c in args.counts.split(",")]
    methods = args.methods.split(",") if args.methods else None
    if args.seed is not None:
        cfg = cfg.replace(seeds=[args.seed])
    print(run_sweep(cfg, counts, methods))


def _cmd_eval(args):
    spec = envs.make_env(args.env)
    policy = policyopt.GaussianPolicy.load(args.policy)
    R = float(np.mean(policyopt.evaluate_policy(spec, policy, args.episodes)))
    R_random, R_expert = estimate_baselines(spec, args.episodes, cache_dir=args.out)
    print(json.dumps({"mean_return": R, "normalized_score": normalized_score(R, R_random, R_expert)}))


def _cmd_baselines(args):
    spec = envs.make_env(args.env)
    R_random, R_expert = estimate_baselines(spec, args.episodes, cache_dir=args.out)
    print(json.dumps({"env": spec.name, "R_random": R_random, "R_expert": R_expert}))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lyapstab", description="Imitation from state-only demonstrations "
                                "through learned Lyapunov-like landscapes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp, method=True):
        sp.add_argument("--env", choices=envs.ENV_NAMES)
        if method:
            sp.add_argument("--method", choices=METHODS)
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")

    g = sub.add_parser("gen-data", help="collect expert trajectories to a .jsonl file")
    g.add_argument("--env", choices=envs.ENV_NAMES, required=True)
    g.add_argument("--count", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="dataset path (.jsonl)")
    g.set_defaults(fn=_cmd_gen_data)

    t = sub.add_parser("train-proxy", help="fit a landscape to a dataset")
    common(t)
    t.add_argument("--dataset")
    t.add_argument("--out-file", default="proxy.json")
    t.set_defaults(fn=_cmd_train_proxy)

    r = sub.add_parser("train", help="run the configured method end to end")
    common(r)
    r.set_defaults(fn=_cmd_train)

    s = sub.add_parser("sweep", help="trajectory-count sweep")
    common(s)
    s.add_argument("--counts", default="5,10,15,20")
    s.add_argument("--methods", help="comma-separated methods (default: the config's)")
    s.set_defaults(fn=_cmd_sweep)

    e = sub.add_parser("eval", help="evaluate a saved policy")
    e.add_argument("--env", choices=envs.ENV_NAMES, required=True)
    e.add_argument("--policy", required=True)
    e.add_argument("--episodes", type=int, default=10)
    e.add_argument("--out", default="out", help="baseline cache directory")
    e.set_defaults(fn=_cmd_eval)

    b = sub.add_parser("baselines", help="random and expert reference returns")
    b.add_argument("--env", choices=envs.ENV_NAMES, required=True)
    b.add_argument("--episodes", type=int, default=10)
    b.add_argument("--out", default="out", help="baseline cache directory")
    b.set_defaults(fn=_cmd_baselines)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    args.fn(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
