import numpy as np
import pytest

from lyapstab import envs, expert, gaifo, policyopt as po
from lyapstab.expert import TransitionBatch
from lyapstab.numkit import AdamState, MlpParams, init_mlp


def _half(s, s2):
    return np.full(len(s), 0.5)


def _batch(rng, n=32, d=3, shift=0.0):
    s = rng.normal(size=(n, d)) + shift
    return TransitionBatch(s, s + 0.1 * rng.normal(size=(n, d)), 0.1)


def _const_disc(logit, d=3):
    return gaifo.Discriminator(MlpParams([(np.zeros((1, 2 * d)), np.array([logit]))]))


def test_loss_at_uninformative_point():
    rng = np.random.default_rng(0)
    e, a = _batch(rng), _batch(rng, shift=2.0)
    assert gaifo.disc_loss(_half, e, a) == pytest.approx(2 * np.log(2), abs=1e-12)
    assert gaifo.disc_loss(_half, a, e) == gaifo.disc_loss(_half, e, a)
    assert gaifo.disc_loss(_const_disc(0.0), e, a) == pytest.approx(2 * np.log(2), abs=1e-12)


def test_loss_perfect_discrimination_limit():
    rng = np.random.default_rng(0)
    e, a = _batch(rng, shift=5.0), _batch(rng, shift=-5.0)
    D = lambda s, s2: (s[:, 0] > 0).astype(float)  # noqa: E731
    assert gaifo.disc_loss(D, e, a) < 1e-5


def test_loss_finite_under_extreme_logits():
    rng = np.random.default_rng(0)
    e, a = _batch(rng), _batch(rng)
    for logit in (-1e4, 1e4):
        assert np.isfinite(gaifo.disc_loss(_const_disc(logit), e, a))
        assert np.all(np.isfinite(gaifo.gaifo_reward(_const_disc(logit), a.s, a.s2)))


def test_loss_requires_both_batches():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        gaifo.disc_loss(_half, _batch(rng), _batch(rng).subset(np.array([], dtype=int)))


def test_reward_values():
    D = _const_disc(0.0)
    assert gaifo.gaifo_reward(D, np.zeros(3), np.zeros(3)) == pytest.approx(np.log(2))
    assert gaifo.gaifo_reward(_const_disc(-50.0), np.zeros(3), np.zeros(3)) == pytest.approx(1e-6, rel=1e-3)
    assert gaifo.gaifo_reward(D, np.zeros(3), np.zeros(3), form="logit") == pytest.approx(0.0)


def test_reward_monotone_in_probability():
    logits = np.log(np.linspace(0.01, 0.99, 99) / (1 - np.linspace(0.01, 0.99, 99)))
    r = [gaifo.gaifo_reward(_const_disc(l), np.zeros(3), np.zeros(3)) for l in logits]
    assert np.all(np.diff(r) > 0)


def test_grad_matches_fd():
    rng = np.random.default_rng(1)
    D = gaifo.make_discriminator(2, rng, hidden=(6,))
    e, a = _batch(rng, 10, 2), _batch(rng, 12, 2, shift=1.0)
    loss, grads = gaifo.disc_loss_grad(D, e, a)
    assert loss == pytest.approx(gaifo.disc_loss(D, e, a))
    base, h = D.params.flat(), 1e-6

    def f(flat):
        layers, k = [], 0
        for W, b in D.params.layers:
            layers.append((flat[k:k + W.size].reshape(W.shape), flat[k + W.size:k + W.size + b.size]))
            k += W.size + b.size
        return gaifo.disc_loss(gaifo.Discriminator(MlpParams(layers)), e, a)

    fd = np.array([(f(base + h * v) - f(base - h * v)) / (2 * h) for v in np.eye(len(base))])
    assert np.allclose(MlpParams(grads).flat(), fd, rtol=1e-4, atol=1e-8)


def test_no_drift_on_indistinguishable_data():
    rng = np.random.default_rng(2)
    D = gaifo.make_discriminator(3, rng)
    D = gaifo.Discriminator(MlpParams([(W * 0.0, b * 0.0) for W, b in D.params.layers]))
    data = _batch(rng, 64)
    loss, grads = gaifo.disc_loss_grad(D, data, data)
    assert loss == pytest.approx(2 * np.log(2), abs=1e-12)
    assert np.max(np.abs(MlpParams(grads).flat())) < 1e-12


def test_separates_expert_from_random_policy():
    spec = envs.make_env("car")
    trajs = expert.collect_trajectories(spec, 10, seed=0)
    held = expert.collect_trajectories(spec, 5, seed=50)
    rng = np.random.default_rng(0)

    def random_batch(seed):
        r = np.random.default_rng(seed)
        X = envs.reset_states(spec, range(seed * 100, seed * 100 + 40))
        s, s2 = [], []
        for _ in range(30):
            U = r.uniform(spec.action_low, spec.action_high, size=(len(X), 2))
            X2 = envs.rk4_step(spec, X, U)
            s.append(envs.residual(spec, X))
            s2.append(envs.residual(spec, X2))
            X = X2
        return TransitionBatch(np.concatenate(s), np.concatenate(s2), spec.dt)

    D = gaifo.make_discriminator(3, rng)
    opt = AdamState.fresh(D.params)
    cfg = gaifo.GaifoConfig(lr=1e-3)
    ex = expert.transitions(trajs)
    for it in range(150):
        D, opt, _ = gaifo.disc_update(D, opt, ex, random_batch(1), cfg, rng)
    assert gaifo.disc_accuracy(D, expert.transitions(held), random_batch(2)) > 0.9


def test_train_gaifo_schema_and_isolation():
    spec = envs.make_env("car")
    trajs = expert.collect_trajectories(spec, 3, seed=0)
    rng = np.random.default_rng(0)
    pol, vf = po.make_policy(spec, rng), po.make_valuefn(spec, rng)
    D = gaifo.make_discriminator(3, rng)
    d_before, p_before = D.params.flat().copy(), pol.mean_net.flat().copy()
    cfg = po.PpoConfig(steps_per_iter=256, n_envs=8, epochs=2, n_eval=2)
    pol2, _, curve, D2 = gaifo.train_gaifo(spec, trajs, pol, vf, D, cfg, 2, baselines=(-250.0, -2.0))
    assert len(curve) == 2
    assert set(po.CURVE_COLUMNS) <= set(curve[0])
    assert {"reward_disc_loss", "reward_disc_acc"} <= set(curve[0])
    # inputs untouched; outputs moved
    assert np.array_equal(D.params.flat(), d_before) and np.array_equal(pol.mean_net.flat(), p_before)
    assert not np.array_equal(D2.params.flat(), d_before)
    _, _, none, D3 = gaifo.train_gaifo(spec, trajs, pol, vf, D, cfg, 0)
    assert none == [] and np.array_equal(D3.params.flat(), d_before)


def test_config_validation():
    with pytest.raises(ValueError):
        gaifo.GaifoConfig(reward_form="wasserstein")
    with pytest.raises(ValueError):
        gaifo.Discriminator(init_mlp([3, 4, 1], np.random.default_rng(0)))
