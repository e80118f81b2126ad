import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lyapstab import lyapunov
from lyapstab.expert import Trajectory, TransitionBatch, transitions
from lyapstab.lyapunov import ConfigError, ProxyModel, ProxyTrainConfig
from lyapstab.numkit import MlpParams, init_mlp, mlp_forward


def square(X):
    return np.sum(np.asarray(X) ** 2, axis=-1)


def _batch(s, s2, dt):
    return TransitionBatch(np.atleast_2d(np.asarray(s, float)).reshape(-1, 1),
                           np.atleast_2d(np.asarray(s2, float)).reshape(-1, 1), dt)


def _cfg(**kw):
    base = dict(c=1.0, beta1=1.0, epochs=1)
    base.update(kw)
    return ProxyTrainConfig(**base)


def test_finite_diff_lie_examples():
    assert lyapunov.finite_diff_lie(lambda x: 2.0, [0.0], [0.0], 0.5) == 0.0
    V = ProxyModel(MlpParams([(np.array([[1.0]]), np.array([0.0]))]))
    assert lyapunov.finite_diff_lie(V, [2.0], [1.0], 0.5) == pytest.approx(-2.0)
    assert lyapunov.finite_diff_lie(V, [0.7], [0.7], 0.1) == 0.0
    with pytest.raises(ValueError):
        lyapunov.finite_diff_lie(V, [1.0], [1.0], 0.0)


def test_lie_training_grad_has_no_s2_part():
    rng = np.random.default_rng(0)
    V = ProxyModel(init_mlp([2, 8, 1], rng))
    s, s2, dt = rng.normal(size=2), rng.normal(size=2), 0.1
    grads = lyapunov.lie_training_grad(V, s, s2, dt)
    flat = MlpParams(grads).flat()
    # finite differences of (V_theta(s) term only) / dt with V(s2) frozen
    frozen = float(V.value(s2))
    base = V.params.flat()
    fd = np.zeros_like(base)
    h = 1e-6
    for i in range(len(base)):
        for sign in (1, -1):
            p = base.copy()
            p[i] += sign * h
            val = (frozen - float(_unflat(V.params, p).value(s))) / dt
            fd[i] += sign * val / (2 * h)
    assert np.allclose(flat, fd, rtol=1e-4, atol=1e-7)


def _unflat(params, flat):
    layers, k = [], 0
    for W, b in params.layers:
        Wn = flat[k:k + W.size].reshape(W.shape)
        k += W.size
        bn = flat[k:k + b.size]
        k += b.size
        layers.append((Wn, bn))
    return ProxyModel(MlpParams(layers))


def test_llpm_hand_example():
    terms = lyapunov.loss_terms(square, _batch([1.0], [0.8], 0.2), _cfg(), "llpm")
    assert terms["anchor"] == 0 and terms["positivity"] == 0
    assert terms["mean_lie"] == pytest.approx(-1.8)
    assert terms["rate"] == pytest.approx(0.64)
    assert lyapunov.llpm_loss(square, _batch([1.0], [0.8], 0.2), _cfg()) == pytest.approx(0.64)


def test_llpm_hinge_example():
    V = lambda X: -np.asarray(X)[:, 0]  # noqa: E731
    terms = lyapunov.loss_terms(V, _batch([2.0], [2.0 - 1e-9], 1.0), _cfg(), "llpm")
    assert terms["positivity"] == pytest.approx(2.0)


def test_llpm_zero_for_exact_rate():
    # V(x) = x with steps of exactly -c * dt
    V = lambda X: np.asarray(X)[:, 0]  # noqa: E731
    b = _batch([1.0, 0.5, 0.3], [0.9, 0.4, 0.2], 0.1)
    assert lyapunov.llpm_loss(V, b, _cfg()) == pytest.approx(0.0, abs=1e-20)


def test_risk_examples():
    assert lyapunov.lyapunov_risk_loss(square, _batch([1.0], [1.2], 0.2)) == pytest.approx(2.2)
    assert lyapunov.lyapunov_risk_loss(square, _batch([1.0], [0.5], 0.2)) == 0.0


def test_risk_ignores_rate_magnitude_llpm_does_not():
    V = lambda X: np.asarray(X)[:, 0]  # noqa: E731
    slow = _batch([1.0], [1.0 - 0.1 * 0.1], 0.1)  # Lie = -0.1 c
    fast = _batch([1.0], [1.0 - 1.0 * 0.1], 0.1)  # Lie = -c
    assert lyapunov.lyapunov_risk_loss(V, slow) == lyapunov.lyapunov_risk_loss(V, fast) == 0.0
    assert lyapunov.llpm_loss(V, slow, _cfg()) > 0.0
    assert lyapunov.llpm_loss(V, fast, _cfg()) == pytest.approx(0.0, abs=1e-20)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 1.0), st.floats(0.1, 5.0), st.floats(0.01, 5.0))
def test_losses_non_negative(seed, dt, c, beta1):
    rng = np.random.default_rng(seed)
    V = ProxyModel(init_mlp([3, 8, 1], rng))
    b = TransitionBatch(rng.normal(size=(16, 3)) * 3, rng.normal(size=(16, 3)) * 3, dt)
    cfg = ProxyTrainConfig(c=c, beta1=beta1)
    assert lyapunov.llpm_loss(V, b, cfg) >= 0.0
    assert lyapunov.lyapunov_risk_loss(V, b, cfg) >= 0.0


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.05, 3.0), min_size=1, max_size=6), st.floats(0.5, 2.0), st.floats(0.05, 0.5))
def test_zero_loss_characterisation(xs, c, dt):
    # V(x) = x on positive states descending at exactly -c gives zero loss ...
    V = lambda X: np.asarray(X)[:, 0]  # noqa: E731
    xs = np.array(xs)
    cfg = ProxyTrainConfig(c=c, beta1=1.0)
    exact = _batch(xs, xs - c * dt, dt)
    assert lyapunov.llpm_loss(V, exact, cfg) == pytest.approx(0.0, abs=1e-18)
    # ... and breaking any of the three conditions makes it positive
    assert lyapunov.llpm_loss(V, _batch(xs, xs - 0.5 * c * dt, dt), cfg) > 0
    assert lyapunov.llpm_loss(lambda X: V(X) + 0.1, exact, cfg) > 0
    assert lyapunov.llpm_loss(V, _batch(-xs, -xs - c * dt, dt), cfg) > 0


@pytest.mark.parametrize("kind", ["llpm", "risk"])
def test_loss_and_grad_matches_stop_gradient_fd(kind):
    rng = np.random.default_rng(5)
    params = init_mlp([2, 10, 1], rng)
    b = TransitionBatch(rng.normal(size=(12, 2)), rng.normal(size=(12, 2)), 0.1)
    cfg = ProxyTrainConfig(beta1=0.7, loss=kind)
    loss, grads = lyapunov.loss_and_grad(params, b, cfg)
    assert loss == pytest.approx(lyapunov.loss_terms(ProxyModel(params), b, cfg)["total"])
    frozen = mlp_forward(params, b.s2)[:, 0]

    def frozen_loss(p):
        model = _unflat(params, p)
        v0 = float(model.value(np.zeros(2)))
        vs = model.value(b.s)
        lie = (frozen - vs) / b.dt
        rate = cfg.beta1 * np.mean((cfg.c + lie) ** 2) if kind == "llpm" else np.mean(np.maximum(0, lie))
        return v0**2 + np.mean(np.maximum(0, -vs)) + rate

    base = params.flat()
    analytic = MlpParams(grads).flat()
    h = 1e-6
    fd = np.array([(frozen_loss(base + h * e) - frozen_loss(base - h * e)) / (2 * h) for e in np.eye(len(base))])
    rel = np.abs(fd - analytic) / np.maximum(np.abs(fd) + np.abs(analytic), 1e-8)
    assert np.max(rel) < 1e-3


def test_growth_floor_shape():
    X = np.array([[0.0, 0.0], [3.0, 4.0]])
    f = lyapunov.growth_floor(X, 0.5, 0.1)
    assert f[0] == 0.0
    assert f[1] == pytest.approx(0.5 * (np.sqrt(25.01) - 0.1))
    assert lyapunov.growth_floor(np.array([[1e-3]]), 1.0, 0.1)[0] == pytest.approx(1e-6 / 0.2, rel=1e-3)


def test_margin_grad_matches_fd():
    rng = np.random.default_rng(2)
    params = init_mlp([2, 6, 1], rng)
    X = rng.normal(size=(20, 2)) * 2
    loss, grads = lyapunov.margin_loss_and_grad(params, X, 0.5, 0.1)
    base, analytic = params.flat(), MlpParams(grads).flat()
    h = 1e-6

    def f(p):
        return lyapunov.margin_loss_and_grad(_unflat(params, p).params, X, 0.5, 0.1)[0]

    fd = np.array([(f(base + h * e) - f(base - h * e)) / (2 * h) for e in np.eye(len(base))])
    assert np.allclose(fd, analytic, rtol=1e-4, atol=1e-7)
    assert loss >= 0


def test_config_validation():
    with pytest.raises(ConfigError):
        ProxyTrainConfig(c=0)
    with pytest.raises(ConfigError):
        ProxyTrainConfig(beta1=-1)
    with pytest.raises(ConfigError):
        ProxyTrainConfig(loss="other")
    with pytest.raises(ConfigError):
        ProxyTrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        ProxyTrainConfig(margin_box=0)


def _toy_dataset():
    # 1-D exponential decay x' = -x sampled at dt = 0.1
    trajs = []
    for x0 in (1.0, -0.8, 0.5, -1.2):
        xs = x0 * np.exp(-0.1 * np.arange(40))
        trajs.append(Trajectory(xs[:, None], 0.1, "toy"))
    return trajs


def test_train_proxy_deterministic_and_reports():
    cfg = ProxyTrainConfig(epochs=30, batch_size=32, seed=3)
    a = lyapunov.train_proxy(_toy_dataset(), cfg)
    b = lyapunov.train_proxy(_toy_dataset(), cfg)
    assert np.array_equal(a.params.flat(), b.params.flat())
    for key in ("final_loss", "terms", "neg_lie_fraction", "mean_lie", "v_origin"):
        assert key in a.report
    assert a.env == "toy"


def test_train_proxy_learns_toy_landscape():
    cfg = ProxyTrainConfig(epochs=600, batch_size=64, seed=0)
    V = lyapunov.train_proxy(_toy_dataset(), cfg)
    B = transitions(_toy_dataset())
    assert abs(V.report["v_origin"]) < 0.05
    assert V.report["neg_lie_fraction"] > 0.9
    assert np.mean(V.value(B.s) > 0) > 0.95


def test_train_proxy_nonfinite_raises():
    bad = [Trajectory(np.array([[0.0], [np.nan]]), 0.1, "toy")]
    with pytest.raises(lyapunov.TrainingError, match="epoch 0"):
        lyapunov.train_proxy(bad, ProxyTrainConfig(epochs=2, margin_samples=0))


def test_quadratic_proxy():
    Q = lyapunov.quadratic_proxy([1.0, 1.0])
    assert Q.value(np.zeros(2)) == 0.0
    assert Q.value(np.array([1.0, 2.0])) == 5.0
    X = np.random.default_rng(0).normal(size=(10_000, 2)) * 10
    assert np.all(Q.value(X) >= 0)
    with pytest.raises(ConfigError):
        lyapunov.quadratic_proxy([1.0, 0.0])


def test_proxy_save_load(tmp_path):
    V = lyapunov.train_proxy(_toy_dataset(), ProxyTrainConfig(epochs=3))
    V.save(tmp_path / "v.json")
    W = ProxyModel.load(tmp_path / "v.json")
    assert np.array_equal(V.params.flat(), W.params.flat())
    assert W.env == "toy" and W.report == V.report and W.config["epochs"] == 3


def test_train_proxy_uses_custom_sampler():
    seen = []

    def sampler(rng, n, half):
        seen.append((n, half.copy()))
        return np.full((n, 1), 3.0)

    V = lyapunov.train_proxy(_toy_dataset(), ProxyTrainConfig(epochs=2, margin_samples=16, margin_box=2.0),
                             sampler=sampler)
    assert seen and all(n in (16, 4096) for n, _ in seen)
    assert np.allclose(seen[0][1], [2.0 * 1.2])
    assert "margin_violation" in V.report
