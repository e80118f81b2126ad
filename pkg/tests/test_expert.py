import json

import numpy as np
import pytest

from lyapstab import envs, expert
from lyapstab.expert import DatasetError, DatasetParseError, Trajectory


@pytest.fixture(scope="module")
def car_data():
    return expert.collect_trajectories("car", 10, seed=0)


def test_car_expert_zero_at_equilibrium():
    spec = envs.make_env("car")
    u = expert.expert_action(spec, spec.model.equilibrium())
    assert np.allclose(u, 0.0, atol=1e-12)


def test_car_expert_steers_toward_path():
    spec = envs.make_env("car")
    v = spec.model.target_speed
    # path along +x; car to the right of it (path on its left, d_e > 0) must steer left
    u = expert.expert_action(spec, np.array([1.0, -0.5, 0.0, v]))
    assert u[1] > 0
    u = expert.expert_action(spec, np.array([1.0, 0.5, 0.0, v]))
    assert u[1] < 0


def test_car_expert_speed_sign():
    spec = envs.make_env("car")
    assert expert.expert_action(spec, np.array([1.0, 0.0, 0.0, 0.1]))[0] > 0
    assert expert.expert_action(spec, np.array([1.0, 0.0, 0.0, 0.9]))[0] < 0


def test_quadrotor_expert_trim_at_hover():
    spec = envs.make_env("quadrotor")
    assert np.allclose(expert.expert_action(spec, np.zeros(12)), spec.model.trim_action())


def test_acrobot_expert_holds_upright():
    spec = envs.make_env("acrobot")
    assert np.allclose(expert.expert_action(spec, spec.model.equilibrium()), 0.0, atol=1e-9)


def test_lqr_gain_stabilises_sampled_linearisation():
    spec = envs.make_env("acrobot")
    K, P = expert._acrobot_gain(spec)
    x_eq = spec.model.equilibrium()
    # closed-loop sampled map around upright, by finite differences of one step
    h = 1e-6
    J = np.zeros((4, 4))
    for i in range(4):
        e = np.zeros(4)
        e[i] = h
        up = envs.rk4_step(spec, x_eq + e, -(e @ K.T))
        dn = envs.rk4_step(spec, x_eq - e, (e @ K.T))
        J[:, i] = expert._angle_err((up - dn)[None])[0] / (2 * h)
    assert np.max(np.abs(np.linalg.eigvals(J))) < 1.0
    assert np.all(np.linalg.eigvalsh(0.5 * (P + P.T)) > 0)


def test_collect_count_and_determinism(car_data):
    again = expert.collect_trajectories("car", 10, seed=0)
    assert len(car_data) == 10
    assert all(a == b for a, b in zip(car_data, again))


def test_car_trajectories_end_inside_gate(car_data):
    for t in car_data:
        assert np.linalg.norm(t.states[-1]) < 0.05
        assert t.states.shape[1] == 3


def test_car_expert_monotone_convergence(car_data):
    for t in car_data:
        norms = np.linalg.norm(t.states, axis=1)
        k = max(1, len(norms) // 10)
        assert norms[-k:].mean() < norms[:k].mean()


def test_paper_scale_budget():
    trajs = expert.collect_trajectories("car", 18, seed=1)
    assert len(trajs) == 18


@pytest.mark.parametrize("name", ["quadrotor", "acrobot"])
def test_other_experts_pass_gate(name):
    trajs = expert.collect_trajectories(name, 3, seed=0)
    spec = envs.make_env(name)
    assert len(trajs) == 3
    for t in trajs:
        assert t.states.shape[1] == spec.residual_dim
        assert np.linalg.norm(t.states[-1]) < 0.05


def test_acrobot_expert_swings_up_from_every_reset():
    spec = envs.make_env("acrobot")
    X = expert.rollout_expert(spec, range(20))
    final = np.linalg.norm(envs.residual(spec, X[:, -1]), axis=1)
    assert np.all(final < 0.05)


def test_failing_expert_raises(monkeypatch):
    spec = envs.make_env("car")
    monkeypatch.setattr(expert, "expert_action_batch", lambda s, X, t=None: np.zeros((len(X), 2)))
    with pytest.raises(DatasetError):
        expert.collect_trajectories(spec, 2, horizon=20)


def test_transitions_never_cross_trajectories():
    a = Trajectory(np.arange(6.0).reshape(3, 2), 0.1, "car")
    b = Trajectory(np.arange(100.0, 104.0).reshape(2, 2), 0.1, "car")
    B = expert.transitions([a, b])
    assert len(B) == 3
    assert np.array_equal(B.s, [[0, 1], [2, 3], [100, 101]])
    assert np.array_equal(B.s2, [[2, 3], [4, 5], [102, 103]])


def test_transitions_reject_mixed_dt():
    a = Trajectory(np.zeros((3, 2)), 0.1, "car")
    b = Trajectory(np.zeros((3, 2)), 0.2, "car")
    with pytest.raises(DatasetError):
        expert.transitions([a, b])


def test_trajectory_validation():
    with pytest.raises(DatasetError):
        Trajectory(np.zeros((1, 3)), 0.1, "car")
    with pytest.raises(DatasetError):
        Trajectory(np.zeros((4, 3)), 0.0, "car")


def test_dataset_round_trip(tmp_path, car_data):
    path = tmp_path / "car.jsonl"
    expert.save_dataset(car_data, path)
    loaded = expert.load_dataset(path)
    assert loaded == car_data


def test_dataset_has_no_actions(tmp_path, car_data):
    path = tmp_path / "car.jsonl"
    expert.save_dataset(car_data[:2], path)
    for line in path.read_text().splitlines():
        assert set(json.loads(line)) <= {"env", "dt", "seed", "states"}


def test_load_rejects_wrong_dimension(tmp_path):
    path = tmp_path / "bad.jsonl"
    good = {"env": "car", "dt": 0.1, "seed": 0, "states": [[0, 0, 0], [1, 1, 1]]}
    bad = {"env": "car", "dt": 0.1, "seed": 1, "states": [[0, 0, 0], [1, 1]]}
    path.write_text(json.dumps(good) + "\n" + json.dumps(bad) + "\n")
    with pytest.raises(DatasetParseError, match="line 2") as info:
        expert.load_dataset(path)
    assert info.value.line == 2


def test_load_rejects_bad_json(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text("{not json\n")
    with pytest.raises(DatasetParseError, match="line 1"):
        expert.load_dataset(path)


def test_load_empty_file(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    with pytest.raises(DatasetError):
        expert.load_dataset(path)
