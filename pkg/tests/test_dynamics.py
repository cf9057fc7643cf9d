import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from imsm.dynamics import (SimConfig, SystemSpec, drift, drift_diagonal, generate_dataset, simulate,
                           simulate_ensemble)
from imsm.errors import ConfigError, DivergenceError, ShapeError
from imsm.rng import stream

SYSTEMS = [SystemSpec("vanderpol", {"c": 0.5}, 0.05), SystemSpec("swimmer", {"gamma": 0.1}, 1.0),
           SystemSpec("lorenz63", {}, 10.0), SystemSpec("lorenz96", {"N": 5, "F": 8.0}, 0.05),
           SystemSpec("ou1d", {"theta": 1.0}, 0.5)]


def test_vanderpol_values():
    v = SystemSpec("vanderpol", {"c": 0.5}, 0.05)
    np.testing.assert_array_equal(drift(v, [0.0, 0.0]), [0.0, 0.0])
    np.testing.assert_array_equal(drift(v, [1.0, 2.0]), [2.0, -1.0])


def test_lorenz96_homogeneous_fixed_point():
    np.testing.assert_array_equal(drift(SystemSpec("lorenz96", {"N": 5, "F": 8.0}, 0.05), np.full(5, 8.0)),
                                  np.zeros(5))


def test_lorenz63_values():
    np.testing.assert_allclose(drift(SystemSpec("lorenz63", {}, 10.0), [1.0, 1.0, 1.0]), [0.0, 26.0, -5.0 / 3.0])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=5, max_size=5))
def test_lorenz96_advection_conserves_energy(x):
    x = np.array(x)
    system = SystemSpec("lorenz96", {"N": 5, "F": 0.0}, 0.0)
    advection = drift(system, x) + x
    assert abs(np.dot(x, advection)) <= 1e-9 * max(1.0, np.sum(np.abs(x)) ** 3)


@pytest.mark.parametrize("system", SYSTEMS, ids=lambda s: s.kind)
def test_drift_diagonal_matches_finite_differences(system):
    x = np.random.default_rng(0).standard_normal((6, system.dim))
    h = 1e-6
    fd = np.column_stack([(drift(system, x + h * e)[:, i] - drift(system, x - h * e)[:, i]) / (2 * h)
                          for i, e in enumerate(np.eye(system.dim))])
    np.testing.assert_allclose(drift_diagonal(system, x), fd, rtol=1e-6, atol=1e-6)


def test_system_validation():
    with pytest.raises(ConfigError):
        SystemSpec("duffing", {}, 1.0)
    with pytest.raises(ConfigError):
        SystemSpec("lorenz96", {"N": 3}, 1.0)
    with pytest.raises(ConfigError):
        SystemSpec("vanderpol", {"c": 0.5}, -1.0)
    with pytest.raises(ConfigError):
        SystemSpec("vanderpol", {"mu": 0.5}, 1.0)
    with pytest.raises(ShapeError):
        drift(SystemSpec("vanderpol", {}, 0.0), np.zeros(3))


def test_ou_stationary_variance():
    system = SystemSpec("ou1d", {"theta": 1.0}, 0.5)
    rngs = [stream(5, 0, r) for r in range(100)]
    states, alive = simulate_ensemble(system, np.zeros((100, 1)), 1e-2, 10_000, 1_000, 1, rngs)
    assert alive.all()
    # 10^6 post-burn-in states; Euler-Maruyama bias is D*dt/2 at this dt
    assert abs(states.var() - 0.5) <= 0.05


def test_zero_steps_gives_empty_trajectory():
    traj = simulate(SystemSpec("ou1d", {}, 0.5), [0.0], SimConfig(dt=1e-2, n_steps=0, burn_in_steps=0))
    assert traj.shape == (0, 1)


def test_same_seed_same_trajectory():
    cfg = SimConfig(dt=1e-3, n_steps=500, burn_in_steps=10, seed=3)
    system = SYSTEMS[0]
    assert np.array_equal(simulate(system, [1.0, 0.0], cfg), simulate(system, [1.0, 0.0], cfg))


def test_dataset_equals_trajectory_for_single_unstrided_run():
    system = SYSTEMS[1]
    cfg = SimConfig(dt=1e-3, n_steps=300, burn_in_steps=20, stride=1, n_trajectories=1, seed=9)
    cloud = generate_dataset(system, cfg)
    np.testing.assert_array_equal(cloud.points, simulate(system, np.zeros(2), cfg))


def test_stride_and_trajectory_major_order():
    system = SYSTEMS[0]
    cfg = SimConfig(dt=1e-3, n_steps=100, burn_in_steps=0, stride=10, n_trajectories=3, seed=2)
    cloud = generate_dataset(system, cfg)
    assert cloud.points.shape == (30, 2)
    states, _ = simulate_ensemble(system, np.tile([1.0, 0.0], (3, 1)), 1e-3, 100, 0, 1,
                                  [stream(2, 0, r) for r in range(3)])
    np.testing.assert_array_equal(cloud.points[10:20], states[9::10, 1, :])


def test_subsampling_keeps_order_and_size():
    cfg = SimConfig(dt=1e-3, n_steps=200, burn_in_steps=0, n_trajectories=2, target_n=50, seed=1)
    full = generate_dataset(SYSTEMS[0], SimConfig(dt=1e-3, n_steps=200, burn_in_steps=0, n_trajectories=2, seed=1))
    sub = generate_dataset(SYSTEMS[0], cfg)
    assert sub.N == 50
    rows = {tuple(r) for r in full.points}
    assert all(tuple(r) in rows for r in sub.points)


def test_deterministic_vanderpol_reaches_limit_cycle():
    system = SystemSpec("vanderpol", {"c": 0.5}, 0.0)
    traj = simulate(system, [2.0, 0.0], SimConfig(dt=1e-3, n_steps=40_000, burn_in_steps=0))
    tail = traj[-10_000:]
    radius = np.linalg.norm(tail, axis=1)
    assert radius.max() < 5.0
    assert radius.min() > 0.5


def test_blowup_is_reported_with_step():
    system = SystemSpec("swimmer", {"gamma": 0.1}, 0.0)
    with pytest.raises(DivergenceError) as info:
        simulate_ensemble(system, [[50.0, 0.0]], 0.1, 10, 0, 1, [stream(0, 0, 0)])
    assert info.value.step is not None


def test_blowup_can_be_dropped():
    system = SystemSpec("swimmer", {"gamma": 0.1}, 0.0)
    states, alive = simulate_ensemble(system, [[50.0, 0.0], [0.5, 0.0]], 0.1, 10, 0, 1,
                                      [stream(0, 0, 0), stream(0, 0, 1)], on_blowup="drop")
    assert alive.tolist() == [False, True]
    assert np.isnan(states[-1, 0]).all() and np.isfinite(states[:, 1]).all()


def test_uniform_box_stays_inside():
    system = SystemSpec("uniform-box", {"lo": 0.0, "hi": 1.0, "dim": 2}, 1.0)
    states, _ = simulate_ensemble(system, [[0.5, 0.5]], 1e-2, 2_000, 0, 1, [stream(0, 0, 0)])
    assert states.min() >= 0.0 and states.max() <= 1.0
