import json

import numpy as np
import pytest

from imsm import autodiff as ad
from imsm.dynamics import SystemSpec
from imsm.errors import CompatibilityError, ConfigError, DataError, ShapeError, UsageError
from imsm.velocity import (AnalyticField, AugLagState, Box, ScoreCache, VelocityModel, VelocityTrainConfig,
                           auglag_merit, energy_term, full_residual_norm, make_velocity_model, pinn_loss,
                           residual, residual_vector, train_pinn, train_velocity)
from conftest import central_diff, rel_err

GAUSS = AnalyticField(lambda x: -x, lambda x: -float(x.shape[1]) * np.ones(x.shape[0]))


def _with_biases(vel, seed=0):
    rng = np.random.default_rng(seed)
    net = vel.net.with_arrays([a + (0.1 * rng.standard_normal(a.shape) if a.ndim == 1 else 0)
                               for a in vel.net.arrays()])
    return VelocityModel(net, vel.known_mask, vel.D, vel.known_system, vel.input_shift, vel.input_scale,
                         vel.output_scale, vel.collocation)


def _lorenz_model(seed=0, output_scale=1.0):
    system = SystemSpec("lorenz63", {"c1": 10.0, "c2": 28.0, "c3": 8.0 / 3.0}, 10.0)
    pts = np.random.default_rng(seed).standard_normal((50, 3)) * [8, 9, 8] + [0, 0, 25]
    vel = make_velocity_model(3, (8, 8), np.random.default_rng(seed), 10.0, (False, True, True), system, pts)
    vel = _with_biases(vel, seed)
    return VelocityModel(vel.net, vel.known_mask, vel.D, vel.known_system, vel.input_shift, vel.input_scale,
                         output_scale, vel.collocation), pts


# --------------------------------------------------------------------------
# residual operator


@pytest.mark.parametrize("d", [1, 2, 3])
@pytest.mark.parametrize("D", [0.05, 0.5, 10.0])
def test_score_times_D_is_feasible(d, D):
    x = np.random.default_rng(d).uniform(-5, 5, (1000, d))
    r = residual(GAUSS, GAUSS.scaled(D), x, D)
    assert np.max(np.abs(r)) <= 1e-10


def test_feasible_family_in_1d():
    # in 1D every v = D s + c / p with p = exp(-x^2/2) is feasible, since p v - D p' = c
    D, c = 0.5, 0.3
    field = AnalyticField(lambda x: -D * x + c * np.exp(x ** 2 / 2),
                          lambda x: (-D + c * x[:, 0] * np.exp(x[:, 0] ** 2 / 2)))
    x = np.linspace(-2, 2, 101)[:, None]
    r = residual(GAUSS, field, x, D)
    assert np.max(np.abs(r)) <= 1e-12


def test_rotation_added_to_radial_density_is_feasible():
    D = 0.7
    rot = AnalyticField(lambda x: -D * x + np.column_stack([-x[:, 1], x[:, 0]]),
                        lambda x: -2 * D * np.ones(x.shape[0]))
    x = np.random.default_rng(0).standard_normal((200, 2))
    assert np.max(np.abs(residual(GAUSS, rot, x, D))) <= 1e-12
    # zero drift leaves -D(|s|^2 + div s) = -D(|x|^2 - 2)
    zero = AnalyticField(lambda x: np.zeros_like(x), lambda x: np.zeros(x.shape[0]))
    np.testing.assert_allclose(residual(GAUSS, zero, x, D), -D * (np.sum(x * x, axis=1) - 2), rtol=1e-14)


def test_residual_needs_D_for_analytic_fields():
    with pytest.raises(UsageError):
        residual(GAUSS, GAUSS, np.zeros((2, 2)))


def test_model_divergence_matches_finite_differences():
    vel, pts = _lorenz_model(output_scale=3.0)
    x = pts[:5]
    v, div = vel.with_divergence(x)
    np.testing.assert_allclose(v, vel(x), rtol=1e-14)
    h = 1e-5
    fd = sum((vel(x + h * e)[:, k] - vel(x - h * e)[:, k]) / (2 * h) for k, e in enumerate(np.eye(3)))
    assert rel_err(div, fd) < 1e-7


def test_known_components_come_from_the_system():
    vel, _ = _lorenz_model()
    v, div = vel.with_divergence(np.ones((1, 3)))
    assert v[0, 1] == pytest.approx(26.0, abs=1e-12)
    assert v[0, 2] == pytest.approx(-5.0 / 3.0, abs=1e-12)
    # the learned slot contributes d v_0 / d x_0 only; known slots add -1 - 8/3
    jac = ad.jacobian(vel.net, (np.ones(3) - vel.input_shift) / vel.input_scale)
    assert div[0] == pytest.approx(jac[0, 0] / vel.input_scale[0] - 1 - 8 / 3, rel=1e-12)


def test_model_validation():
    system = SystemSpec("lorenz63", {}, 10.0)
    net = ad.init_params((3, 4, 1), rng=np.random.default_rng(0))
    with pytest.raises(ShapeError):
        VelocityModel(net, (False, False, True), 1.0, system)
    with pytest.raises(ConfigError):
        VelocityModel(net, (False, True, True), 1.0, None)
    with pytest.raises(CompatibilityError):
        VelocityModel(net, (False, True, True), 1.0, SystemSpec("vanderpol", {}, 1.0))
    with pytest.raises(ShapeError):
        VelocityModel(None, (False, True, True), 1.0, system)
    with pytest.raises(ConfigError):
        make_velocity_model(3, (4,), np.random.default_rng(0), 1.0, (True, False))
    full = make_velocity_model(3, (4,), np.random.default_rng(0), 1.0, (True, True, True), system)
    assert full.net is None
    np.testing.assert_allclose(full(np.ones(3)), [0.0, 26.0, -5.0 / 3.0], atol=1e-12)


def test_checkpoint_dict_round_trip():
    vel, pts = _lorenz_model()
    back = VelocityModel.from_dict(json.loads(json.dumps(vel.to_dict())))
    np.testing.assert_array_equal(back(pts), vel(pts))
    assert back.to_dict() == vel.to_dict()


# --------------------------------------------------------------------------
# losses


def _gauss_cache(x):
    return ScoreCache.compute(GAUSS, x)


def test_pinn_loss_value_and_gradient():
    vel, pts = _lorenz_model(output_scale=2.0)
    x = pts[:7]
    score = AnalyticField(lambda z: -(z - [0, 0, 25]) / 64, lambda z: -3 / 64 * np.ones(z.shape[0]))
    node = pinn_loss(score, vel, x)
    assert node.value == pytest.approx(np.mean(residual(score, vel, x) ** 2), rel=1e-13)
    f = lambda flat: pinn_loss(score, VelocityModel(vel.net.unflatten(flat), *list(vel.__dict__.values())[1:]),
                               x).value
    assert rel_err(ad.grad_params(node).flatten(), central_diff(f, vel.net.flatten())) < 1e-6
    with pytest.raises(ShapeError):
        pinn_loss(score, vel, np.zeros((0, 3)))


def test_energy_value_and_gradient():
    vel = _with_biases(make_velocity_model(2, (6, 6), np.random.default_rng(1), 0.5))
    colloc = np.random.default_rng(2).uniform(-1, 1, (9, 2))
    node = energy_term(vel, colloc, 4.0)
    assert node.value == pytest.approx(4.0 * np.mean(np.sum(vel(colloc) ** 2, axis=1)), rel=1e-13)
    f = lambda flat: energy_term(vel.__class__(vel.net.unflatten(flat), vel.known_mask, vel.D),
                                 colloc, 4.0).value
    assert rel_err(ad.grad_params(node).flatten(), central_diff(f, vel.net.flatten())) < 1e-6


def test_auglag_merit_value_and_gradient():
    vel = _with_biases(make_velocity_model(2, (6, 6), np.random.default_rng(3), 0.5,
                                           points=np.random.default_rng(4).standard_normal((30, 2))))
    x = np.random.default_rng(5).standard_normal((8, 2))
    colloc = np.random.default_rng(6).uniform(-2, 2, (8, 2))
    lam = np.random.default_rng(7).standard_normal(8)
    mu, n_total = 3.0, 100
    node = auglag_merit(GAUSS, vel, x, lam, mu, colloc, 16.0, n_total)
    r = residual(GAUSS, vel, x)
    expected = 16.0 * np.mean(np.sum(vel(colloc) ** 2, axis=1)) + n_total / 8 * (lam @ r + 0.5 * mu * r @ r)
    assert node.value == pytest.approx(expected, rel=1e-12)

    def f(flat):
        v2 = VelocityModel(vel.net.unflatten(flat), vel.known_mask, vel.D, None, vel.input_shift, vel.input_scale)
        return auglag_merit(GAUSS, v2, x, lam, mu, colloc, 16.0, n_total).value

    assert rel_err(ad.grad_params(node).flatten(), central_diff(f, vel.net.flatten())) < 1e-6
    with pytest.raises(UsageError):
        auglag_merit(GAUSS, vel, x, lam[:5], mu, colloc)


def test_score_cache_and_full_residual():
    x = np.random.default_rng(0).standard_normal((10, 2))
    cache = _gauss_cache(x)
    np.testing.assert_allclose(cache.q, np.sum(x * x, axis=1) - 2, rtol=1e-14)
    vel = make_velocity_model(2, (4,), np.random.default_rng(0), 0.5)
    r = residual_vector(GAUSS, vel, x)
    np.testing.assert_allclose(residual_vector(cache, vel, x), r)
    assert full_residual_norm(GAUSS, vel, x) == pytest.approx(np.sqrt(np.mean(r ** 2)))
    bad = AnalyticField(lambda z: np.full_like(z, np.nan), lambda z: np.zeros(z.shape[0]))
    with pytest.raises(DataError):
        ScoreCache.compute(bad, x)


def test_box_geometry():
    box = Box.around(np.array([[0.0, 1.0], [2.0, 1.0]]), 0.05)
    np.testing.assert_allclose(box.lo, [-0.1, 0.95])
    np.testing.assert_allclose(box.hi, [2.1, 1.05])
    assert box.volume == pytest.approx(2.2 * 0.1)
    s = box.sample(np.random.default_rng(0), 1000)
    assert np.all(s >= box.lo) and np.all(s <= box.hi)


# --------------------------------------------------------------------------
# augmented Lagrangian bookkeeping and training


def _state(best=1.0, mu=2.0):
    return AugLagState(np.zeros(4), mu, best, 0.75, 2.0, 1.0, 5.0, 1e-6)


def test_outer_update_accepts_sufficient_reduction():
    st = _state()
    r = np.full(4, 0.5)
    assert st.outer_update(r) == (True, False)
    np.testing.assert_allclose(st.lam, 2.0 * r)
    assert st.best_rms == 0.5 and st.mu == 2.0


def test_outer_update_rejects_and_caps_penalty():
    st = _state()
    r = np.full(4, 0.8)
    assert st.outer_update(r) == (False, False)
    assert st.mu == 4.0 and np.all(st.lam == 0)
    st.outer_update(r)
    assert st.mu == 5.0
    st.start_shuffle(3)
    assert st.mu == 4.0
    st.start_shuffle(9)
    assert st.mu == 5.0


def test_outer_update_converges_below_epsilon():
    st = _state()
    assert st.outer_update(np.full(4, 1e-7)) == (True, True)
    assert np.all(st.lam == 0)


def test_config_validation():
    for bad in ({"eta": 1.0}, {"a": 1.0}, {"mu_init": 0.0}, {"mu_init": 10.0, "mu_max": 1.0},
                {"collocation": "grid"}, {"constraint_scaling": "median"}, {"n_aug": 0}, {"lr": 0.0}):
        with pytest.raises(ConfigError):
            VelocityTrainConfig(**bad)


def _ou_data(n=400, seed=0):
    return np.random.default_rng(seed).standard_normal((n, 2))


def _tiny_config(**kw):
    base = dict(batch_size=64, n_shuffle=2, n_aug=2, lr=1e-3, hidden=(16, 16), seed=5, log_wall_time=False)
    base.update(kw)
    return VelocityTrainConfig(**base)


def test_training_stops_early_when_already_feasible():
    res = train_velocity(_ou_data(), GAUSS, 0.5, _tiny_config(epsilon=1e9))
    assert res.termination == "epsilon"
    assert len(res.rows) == 1


def test_training_is_deterministic_and_reduces_residual():
    x = _ou_data()
    cfg = _tiny_config(n_shuffle=3, n_aug=3)
    a = train_velocity(x, GAUSS, 0.5, cfg)
    b = train_velocity(x, GAUSS, 0.5, cfg)
    np.testing.assert_equal(a.rows, b.rows)
    np.testing.assert_array_equal(a.model.net.flatten(), b.model.net.flatten())
    np.testing.assert_array_equal(a.lam, b.lam)
    assert len(a.rows) == 1 + 3 * 3
    assert a.termination == "budget"
    assert a.final_rms < a.rows[0]["residual_rms"]
    assert set(a.lambda_stats()) == {"min", "max", "mean"}
    assert a.final_rms == pytest.approx(full_residual_norm(GAUSS, a.model, x))


def test_pinn_baseline_shares_initial_state_and_row_layout():
    x = _ou_data()
    cfg = _tiny_config()
    al = train_velocity(x, GAUSS, 0.5, cfg)
    pinn = train_pinn(x, GAUSS, 0.5, cfg)
    assert pinn.rows[0]["residual_rms"] == al.rows[0]["residual_rms"]
    assert [(r["shuffle"], r["outer_k"]) for r in pinn.rows] == [(r["shuffle"], r["outer_k"]) for r in al.rows]
    assert pinn.final_rms < pinn.rows[0]["residual_rms"]


def test_training_rejects_bad_inputs():
    with pytest.raises(DataError):
        train_velocity(np.zeros((0, 2)), GAUSS, 0.5, _tiny_config())
    system = SystemSpec("vanderpol", {}, 0.05)
    with pytest.raises(ConfigError):
        train_velocity(_ou_data(), GAUSS, 0.5, _tiny_config(), (True, True), system)
