import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from imsm import autodiff as ad
from imsm.errors import ShapeError, UsageError
from conftest import central_diff, rel_err


def _net(d_in, d_out, seed, hidden=(8, 8)):
    rng = np.random.default_rng(seed)
    p = ad.init_params((d_in, *hidden, d_out), 1.0, rng)
    # nonzero biases so every code path carries signal
    return p.with_arrays([a + (0.1 * rng.standard_normal(a.shape) if a.ndim == 1 else 0) for a in p.arrays()])


def _div_loss(params, x, y):
    """mean over batch of |f(x) - y|^2 + (div f)^2, with div through tangents."""
    ctx = ad.DiffContext(params, x, np.eye(params.d_in))
    div = np.einsum("bkk->b", ctx.tangents)
    b = x.shape[0]
    val = float(np.mean(np.sum((ctx.out - y) ** 2, axis=1) + div ** 2))
    tan_bar = np.zeros_like(ctx.tangents)
    idx = np.arange(params.d_in)
    tan_bar[:, idx, idx] = (2 * div / b)[:, None]
    node = ad.ScalarNode(val, params, [(ctx, 2 * (ctx.out - y) / b, tan_bar)])
    return node


@settings(max_examples=15, deadline=None)
@given(d=st.sampled_from([1, 2, 3]), seed=st.integers(0, 10_000))
def test_gradient_of_divergence_loss_matches_finite_differences(d, seed):
    params = _net(d, d, seed)
    rng = np.random.default_rng(seed + 1)
    x = rng.standard_normal((5, d))
    y = rng.standard_normal((5, d))
    g = ad.grad_params(_div_loss(params, x, y)).flatten()
    fd = central_diff(lambda f: _div_loss(params.unflatten(f), x, y).value, params.flatten())
    assert rel_err(g, fd) < 1e-6


@pytest.mark.parametrize("d_in,d_out", [(1, 1), (2, 3), (3, 2)])
def test_jacobian_matches_finite_differences(d_in, d_out):
    params = _net(d_in, d_out, 7)
    x = np.random.default_rng(0).standard_normal(d_in)
    jac = ad.jacobian(params, x)
    h = 1e-6
    fd = np.column_stack([(ad.mlp_forward(params, x + h * e) - ad.mlp_forward(params, x - h * e)) / (2 * h)
                          for e in np.eye(d_in)])
    assert jac.shape == (d_out, d_in)
    assert rel_err(jac, fd) < 1e-7


def test_batched_jacobian_and_divergence_agree():
    params = _net(3, 3, 3)
    x = np.random.default_rng(1).standard_normal((4, 3))
    jac = ad.jacobian(params, x)
    assert jac.shape == (4, 3, 3)
    np.testing.assert_allclose(ad.divergence(params, x), np.trace(jac, axis1=1, axis2=2), rtol=1e-12)
    for i in range(4):
        np.testing.assert_allclose(jac[i], ad.jacobian(params, x[i]), rtol=1e-12)


def test_tangents_are_directional_derivatives():
    params = _net(2, 2, 5)
    x = np.random.default_rng(2).standard_normal((3, 2))
    dirs = np.array([[1.0, 2.0], [-0.5, 0.3]])
    ctx = ad.DiffContext(params, x, dirs)
    jac = ad.jacobian(params, x)
    np.testing.assert_allclose(ctx.tangents, np.einsum("boi,ki->bko", jac, dirs), rtol=1e-10, atol=1e-14)


def test_flatten_and_dict_round_trip_exactly():
    params = _net(2, 3, 11)
    assert np.array_equal(params.unflatten(params.flatten()).flatten(), params.flatten())
    back = ad.MlpParams.from_dict(params.to_dict())
    assert back.widths == params.widths
    assert np.array_equal(back.flatten(), params.flatten())


def test_invalid_parameters_rejected():
    params = _net(2, 2, 0)
    bad = list(params.arrays())
    bad[0] = bad[0].copy()
    bad[0][0, 0] = np.nan
    with pytest.raises(ShapeError):
        params.with_arrays(bad)
    with pytest.raises(ShapeError):
        ad.mlp_forward(params, np.zeros((3, 5)))
    with pytest.raises(ShapeError):
        params.unflatten(np.zeros(params.size + 1))


def test_detached_node_has_no_gradient():
    with pytest.raises(UsageError):
        ad.grad_params(ad.ScalarNode(1.0))


def test_adam_first_step_is_lr_times_sign():
    params = _net(2, 1, 4)
    grads = params.with_arrays([np.full(a.shape, -3.0) for a in params.arrays()])
    state = ad.adam_init(params, lr=0.01)
    new, state = ad.adam_step(state, params, grads)
    np.testing.assert_allclose(new.flatten() - params.flatten(), 0.01, rtol=1e-6)
    assert state.step == 1


def test_adam_is_deterministic():
    params = _net(2, 2, 9)
    grads = _net(2, 2, 10)
    a = ad.adam_init(params)
    b = ad.adam_init(params)
    pa, pb = params, params
    for _ in range(3):
        pa, a = ad.adam_step(a, pa, grads)
        pb, b = ad.adam_step(b, pb, grads)
    assert np.array_equal(pa.flatten(), pb.flatten())


def test_ema_update_interpolates():
    a, b = _net(1, 1, 0), _net(1, 1, 1)
    m = ad.ema_update(a, b, 0.75)
    np.testing.assert_allclose(m.flatten(), 0.75 * a.flatten() + 0.25 * b.flatten())
