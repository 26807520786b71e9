import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wienerloc.funcalc import (UnsupportedOrder, autodiff_functional,
                               brownian_coordinate, brownian_vector,
                               clark_ocone_residual, constant_functional,
                               linear_functional, ou_operator,
                               sobolev_norm_estimate, squared_brownian)
from wienerloc.timegrid import make_grid, make_window, sample_increments

GRID = make_grid(1.0, 8)


def _batch(n=256, d=1, seed=0):
    return sample_increments(GRID, d, n, seed)


def test_brownian_vector_value_and_derivative():
    batch = _batch(d=2)
    F = brownian_vector(GRID, 2)
    np.testing.assert_allclose(F.value(batch), batch.levels()[:, -1, :])
    d1 = F.deriv(batch, 1, np.arange(8))
    # dW^i_T / d dW^l_k = delta_{il}
    expect = np.tile(np.eye(2)[:, None, :], (1, 8, 1))
    np.testing.assert_allclose(d1, np.broadcast_to(expect, d1.shape))
    assert np.all(F.deriv(batch, 2) == 0.0)


def test_brownian_vector_stops_at_intermediate_time():
    batch = _batch()
    F = brownian_coordinate(GRID, 1, t=0.5)
    np.testing.assert_allclose(F.value(batch)[:, 0], batch.levels()[:, 4, 0])
    d1 = F.deriv(batch, 1, np.arange(8))
    np.testing.assert_allclose(d1[:, 0, :4, 0], 1.0)
    np.testing.assert_allclose(d1[:, 0, 4:, 0], 0.0)


def test_squared_brownian_derivatives():
    batch = _batch()
    F = squared_brownian(GRID)
    wt = batch.levels()[:, -1, 0]
    np.testing.assert_allclose(F.value(batch)[:, 0], wt ** 2)
    d1 = F.deriv(batch, 1, np.arange(8))
    np.testing.assert_allclose(d1[:, 0, :, 0],
                               np.broadcast_to(2.0 * wt[:, None], (256, 8)))
    d2 = F.deriv(batch, 2, np.arange(8))
    np.testing.assert_allclose(d2[:, 0, :, 0, :, 0], 2.0)
    assert np.all(F.deriv(batch, 3) == 0.0)


def test_constant_functional_is_flat():
    batch = _batch()
    F = constant_functional([3.0, -1.0])
    np.testing.assert_allclose(F.value(batch), [[3.0, -1.0]] * batch.n_paths)
    assert np.all(F.deriv(batch, 1) == 0.0)


def test_derivative_order_budget_is_enforced():
    batch = _batch()
    F = squared_brownian(GRID)
    with pytest.raises(UnsupportedOrder):
        F.deriv(batch, 4)


@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2))
@settings(max_examples=20, deadline=None)
def test_linear_functional_matches_manual_sum(c0, c1, const):
    batch = _batch(n=16)
    coeffs = np.zeros((8, 1))
    coeffs[1, 0], coeffs[5, 0] = c0, c1
    F = linear_functional(GRID, coeffs, const)
    manual = const + c0 * batch.increments[:, 1, 0] + c1 * batch.increments[:, 5, 0]
    np.testing.assert_allclose(F.value(batch)[:, 0], manual, atol=1e-12)
    np.testing.assert_allclose(F.deriv(batch, 1)[:, 0, :, 0],
                               np.broadcast_to(coeffs[:, 0], (16, 8)))


def test_autodiff_functional_matches_closed_forms():
    import jax.numpy as jnp
    batch = _batch(n=64)

    def fn(wmat):
        wt = jnp.sum(wmat)
        return jnp.array([wt ** 2])

    F = autodiff_functional(fn, GRID, 1, 1)
    ref = squared_brownian(GRID)
    np.testing.assert_allclose(F.value(batch), ref.value(batch), atol=1e-12)
    for order in (1, 2, 3):
        np.testing.assert_allclose(F.deriv(batch, order),
                                   ref.deriv(batch, order), atol=1e-12)


def test_ou_operator_is_the_number_operator_on_chaos():
    # L acts as multiplication by the chaos order: LW_T = W_T,
    # L(W_T^2 - T) = 2 (W_T^2 - T)
    batch = _batch(n=512)
    w1 = brownian_coordinate(GRID, 1)
    np.testing.assert_allclose(ou_operator(w1, batch)[:, 0],
                               w1.value(batch)[:, 0], atol=1e-12)
    w2 = squared_brownian(GRID)
    lw2 = ou_operator(w2, batch)[:, 0]
    np.testing.assert_allclose(lw2, 2.0 * (w2.value(batch)[:, 0] - 1.0),
                               atol=1e-12)


def test_windowed_ou_operator_uses_window_cells_only():
    batch = _batch(n=64)
    w = make_window(GRID, 1.0, 0.5)
    F = brownian_coordinate(GRID, 1)
    lw = ou_operator(F, batch, window=w)[:, 0]
    np.testing.assert_allclose(
        lw, batch.increments[:, 4:, 0].sum(axis=1), atol=1e-12)


def test_sobolev_norm_of_first_chaos():
    # ||W_T||_{1,2} = E(W_T^2)^(1/2) + E(|DW|_{L2}^2)^(1/2) = 1 + 1 at T = 1
    batch = _batch(n=200_000, seed=5)
    est = sobolev_norm_estimate(brownian_coordinate(GRID, 1), k=1, p=2, batch=batch)
    assert est.within(2.0)
    assert est.se < 0.01


def test_sobolev_norm_rejects_odd_exponent():
    batch = _batch(n=16)
    with pytest.raises(Exception):
        sobolev_norm_estimate(brownian_coordinate(GRID, 1), k=1, p=3, batch=batch)


def test_clark_ocone_residual_is_pure_inner_noise_for_first_chaos():
    # With the exact integrand, the residual reduces to the nested-MC noise of
    # E_{T,delta}F, whose mean square is exactly (h/n_inner) * (window cells)
    grid = make_grid(1.0, 16)
    w = make_window(grid, 1.0, 0.5)
    batch = sample_increments(grid, 1, 4000, seed=9)
    F = brownian_coordinate(grid, 1)
    n_inner = 8
    oracle = lambda b, k: np.ones((b.n_paths, 1, 1))
    est = clark_ocone_residual(F, w, batch, n_inner, inner_seed=3,
                               integrand_oracle=oracle)
    noise = grid.h * w.cell_count / n_inner
    assert est.within(noise)


def test_clark_ocone_residual_exact_oracles_remove_all_noise():
    grid = make_grid(1.0, 16)
    w = make_window(grid, 1.0, 0.5)
    batch = sample_increments(grid, 1, 2000, seed=9)
    F = brownian_coordinate(grid, 1)
    est = clark_ocone_residual(
        F, w, batch, 2, integrand_oracle=lambda b, k: np.ones((b.n_paths, 1, 1)),
        cond_oracle=lambda b: b.levels()[:, w.first_cell, :])
    assert est.mean < 1e-24
