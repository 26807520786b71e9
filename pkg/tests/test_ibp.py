import numpy as np
import pytest

from wienerloc.funcalc import (autodiff_functional, brownian_coordinate,
                               brownian_vector, ou_operator, squared_brownian)
from wienerloc.ibp import (DegenerateCovariance, RemainderBundle, ScalarJet,
                           divergence_residual, functional_jets, ibp_weight,
                           ibp_weight_iterated, localized_norm,
                           localizer_jets, remainder_bundle, unit_jet,
                           unit_localizer, weight_core, window_covariance,
                           z_delta, z_delta_deriv, z_delta_functional)
from wienerloc.localize import build_localizers
from wienerloc.nondegen import CoefficientFamily
from wienerloc.quadrature import gh_expectation
from wienerloc.timegrid import make_grid, make_window, sample_increments

GRID = make_grid(1.0, 8)
W = make_window(GRID, 1.0, 0.5)


def _batch(n=2048, d=1, seed=0, grid=GRID):
    return sample_increments(grid, d, n, seed)


def _fam(d=1, n=1, first=None, pair=None):
    first = np.zeros((d, n)) if first is None else np.asarray(first, float)
    pair = np.zeros((d, d, n)) if pair is None else np.asarray(pair, float)
    return CoefficientFamily(first=first, pair=pair)


# ---------------------------------------------------------------------------
# covariance
# ---------------------------------------------------------------------------

def test_window_covariance_of_endpoint_is_delta():
    batch = _batch(64)
    cov = window_covariance(brownian_coordinate(GRID, 1), W, batch)
    np.testing.assert_allclose(cov.matrix[:, 0, 0], W.delta, atol=1e-14)
    np.testing.assert_allclose(cov.inv[:, 0, 0], 1.0 / W.delta, atol=1e-12)
    assert not cov.degenerate.any()


def test_window_covariance_of_planar_endpoint_is_delta_identity():
    batch = _batch(32, d=2)
    cov = window_covariance(brownian_vector(GRID, 2), W, batch)
    np.testing.assert_allclose(
        cov.matrix, np.broadcast_to(W.delta * np.eye(2), cov.matrix.shape),
        atol=1e-14)


def test_window_covariance_of_z_model():
    fam = _fam(first=[[2.0]])
    F = z_delta_functional(fam, W, GRID)
    cov = window_covariance(F, W, _batch(32))
    np.testing.assert_allclose(cov.matrix[:, 0, 0], 4.0 * W.delta, atol=1e-14)


def test_covariance_is_positive_semidefinite():
    import jax.numpy as jnp
    grid = make_grid(1.0, 4)
    w = make_window(grid, 1.0, 0.5)
    F = autodiff_functional(
        lambda x: jnp.array([jnp.sum(x) + jnp.sum(x) ** 3,
                             jnp.sum(jnp.sin(x))]), grid, 1, 2)
    cov = window_covariance(F, w, _batch(512, grid=grid, seed=3))
    eig = np.linalg.eigvalsh(cov.matrix)
    assert eig.min() >= -1e-12


# ---------------------------------------------------------------------------
# principal part Z_delta
# ---------------------------------------------------------------------------

def test_z_delta_trivial_cases():
    batch = _batch(128)
    assert np.all(z_delta(_fam(), W, batch) == 0.0)
    z = z_delta(_fam(first=[[1.0]]), W, batch)
    lv = batch.levels()
    np.testing.assert_allclose(z[:, 0], lv[:, -1, 0] - lv[:, W.first_cell, 0],
                               atol=1e-14)


def test_z_delta_ito_isometry():
    # Z = int (W_s - W_{T-delta}) dW has mean 0, variance -> delta^2/2
    fam = _fam(pair=[[[1.0]]])
    target = W.delta ** 2 / 2.0
    prev_gap = None
    for m, n in ((8, 400_000), (64, 400_000)):
        grid = make_grid(1.0, m)
        w = make_window(grid, 1.0, 0.5)
        batch = _batch(n, grid=grid, seed=5)
        z = z_delta(fam, w, batch)[:, 0]
        assert abs(z.mean()) < 3 * z.std() / np.sqrt(n)
        # left-point sum variance is delta^2/2 - h*delta/2, exact on the grid
        exact = target - grid.h * w.delta / 2.0
        assert abs((z ** 2).mean() - exact) < 3 * (z ** 2).std() / np.sqrt(n)
        gap = abs((z ** 2).mean() - target)
        if prev_gap is not None:
            assert gap < prev_gap
        prev_gap = gap


def test_z_delta_derivatives_match_autodiff():
    import jax.numpy as jnp
    fam = _fam(first=[[0.3]], pair=[[[1.5]]])
    F = z_delta_functional(fam, W, GRID)
    k0 = W.first_cell

    def fn(x):
        lv = jnp.concatenate([jnp.zeros((1,)), jnp.cumsum(x[:, 0])])
        ito = jnp.sum((lv[k0:-1] - lv[k0]) * x[k0:, 0])
        return jnp.array([0.3 * (lv[-1] - lv[k0]) + 1.5 * ito])

    oracle = autodiff_functional(fn, GRID, 1, 1)
    batch = _batch(64)
    np.testing.assert_allclose(F.value(batch), oracle.value(batch), atol=1e-12)
    for order in (1, 2, 3):
        np.testing.assert_allclose(F.deriv(batch, order),
                                   oracle.deriv(batch, order), atol=1e-12)


def test_z_delta_third_derivative_is_zero():
    batch = _batch(16)
    assert np.all(z_delta_deriv(_fam(pair=[[[1.0]]]), W, batch, 3) == 0.0)


# ---------------------------------------------------------------------------
# remainder bundle
# ---------------------------------------------------------------------------

def test_remainder_bundle_exact_decomposition():
    # F = Z + c with pre-window-measurable c: G = 0 exactly, R within noise
    import jax.numpy as jnp
    fam = _fam(first=[[1.0]], pair=[[[2.0]]])
    k0 = W.first_cell

    def fn(x):
        lv = jnp.concatenate([jnp.zeros((1,)), jnp.cumsum(x[:, 0])])
        ito = jnp.sum((lv[k0:-1] - lv[k0]) * x[k0:, 0])
        return jnp.array([lv[k0] ** 2 + (lv[-1] - lv[k0]) + 2.0 * ito])

    F = autodiff_functional(fn, GRID, 1, 1)
    batch = _batch(256)
    bundle = remainder_bundle(F, fam, W, batch, lambda_star=0.25, n_inner=64,
                              inner_seed=2)
    np.testing.assert_allclose(bundle.g_delta, 0.0, atol=1e-20)
    # R_delta is pure nested-MC noise: its scale is Var(Z)/n_inner per path
    assert np.abs(bundle.r_delta).mean() < 0.2


def test_remainder_bundle_event_thresholds():
    # the spectral clause lambda >= lambda* shrinks the event once lambda* is
    # pushed past the family's spectral value; below it, raising lambda* only
    # relaxes the q1/G thresholds (which scale with sqrt(lambda*) / lambda*)
    fam = _fam(first=[[1.0]])   # lambda = 1 on every path
    F = z_delta_functional(fam, W, GRID)
    batch = _batch(4096, seed=7)
    small = remainder_bundle(F, fam, W, batch, lambda_star=0.25)
    mid = remainder_bundle(F, fam, W, batch, lambda_star=0.9)
    too_big = remainder_bundle(F, fam, W, batch, lambda_star=1.5)
    assert small.lambda_event.sum() > 0
    assert np.all(small.lambda_event <= mid.lambda_event)
    assert not too_big.lambda_event.any()
    np.testing.assert_allclose(small.lam, 1.0)
    np.testing.assert_allclose(small.abar, 1.0)


def test_remainder_energy_is_pure_discretization_for_squared_endpoint():
    # F = W_T^2 against the family a_1 = 2 W_{T-delta}, a_{1,1} = 2: per cell
    # D_k F - D_k Z = 2 dW_k, so G = 4 h sum dW_k^2 with mean exactly 4 h delta
    # (the continuous-time remainder vanishes identically for this family)
    grid = make_grid(1.0, 64)
    F = squared_brownian(grid)
    for delta in (0.5, 0.25, 0.125):
        w = make_window(grid, 1.0, delta)
        batch = _batch(20_000, grid=grid, seed=11)
        start = batch.levels()[:, w.first_cell, 0]
        fam = CoefficientFamily(first=2.0 * start[:, None, None],
                                pair=np.full((batch.n_paths, 1, 1, 1), 2.0))
        g = remainder_bundle(F, fam, w, batch, lambda_star=0.25).g_delta
        dw = batch.increments[:, w.cells, 0]
        np.testing.assert_allclose(g, 4.0 * grid.h * (dw ** 2).sum(axis=1),
                                   atol=1e-15)
        se = g.std() / np.sqrt(g.size)
        assert abs(g.mean() - 4.0 * grid.h * delta) <= 3 * se


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------

def test_depth_one_weight_closed_form_for_endpoint():
    batch = _batch(512)
    F = brownian_coordinate(GRID, 1)
    h = ibp_weight(F, W, batch)
    lv = batch.levels()
    expect = (lv[:, -1, 0] - lv[:, W.first_cell, 0]) / W.delta
    np.testing.assert_allclose(h[:, 0], expect, atol=1e-12)


def test_depth_two_weight_closed_form_for_endpoint():
    batch = _batch(512)
    F = brownian_coordinate(GRID, 1)
    tree = ibp_weight_iterated((0, 0), F, W, batch)
    lv = batch.levels()
    inc = lv[:, -1, 0] - lv[:, W.first_cell, 0]
    np.testing.assert_allclose(tree.values, (inc ** 2 - W.delta) / W.delta ** 2,
                               atol=1e-11)
    assert tree.trace == ((0,), (0, 0))


def test_iterated_weight_depth_cap():
    from wienerloc.funcalc import UnsupportedOrder
    batch = _batch(8)
    with pytest.raises(UnsupportedOrder):
        ibp_weight_iterated((0, 0, 0), brownian_coordinate(GRID, 1), W, batch)


def test_ou_duality_against_quadrature():
    # E <DF, DG>_delta = E(F L_delta G), both sides by exact quadrature
    import jax.numpy as jnp
    grid = make_grid(1.0, 2)
    w = make_window(grid, 1.0, 0.5)
    F = autodiff_functional(lambda x: jnp.array([jnp.sum(x) ** 2]), grid, 1, 1)
    G = autodiff_functional(lambda x: jnp.array([jnp.sin(jnp.sum(x))]), grid, 1, 1)

    def lhs(b):
        df = F.deriv_flat(b, 1, w.cells)[:, 0]
        dg = G.deriv_flat(b, 1, w.cells)[:, 0]
        return grid.h * (df * dg).sum(axis=1)

    def rhs(b):
        return F.value(b)[:, 0] * ou_operator(G, b, window=w)[:, 0]

    a = gh_expectation(lhs, grid, 1, nodes=40)
    b = gh_expectation(rhs, grid, 1, nodes=40)
    assert abs(a - b) < 1e-10


def _localized_jets(F, w, batch, y, r, order=3):
    jets = functional_jets(F, w, batch, order=order)
    fv = F.value(batch)
    p = batch.n_paths
    z = np.zeros(p)
    locs = build_localizers(fv, z, z, np.ones(p), z, z,
                            np.full(fv.shape[1], float(y)), r, w.delta,
                            0.25, 0.1, batch.drivers)
    return jets, locs, localizer_jets(locs, jets, fv, None, batch, w,
                                      ball_only=True)


def test_divergence_form_certifies_weights_pathwise():
    import jax.numpy as jnp
    grid = make_grid(1.0, 2)
    w = make_window(grid, 1.0, 0.5)
    F = autodiff_functional(
        lambda x: jnp.array([jnp.sum(x) + jnp.sum(x) ** 3 / 3.0]), grid, 1, 1)
    batch = _batch(20_000, grid=grid, seed=13)
    jets, locs, loc = _localized_jets(F, w, batch, y=1.0, r=0.5)
    p, q = jets.dw.shape
    assert np.abs(divergence_residual(jets, loc, unit_jet(p, q))).max() < 1e-10
    assert np.abs(divergence_residual(jets, unit_localizer(p, q),
                                      unit_jet(p, q))).max() < 1e-10
    inner, grad = weight_core(jets, loc, unit_jet(p, q), want_grad=True)
    outer_v = ScalarJet(val=inner[:, 0], d1=grad[:, 0], d2=None)
    assert np.abs(divergence_residual(jets, loc, outer_v)).max() < 1e-9


def test_weights_vanish_exactly_off_the_support():
    import jax.numpy as jnp
    grid = make_grid(1.0, 2)
    w = make_window(grid, 1.0, 0.5)
    F = autodiff_functional(
        lambda x: jnp.array([jnp.sum(x) + jnp.sum(x) ** 3 / 3.0]), grid, 1, 1)
    batch = _batch(5000, grid=grid, seed=1)
    jets, locs, loc = _localized_jets(F, w, batch, y=1.0, r=0.5)
    hval, _ = weight_core(jets, loc, unit_jet(*jets.dw.shape))
    dead = loc.u == 0.0
    assert dead.any() and (~dead).any()
    assert np.all(hval[dead] == 0.0)


def test_degenerate_covariance_reports_offending_paths():
    # a path with all-zero window increments makes sigma(W_T^2) singular
    batch = _batch(16)
    dw = batch.increments.copy()
    dw[3] = 0.0
    bad = batch.replace_increments(dw)
    with pytest.raises(DegenerateCovariance) as exc:
        ibp_weight(squared_brownian(GRID), W, bad)
    assert 3 in exc.value.paths


def test_localized_norm_monotone_in_p():
    gen = np.random.default_rng(4)
    vals = gen.normal(size=50_000)
    u = np.clip(gen.random(50_000), 0, 1)
    n1 = localized_norm(vals, u, p=1)
    n2 = localized_norm(vals, u, p=2)
    assert n2.mean + 3 * n2.se >= n1.mean - 3 * n1.se


def test_permuted_alpha_over_equal_indices_is_identical():
    batch = _batch(256, d=2)
    F = brownian_vector(GRID, 2)
    a = ibp_weight_iterated((0, 1), F, W, batch)
    b = ibp_weight_iterated((1, 0), F, W, batch)
    # for the planar endpoint the covariance is diagonal and constant, so the
    # mixed weights coincide exactly under permutation
    np.testing.assert_allclose(a.values, b.values, atol=1e-12)
