import math

import numpy as np
import pytest

from wienerloc import verify as V
from wienerloc.funcalc import squared_brownian
from wienerloc.ibp import z_delta_functional
from wienerloc.nondegen import CoefficientFamily
from wienerloc.quadrature import gauss_hermite_1d, gh_expectation
from wienerloc.timegrid import (InvalidArgument, make_grid, make_window,
                                sample_increments)


def test_gauss_hermite_rule_integrates_moments():
    x, w = gauss_hermite_1d(20)
    assert w.sum() == pytest.approx(1.0)
    for k, moment in ((1, 0.0), (2, 1.0), (4, 3.0), (6, 15.0)):
        assert (w * x ** k).sum() == pytest.approx(moment, abs=1e-10)


def test_gh_expectation_matches_gaussian_moments():
    grid = make_grid(1.0, 2)
    val = gh_expectation(lambda b: b.increments.sum(axis=(1, 2)) ** 2,
                         grid, 1, nodes=12)
    assert val == pytest.approx(1.0, abs=1e-12)


def test_gh_expectation_rejects_oversized_grids():
    grid = make_grid(1.0, 8)
    with pytest.raises(InvalidArgument):
        gh_expectation(lambda b: np.ones(b.n_paths), grid, 2, nodes=64)


def test_brownian_variance_riemann_sum():
    # deterministic sawtooth path: V computed by hand on the left points
    levels = np.array([0.0, 1.0, 0.0, 1.0, 0.0])
    left = levels[:-1]
    expect = ((left - left.mean()) ** 2).mean()
    assert V.brownian_variance(levels, m=4) == pytest.approx(expect)
    with pytest.raises(InvalidArgument):
        V.brownian_variance(levels, m=5)


def test_variance_samples_are_chunk_invariant():
    # values at a given path index never depend on how many paths are drawn
    a = V.brownian_variance_samples(16, 40_000, seed=5)
    b = V.brownian_variance_samples(16, 10_000, seed=5)
    np.testing.assert_array_equal(a[:10_000], b)


def test_laplace_targets_are_consistent():
    # the planar transform is the square of the scalar transform at mu = 2 lam^2
    for lam in (0.5, 1.0, 2.0):
        assert V.laplace_target(lam) == pytest.approx(
            V.laplace_target_scalar(2 * lam * lam) ** 2)
    assert V.laplace_target(1.0) == pytest.approx(2.0 / math.sinh(2.0))
    # commonly quoted rounded value (accurate only to ~5e-5)
    assert V.laplace_target(1.0) == pytest.approx(0.5514, abs=1e-4)


def test_laplace_checks_pass_at_moderate_size():
    v = V.brownian_variance_samples(256, 200_000, seed=0)
    for rep in V.laplace_check([0.5, 1.0], 200_000, 256, 0, v_samples=v):
        assert rep.verdict == "pass"
    for rep in V.laplace_check_scalar([1.0, 4.0], 200_000, 256, 0, v_samples=v):
        assert rep.verdict == "pass"
    with pytest.raises(InvalidArgument):
        V.laplace_check([-1.0], 100, 16, 0, v_samples=v)


def test_variance_mean_check():
    rep = V.brownian_variance_mean_check(200_000, 256, seed=0)
    assert rep.verdict == "pass"
    assert rep.rhs == pytest.approx(1.0 / 6.0)


def test_variance_lemma_scenarios():
    for sc in (V.VarianceScenario(4.0, 0.5),
               V.VarianceScenario(1.0, 2.0, "uniform", 0.6)):
        rep = V.variance_lemma_check(sc, delta=1.0, n_paths=50_000, m=128, seed=1)
        assert rep.verdict == "pass"
        assert rep.rhs == pytest.approx(
            2 * math.exp(-(1.0 / 17.0) * (sc.alpha ** 2 + sc.beta ** 2)))
    with pytest.raises(InvalidArgument):
        V.variance_lemma_check(V.VarianceScenario(0.0, 0.0), 1.0, 100, 16, 0)


def test_variance_identities_are_exact():
    split, scale = V.variance_identity_residuals(1.0, 2.0, 0.3, 0.7, 128,
                                                 1024, seed=2)
    assert split <= 1e-10
    assert scale <= 1e-10


def test_cnp_constant_base_case_and_quadrature():
    assert V.cnp_constant(1, 1) == pytest.approx(68.0)
    for n in (1, 2, 3):
        for p in (1, 2, 3):
            closed = V.cnp_constant(n, p)
            quad = V.cnp_constant_quadrature(n, p)
            assert abs(closed - quad) / quad <= 1e-9
    with pytest.raises(InvalidArgument):
        V.cnp_constant(0, 1)


def test_determinant_lemma_on_explicit_z_model():
    grid = make_grid(1.0, 20)
    fam = CoefficientFamily(first=np.array([[1.0]]), pair=np.zeros((1, 1, 1)))
    batch = sample_increments(grid, 1, 50_000, seed=3)
    for delta in (0.1, 0.05):
        w = make_window(grid, 1.0, delta)
        F = z_delta_functional(fam, w, grid)
        rep = V.determinant_lemma_check(F, fam, 0.5, w, batch, p=1)
        assert rep.verdict == "pass"
        assert rep.rhs == pytest.approx(68.0 / (0.5 * delta ** 2))
        # sigma = delta exactly, so the conditional moment is 1/delta
        assert rep.lhs <= 1.0 / delta


def test_gdelta_tail_rows_and_slope():
    grid = make_grid(1.0, 16)
    F = squared_brownian(grid)
    batch = sample_increments(grid, 1, 8192, seed=4)
    bundles = {}
    for delta in (0.5, 0.25):
        w = make_window(grid, 1.0, delta)
        start = batch.levels()[:, w.first_cell, 0]
        fam = CoefficientFamily(first=2.0 * start[:, None, None],
                                pair=np.full((batch.n_paths, 1, 1, 1), 2.0))
        from wienerloc.ibp import remainder_bundle
        bundles[delta] = remainder_bundle(F, fam, w, batch, 0.25)
    out = V.gdelta_tail(bundles)
    assert len(out["rows"]) == 2
    for row in out["rows"]:
        assert row["ci_low"] <= row["probability"] <= row["ci_high"]


def test_criterion_arithmetic_feasibility():
    rep = V.criterion_arithmetic(n=1, q=2, eps_tv=1.0)
    assert rep.feasible and rep.theta == 6.0 and rep.r_n == 4
    assert rep.p_high == pytest.approx(1.0 / (1.0 - 1.0 / 18.0))
    wide = V.criterion_arithmetic(n=1, q=2, eps_tv=100.0)
    assert math.isinf(wide.p_high)
    assert not V.criterion_arithmetic(n=1, q=2, eps_tv=0.0).feasible


def test_det_derivative_identity_and_bracket_bound():
    grid = make_grid(1.0, 8)
    w = make_window(grid, 1.0, 0.5)
    F = squared_brownian(grid)
    batch = sample_increments(grid, 1, 2048, seed=6)
    for order in (1, 2):
        rep = V.leibniz_identity_check(F, w, batch, order)
        assert rep.verdict == "pass"
        bb = V.bracket_bound_violations(F, F, w, batch, order)
        assert bb["violations"] == 0
        assert bb["worst_ratio"] <= 1.0
