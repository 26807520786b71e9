"""Closed-form and statistical checks of the analytical ingredients:
the Brownian path-variance Laplace transform, the variance inequality, the
determinant-moment bound with its explicit constant, remainder-energy tails,
the total-variation decomposition, the exponent arithmetic, and the
product-rule identities behind the weight estimates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import permutations

import numpy as np
from scipy import integrate, special

from . import rng
from .funcalc import GridFunctional
from .ibp import (RemainderBundle, _g_delta_jets, functional_jets,
                  remainder_bundle, window_covariance)
from .localize import build_localizers
from .mctypes import (CheckReport, McEstimate, binomial_ci, loglog_slope,
                      mc_from_moments, mc_from_samples)
from .nondegen import CoefficientFamily
from .timegrid import InvalidArgument, PathBatch, Window

_CHUNK = 1 << 14   # fixed chunk size: results never depend on worker count


# ---------------------------------------------------------------------------
# Brownian path variance
# ---------------------------------------------------------------------------

def brownian_variance(levels: np.ndarray, m: int | None = None) -> np.ndarray:
    """V(B) = int_0^1 (B_s - int_0^1 B)^2 ds by the left-point Riemann sum.

    levels: node values on a uniform grid of the unit interval, shape
    (..., m + 1); the last node is dropped (left endpoints)."""
    levels = np.asarray(levels, dtype=float)
    if m is not None and levels.shape[-1] != m + 1:
        raise InvalidArgument("levels must hold m + 1 node values")
    left = levels[..., :-1]
    centred = left - left.mean(axis=-1, keepdims=True)
    return (centred ** 2).mean(axis=-1)


def brownian_variance_samples(m: int, n_paths: int, seed: int) -> np.ndarray:
    """V(B) for n_paths independent unit-interval paths, chunked and keyed by
    the chunk index so the values are independent of batching."""
    out = np.empty(n_paths)
    scale = 1.0 / np.sqrt(m)
    for chunk, lo in enumerate(range(0, n_paths, _CHUNK)):
        hi = min(lo + _CHUNK, n_paths)
        z = rng.normals(seed, rng.stream_tag(rng.TAG_AUX, 0, chunk), (hi - lo, m))
        b = np.cumsum(z * scale, axis=1)
        left = np.concatenate([np.zeros((hi - lo, 1)), b[:, :-1]], axis=1)
        centred = left - left.mean(axis=1, keepdims=True)
        out[lo:hi] = (centred ** 2).mean(axis=1)
    return out


def laplace_target(lam: float) -> float:
    """E exp(-2 lam^2 (V(B^1) + V(B^2))) for a planar Brownian path."""
    return 2.0 * lam / math.sinh(2.0 * lam)


def laplace_target_scalar(mu: float) -> float:
    """E exp(-mu V(B)) = (sqrt(2 mu) / sinh(sqrt(2 mu)))^{1/2}.

    The frequently quoted closed form 2 lam / sinh(2 lam) is the square of
    this transform at mu = 2 lam^2, i.e. the transform of the summed variance
    of two independent components; the scalar identity carries the square
    root.  Both normalizations are checked."""
    s = math.sqrt(2.0 * mu)
    return math.sqrt(s / math.sinh(s))


def laplace_check(lambdas, n_paths: int, m: int, seed: int,
                  v_samples: np.ndarray | None = None) -> list[CheckReport]:
    """MC Laplace transform of the planar path variance: the n_paths scalar
    variance samples are paired into n_paths/2 independent two-component
    sums, and E exp(-2 lam^2 (V + V')) is compared against 2 lam / sinh(2 lam).
    Tolerance max(3 SE, 0.003) absolute (the 0.003 budgets the left-point
    Riemann bias at m = 1024)."""
    v = brownian_variance_samples(m, n_paths, seed) if v_samples is None else v_samples
    half = v.size // 2
    if half < 2:
        raise InvalidArgument("need at least 4 variance samples to pair")
    vsum = v[:half] + v[half:2 * half]
    reports = []
    for lam in lambdas:
        if lam <= 0:
            raise InvalidArgument("laplace parameter must be positive")
        est = mc_from_samples(np.exp(-2.0 * lam * lam * vsum), seed=seed)
        target = laplace_target(lam)
        tol = max(3 * est.se, 0.003)
        verdict = "pass" if abs(est.mean - target) <= tol else "fail"
        reports.append(CheckReport(
            name=f"laplace(lambda={lam})", lhs=est.mean, rhs=target,
            verdict=verdict, tolerance=tol,
            details={"se": est.se, "pairs": half, "m": m}))
    return reports


def laplace_check_scalar(mus, n_paths: int, m: int, seed: int,
                         v_samples: np.ndarray | None = None) -> list[CheckReport]:
    """The one-component transform E exp(-mu V(B)) against its closed form."""
    v = brownian_variance_samples(m, n_paths, seed) if v_samples is None else v_samples
    reports = []
    for mu in mus:
        if mu <= 0:
            raise InvalidArgument("laplace parameter must be positive")
        est = mc_from_samples(np.exp(-mu * v), seed=seed)
        target = laplace_target_scalar(mu)
        tol = max(3 * est.se, 0.003)
        verdict = "pass" if abs(est.mean - target) <= tol else "fail"
        reports.append(CheckReport(
            name=f"laplace-scalar(mu={mu})", lhs=est.mean, rhs=target,
            verdict=verdict, tolerance=tol,
            details={"se": est.se, "n": v.size, "m": m}))
    return reports


def brownian_variance_mean_check(n_paths: int, m: int, seed: int,
                                 v_samples: np.ndarray | None = None) -> CheckReport:
    """E V(B) = 1/6 (exact limit; the left-point sum has mean 1/6 - 1/(6 m^2))."""
    v = brownian_variance_samples(m, n_paths, seed) if v_samples is None else v_samples
    est = mc_from_samples(v, seed=seed)
    target = 1.0 / 6.0
    verdict = "pass" if est.within(target) else "fail"
    return CheckReport(name="brownian-variance-mean", lhs=est.mean, rhs=target,
                       verdict=verdict, tolerance=3 * est.se,
                       details={"se": est.se, "riemann_mean": 1 / 6 - 1 / (6 * m ** 2)})


# ---------------------------------------------------------------------------
# variance inequality and its exact identities
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VarianceScenario:
    alpha: float
    beta: float
    r_kind: str = "zero"      # "zero" | "const" | "uniform"
    r_value: float = 0.0      # constant value, or half-width of the uniform draw
    event_fraction: float = 1.0 / 32.0   # 1/32 per the statement, 1/64 variant


def variance_lemma_check(scenario: VarianceScenario, delta: float, n_paths: int,
                         m: int, seed: int) -> CheckReport:
    """E(1_A exp(-int_0^delta (r + alpha + beta b_s)^2 ds))
       <= 2 exp(-(delta^2/17)(alpha^2 + beta^2)),
    A = {r^2 <= fraction (alpha^2+beta^2)} & {|mean of b over [0,delta]| <= 1}."""
    a, b = scenario.alpha, scenario.beta
    if a == 0 and b == 0:
        raise InvalidArgument("vacuous scenario: alpha = beta = 0")
    h = delta / m
    total = total_sq = 0.0
    for chunk, lo in enumerate(range(0, n_paths, _CHUNK)):
        hi = min(lo + _CHUNK, n_paths)
        z = rng.normals(seed, rng.stream_tag(rng.TAG_AUX, 1, chunk), (hi - lo, m + 1))
        bm = np.cumsum(z[:, :-1] * np.sqrt(h), axis=1)
        left = np.concatenate([np.zeros((hi - lo, 1)), bm[:, :-1]], axis=1)
        if scenario.r_kind == "zero":
            r = np.zeros(hi - lo)
        elif scenario.r_kind == "const":
            r = np.full(hi - lo, scenario.r_value)
        elif scenario.r_kind == "uniform":
            u = special.ndtr(z[:, -1])   # uniform from the spare normal column
            r = scenario.r_value * (2 * u - 1)
        else:
            raise InvalidArgument(f"unknown r_kind {scenario.r_kind!r}")
        integral = h * ((r[:, None] + a + b * left) ** 2).sum(axis=1)
        event = (r ** 2 <= scenario.event_fraction * (a * a + b * b)) & \
            (np.abs(left.mean(axis=1)) <= 1.0)
        vals = np.where(event, np.exp(-integral), 0.0)
        total += vals.sum()
        total_sq += (vals ** 2).sum()
    est = mc_from_moments(total, total_sq, n_paths, seed=seed)
    rhs = 2.0 * math.exp(-(delta ** 2 / 17.0) * (a * a + b * b))
    verdict = "pass" if est.mean <= rhs + 3 * est.se else "fail"
    return CheckReport(
        name=f"variance-lemma(a={a},b={b},r={scenario.r_kind},"
             f"frac=1/{round(1 / scenario.event_fraction)})",
        lhs=est.mean, rhs=rhs, verdict=verdict, tolerance=3 * est.se,
        details={"se": est.se, "delta": delta, "m": m})


def variance_identity_residuals(alpha: float, beta: float, r: float, delta: float,
                                m: int, n_paths: int, seed: int) -> tuple[float, float]:
    """Exact pathwise residuals of the mean-variance split

        int (r+a+b b_s)^2 dmu = (int (r+a+b b_s) dmu)^2 + b^2 V_mu(b)

    and of the Brownian-scaling identity V_mu(b) = delta V(B) with
    B_t = b_{t delta} / sqrt(delta), on matched discrete grids."""
    h = delta / m
    z = rng.normals(seed, rng.stream_tag(rng.TAG_AUX, 2, 0), (n_paths, m))
    bm = np.cumsum(z * np.sqrt(h), axis=1)
    left = np.concatenate([np.zeros((n_paths, 1)), bm[:, :-1]], axis=1)
    vals = r + alpha + beta * left
    mean_sq = (vals ** 2).mean(axis=1)
    v_mu = ((left - left.mean(axis=1, keepdims=True)) ** 2).mean(axis=1)
    res_split = np.abs(mean_sq - (vals.mean(axis=1) ** 2 + beta ** 2 * v_mu))
    scaled = np.concatenate([np.zeros((n_paths, 1)), bm], axis=1) / np.sqrt(delta)
    res_scale = np.abs(v_mu - delta * brownian_variance(scaled))
    return float(res_split.max()), float(res_scale.max())


# ---------------------------------------------------------------------------
# the determinant-moment constant and bound
# ---------------------------------------------------------------------------

def cnp_constant(n: int, p: int) -> float:
    """C_{n,p} = 2 Gamma(p) int |xi|^{n(2p-1)} exp(-|xi|^2/34) dxi
              = 2 Gamma(p) pi^{n/2} Gamma(pn) 34^{pn} / Gamma(n/2)."""
    if n < 1 or p < 1:
        raise InvalidArgument("need n, p >= 1")
    return float(2.0 * special.gamma(p) * np.pi ** (n / 2.0)
                 * special.gamma(p * n) * 34.0 ** (p * n) / special.gamma(n / 2.0))


def cnp_constant_quadrature(n: int, p: int) -> float:
    """Adaptive radial quadrature of the same integral (independent oracle)."""
    surface = 2.0 * np.pi ** (n / 2.0) / special.gamma(n / 2.0)
    k = n * (2 * p - 1) + n - 1
    val, _ = integrate.quad(lambda rho: rho ** k * np.exp(-rho * rho / 34.0),
                            0.0, np.inf, epsabs=0.0, epsrel=1e-12, limit=200)
    return float(2.0 * special.gamma(p) * surface * val)


def determinant_lemma_check(F: GridFunctional, fam: CoefficientFamily,
                            lambda_star: float, w: Window, batch: PathBatch,
                            p: int, name: str = "determinant-lemma") -> CheckReport:
    """E(1_good_event (det window covariance)^{-p}) <= C_{n,p}/(lam*^{pn} delta^{2pn});
    unconditional mean (tower property over the conditioning)."""
    cov = window_covariance(F, w, batch)
    n = cov.matrix.shape[-1]
    bundle = remainder_bundle(F, fam, w, batch, lambda_star)
    inside = bundle.lambda_event & ~cov.degenerate
    samples = np.zeros(batch.n_paths)
    samples[inside] = cov.det[inside] ** (-float(p))
    if not inside.any():
        est = McEstimate(mean=0.0, se=0.0, n_samples=batch.n_paths)
        verdict = "reported-only"
    else:
        est = mc_from_samples(samples, seed=batch.base_seed)
        verdict = None
    rhs = cnp_constant(n, p) / (lambda_star ** (p * n) * w.delta ** (2 * p * n))
    if verdict is None:
        verdict = "pass" if est.mean <= rhs + 3 * est.se else "fail"
    return CheckReport(name=f"{name}(delta={w.delta},p={p})", lhs=est.mean,
                       rhs=rhs, verdict=verdict, tolerance=3 * est.se,
                       details={"se": est.se, "event_fraction": float(inside.mean()),
                                "degenerate": int(cov.degenerate.sum())})


# ---------------------------------------------------------------------------
# remainder-energy tails and norms
# ---------------------------------------------------------------------------

def gdelta_tail(bundles: dict[float, RemainderBundle]) -> dict:
    """P(G_delta >= delta^2) per delta with exact binomial CIs and the fitted
    log-log decay slope."""
    rows = []
    for delta, bundle in sorted(bundles.items(), reverse=True):
        hits = int((bundle.g_delta >= delta ** 2).sum())
        n = bundle.g_delta.size
        lo, hi = binomial_ci(hits, n)
        rows.append({"delta": delta, "probability": hits / n, "ci_low": lo,
                     "ci_high": hi, "hits": hits, "n": n})
    deltas = np.array([r["delta"] for r in rows])
    probs = np.array([r["probability"] for r in rows])
    return {"rows": rows, "slope": loglog_slope(deltas, probs)}


def gdelta_norms(F: GridFunctional, fam: CoefficientFamily, w: Window,
                 batch: PathBatch, k: int, p: int) -> float:
    """||G_delta||_{k,p} for k in {0, 1}: E(G^p)^{1/p} plus, for k = 1, the
    h-weighted derivative mass E(|DG|_{L2}^p)^{1/p}."""
    if k not in (0, 1):
        raise InvalidArgument("k must be 0 or 1")
    jets = functional_jets(F, w, batch, order=2)
    g, dg, _ = _g_delta_jets(jets, fam, batch, w, want_second=False)
    total = float(np.mean(g ** p) ** (1.0 / p))
    if k == 1:
        mass = batch.grid.h * (dg ** 2).sum(axis=1)
        total += float(np.mean(mass ** (p / 2.0)) ** (1.0 / p))
    return total


# ---------------------------------------------------------------------------
# total-variation decomposition
# ---------------------------------------------------------------------------

def tv_decomposition(F: GridFunctional, fam: CoefficientFamily, w: Window,
                     batch: PathBatch, y, r: float, lambda_star: float,
                     gamma: float) -> dict:
    """Per-delta decomposition row: the five bad-event probabilities and
    E|U - U_delta| on the same paths.

    Two threshold conventions are reported: 'stated' uses the displayed event
    levels (Q_i at 1), 'support' uses the actual bump support edges (Q_i at
    1/2, the spectral factor at twice the cutoff), for which the bound

        |U - U_delta| <= sum_i 1{bad_i}

    holds pathwise."""
    bundle = remainder_bundle(F, fam, w, batch, lambda_star)
    f_vals = F.value(batch)
    locs = build_localizers(f_vals, bundle.g_delta, bundle.abar, bundle.lam,
                            bundle.q1, bundle.q2, y=y, r=r, delta=w.delta,
                            lambda_star=lambda_star, gamma=gamma,
                            drivers=batch.drivers)
    diff = locs.u - locs.u_delta
    dist = np.linalg.norm(f_vals - np.atleast_1d(y), axis=1)
    stated = [
        float((locs.q[:, 1] >= 1.0).mean()),
        float((locs.q[:, 2] >= 1.0).mean()),
        float((locs.q[:, 3] >= 1.0).mean()),
        float((locs.q[:, 4] >= 1.0).mean()),
        float(((dist <= r) & (locs.q[:, 5] < 1.0)).mean()),
    ]
    support = [
        float((locs.q[:, 1] > 0.5).mean()),
        float((locs.q[:, 2] > 0.5).mean()),
        float((locs.q[:, 3] > 0.5).mean()),
        float((locs.q[:, 4] > 0.5).mean()),
        float(((locs.q[:, 0] < 1.0) & (locs.q[:, 5] < 2.0)).mean()),
    ]
    est = mc_from_samples(diff, seed=batch.base_seed)
    return {"delta": w.delta, "tv_mean": est.mean, "tv_se": est.se,
            "eps_stated": stated, "eps_support": support,
            "bound_support": float(sum(support)), "bound_stated": float(sum(stated))}


# ---------------------------------------------------------------------------
# exponent arithmetic
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CriterionReport:
    feasible: bool
    p_low: float
    p_high: float      # inf when the decay budget exceeds 3 n^3 theta
    theta: float
    r_n: int
    eta: float         # the integrability threshold (q + n/p*)/2 at midrange p


def criterion_arithmetic(n: int, q: int, eps_tv: float,
                         theta: float | None = None) -> CriterionReport:
    """Admissible integrability exponents p: (1 - 1/p) * 3 n^3 theta < eps_tv,
    with theta = 4n + 2 by default; bookkeeping eta > (q + n/p*)/2 with p* the
    conjugate exponent and r_n = 2(n + 1)."""
    theta = float(4 * n + 2) if theta is None else float(theta)
    r_n = 2 * (n + 1)
    if eps_tv <= 0:
        return CriterionReport(False, 1.0, 1.0, theta, r_n, float("nan"))
    budget = 3.0 * n ** 3 * theta
    p_high = float("inf") if eps_tv >= budget else 1.0 / (1.0 - eps_tv / budget)
    p_mid = 2.0 if math.isinf(p_high) else 0.5 * (1.0 + p_high)
    p_conj = p_mid / (p_mid - 1.0)
    eta = 0.5 * (q + n / p_conj)
    return CriterionReport(True, 1.0, p_high, theta, r_n, eta)


# ---------------------------------------------------------------------------
# product-rule identities for the covariance determinant
# ---------------------------------------------------------------------------

def _sigma_derivs(F: GridFunctional, w: Window, batch: PathBatch, order: int):
    """sigma and its window derivatives D_q sigma, D_{qr} sigma (flat coords)."""
    jets = functional_jets(F, w, batch, order=min(order + 1, 3))
    h = jets.h
    d1, d2, d3 = jets.d1, jets.d2, jets.d3
    sigma = h * np.einsum("pnq,pmq->pnm", d1, d1)
    dsig = h * (np.einsum("pnqr,pmq->pnmr", d2, d1)
                + np.einsum("pnq,pmqr->pnmr", d1, d2))
    d2sig = None
    if order >= 2:
        d2sig = h * (np.einsum("pnqrs,pmq->pnmrs", d3, d1)
                     + np.einsum("pnqr,pmqs->pnmrs", d2, d2)
                     + np.einsum("pnqs,pmqr->pnmrs", d2, d2)
                     + np.einsum("pnq,pmqrs->pnmrs", d1, d3))
    return sigma, dsig, d2sig


def det_derivative_permutation(F: GridFunctional, w: Window, batch: PathBatch,
                               order: int) -> np.ndarray:
    """D^gamma det(sigma) assembled through the permutation expansion of the
    determinant and the product rule over the blocks of gamma."""
    sigma, dsig, d2sig = _sigma_derivs(F, w, batch, order)
    p = batch.n_paths
    n = sigma.shape[-1]
    q = dsig.shape[-1]
    perms = list(permutations(range(n)))
    signs = {rho: float(np.linalg.det(np.eye(n)[list(rho)])) for rho in perms}
    if order == 1:
        out = np.zeros((p, q))
        for rho in perms:
            for pos in range(n):
                term = np.ones((p, q))
                for i in range(n):
                    fac = dsig[:, i, rho[i], :] if i == pos else sigma[:, i, rho[i], None]
                    term = term * fac
                out += signs[rho] * term
        return out
    if order == 2:
        out = np.zeros((p, q, q))
        for rho in perms:
            for pos1 in range(n):
                for pos2 in range(n):
                    term = np.ones((p, q, q))
                    for i in range(n):
                        if i == pos1 and i == pos2:
                            fac = d2sig[:, i, rho[i], :, :]
                        elif i == pos1:
                            fac = dsig[:, i, rho[i], :, None]
                        elif i == pos2:
                            fac = dsig[:, i, rho[i], None, :]
                        else:
                            fac = sigma[:, i, rho[i], None, None]
                        term = term * fac
                    out += signs[rho] * term
        return out
    raise InvalidArgument("orders 1 and 2 only")


def det_derivative_direct(F: GridFunctional, w: Window, batch: PathBatch,
                          order: int) -> np.ndarray:
    """The same derivative computed without any product rule: Jacobi's formula
    applied to the assembled sigma jets (adjugate contraction), a genuinely
    different evaluation route."""
    sigma, dsig, d2sig = _sigma_derivs(F, w, batch, order)
    det = np.linalg.det(sigma)
    inv = np.linalg.inv(sigma)
    adj = det[:, None, None] * inv
    ddet = np.einsum("pji,pijr->pr", adj, dsig)
    if order == 1:
        return ddet
    # D_s adj = D_s(det) inv + det D_s(inv), D_s inv = -inv (D_s sigma) inv
    dinv = -np.einsum("pij,pjkr,pkl->pilr", inv, dsig, inv)
    dadj = np.einsum("ps,pij->pijs", ddet, inv) + det[:, None, None, None] * dinv
    return (np.einsum("pjis,pijr->prs", dadj, dsig)
            + np.einsum("pji,pijrs->prs", adj, d2sig))


def leibniz_identity_check(F: GridFunctional, w: Window, batch: PathBatch,
                           order: int) -> CheckReport:
    a = det_derivative_permutation(F, w, batch, order)
    b = det_derivative_direct(F, w, batch, order)
    scale = max(np.abs(b).max(), 1e-12)
    rel = float(np.abs(a - b).max() / scale)
    verdict = "pass" if rel <= 1e-8 else "fail"
    return CheckReport(name=f"det-derivative-identity(order={order})",
                       lhs=rel, rhs=0.0, verdict=verdict, tolerance=1e-8,
                       details={"scale": scale})


def bracket_bound_violations(F: GridFunctional, G: GridFunctional, w: Window,
                             batch: PathBatch, order: int) -> dict:
    """|D^gamma <DG, DF>| <= 2 (sum_l |D^(l) G|) (sum_l |D^(l) F|), l = 1..r+1,
    evaluated pathwise; returns the violation count and the worst ratio."""
    if order not in (1, 2):
        raise InvalidArgument("orders 1 and 2 only")
    jf = functional_jets(F, w, batch, order=order + 1)
    jg = functional_jets(G, w, batch, order=order + 1)
    h = jf.h

    def mass(jets, r):
        t = (jets.d1, jets.d2, jets.d3)[r - 1]
        return np.sqrt(h ** r * (t.reshape(t.shape[0], -1) ** 2).sum(axis=1))

    if order == 1:
        lhs_vec = h * (np.einsum("pnqr,pnq->pr", jg.d2, jf.d1)
                       + np.einsum("pnq,pnqr->pr", jg.d1, jf.d2))
        lhs = np.sqrt(h * (lhs_vec ** 2).sum(axis=1))
    else:
        lhs_vec = h * (np.einsum("pnqrs,pnq->prs", jg.d3, jf.d1)
                       + np.einsum("pnqr,pnqs->prs", jg.d2, jf.d2)
                       + np.einsum("pnqs,pnqr->prs", jg.d2, jf.d2)
                       + np.einsum("pnq,pnqrs->prs", jg.d1, jf.d3))
        lhs = np.sqrt(h ** 2 * (lhs_vec ** 2).sum(axis=(1, 2)))
    rhs = 2.0 * sum(mass(jg, r) for r in range(1, order + 2)) \
        * sum(mass(jf, r) for r in range(1, order + 2))
    ratio = lhs / np.maximum(rhs, 1e-300)
    return {"violations": int((lhs > rhs * (1 + 1e-12)).sum()),
            "worst_ratio": float(ratio.max()), "n": batch.n_paths}
