"""Smooth bump localization.

Two bump families on the half line:

  psi_a = 1 on [0, a), exp(1 - a^2/(a^2 - (x-a)^2)) on [a, 2a), 0 beyond
          (localizes near zero),
  phi_a = 1 on [a, inf), exp(1 - a^2/(2x-a)^2) on [a/2, a), 0 below
          (localizes away from zero).

Their logarithmic derivatives up to order three are closed forms; the family
satisfies the exact scale law (d^k ln psi_a)(a u) = a^{-k} (d^k ln psi_1)(u),
which is what makes the localization constants uniform in the threshold.

The six localizing variables combine a target ball |F - y| <= r with the
window-regularity quantities (remainder energy, window increment sizes, the
coefficient magnitude and the spectral lower bound).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mctypes import McEstimate
from .timegrid import InvalidArgument


@dataclass(frozen=True)
class Localizer:
    kind: str    # "near_zero" (psi) | "far_from_zero" (phi)
    a: float

    def __post_init__(self):
        if self.kind not in ("near_zero", "far_from_zero"):
            raise InvalidArgument(f"unknown localizer kind {self.kind!r}")
        if not self.a > 0:
            raise InvalidArgument("threshold must be positive")


PSI_HALF = Localizer("near_zero", 0.5)
PHI_TWO = Localizer("far_from_zero", 2.0)


def bump(loc: Localizer, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise InvalidArgument("bump arguments must be non-negative")
    a = loc.a
    out = np.zeros_like(x)
    if loc.kind == "near_zero":
        out[x < a] = 1.0
        band = (x >= a) & (x < 2 * a)
        u = x[band] - a
        out[band] = np.exp(1.0 - a * a / (a * a - u * u))
    else:
        out[x >= a] = 1.0
        band = (x >= a / 2) & (x < a)
        v = 2 * x[band] - a
        with np.errstate(divide="ignore"):   # v = 0 at the left edge: exp(-inf) = 0
            out[band] = np.exp(1.0 - a * a / (v * v))
    return out if out.ndim else float(out)


def _psi_log_derivs(a: float, u: np.ndarray) -> list[np.ndarray]:
    """(d/dx)^k ln psi_a at x = a + u for k = 1..3 (band coordinates)."""
    w = a * a - u * u
    return [-2 * a * a * u / w ** 2,
            -2 * a * a * (a * a + 3 * u * u) / w ** 3,
            -24 * a * a * u * (a * a + u * u) / w ** 4]


def _phi_log_derivs(a: float, v: np.ndarray) -> list[np.ndarray]:
    """(d/dx)^k ln phi_a at x = (v + a)/2 for k = 1..3 (v = 2x - a)."""
    return [4 * a * a / v ** 3,
            -24 * a * a / v ** 4,
            192 * a * a / v ** 5]


def log_bump_derivative(loc: Localizer, k: int, x) -> np.ndarray:
    """k-th derivative of ln(bump) at x; x must lie inside the support."""
    if k < 0 or k > 3:
        raise InvalidArgument("derivative order must be 0..3")
    x = np.asarray(x, dtype=float)
    a = loc.a
    if loc.kind == "near_zero":
        if np.any(x < 0) or np.any(x >= 2 * a):
            raise InvalidArgument("log of the bump is undefined outside [0, 2a)")
    else:
        if np.any(x <= a / 2):
            raise InvalidArgument("log of the bump is undefined on [0, a/2]")
    jets = log_bump_jet(loc, x, max(k, 1))
    out = jets[k] if k >= 1 else np.log(bump(loc, x))
    return out if np.ndim(out) else float(out)


def log_bump_jet(loc: Localizer, x, order: int) -> list[np.ndarray]:
    """[ln(bump), d ln, ..., d^order ln] vectorized; zero in flat regions and
    outside the support (callers weight such paths by bump = 0 anyway)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    a = loc.a
    out = [np.zeros_like(x) for _ in range(order + 1)]
    if loc.kind == "near_zero":
        band = (x > a) & (x < 2 * a)
        u = x[band] - a
        out[0][band] = 1.0 - a * a / (a * a - u * u)
        derivs = _psi_log_derivs(a, u)
    else:
        band = (x > a / 2) & (x < a)
        v = 2 * x[band] - a
        out[0][band] = 1.0 - a * a / (v * v)
        derivs = _phi_log_derivs(a, v)
    for k in range(1, order + 1):
        out[k][band] = derivs[k - 1]
    return out


def scale_law_check(k: int, p: int, a_list, kind: str = "near_zero",
                    n_points: int = 10_000) -> dict[float, float]:
    """sup_x bump_a(x) |d^k ln bump_a(x)|^p * a^{pk}, tabulated over a.

    Evaluated on a shared relative grid over the transition band, so exact
    scale invariance of the family makes the table constant in a."""
    if n_points < 2:
        raise InvalidArgument("need at least 2 grid points")
    rel = np.linspace(1e-6, 1.0 - 1e-6, n_points)
    table = {}
    for a in a_list:
        loc = Localizer(kind, float(a))
        x = (a + rel * a) if kind == "near_zero" else (a / 2 + rel * a / 2)
        vals = bump(loc, x)
        if k == 0:
            table[float(a)] = float(np.max(vals))
            continue
        jets = log_bump_jet(loc, x, k)
        table[float(a)] = float(np.max(vals * np.abs(jets[k]) ** p) * a ** (p * k))
    return table


@dataclass(frozen=True)
class LocalizerSet:
    """Per-path localizing variables Q0..Q5 and the two localized weights."""

    q: np.ndarray          # (paths, 6)
    u: np.ndarray          # (paths,)  psi(Q0)
    u_delta: np.ndarray    # (paths,)  prod_{i<=4} psi(Q_i) * phi(Q5)
    params: dict = field(default_factory=dict)

    @property
    def lam_exponent(self) -> float:
        return self.params["lam_exp"]


def build_localizers(f_values: np.ndarray, g_delta: np.ndarray, abar: np.ndarray,
                     lam: np.ndarray, q1: np.ndarray, q2: np.ndarray,
                     y: np.ndarray, r: float, delta: float, lambda_star: float,
                     gamma: float, drivers: int) -> LocalizerSet:
    """Assemble Q0..Q5 from the per-path ingredients:

      Q0 = |F - y| / r                     Q1 = 68 d^3 G_delta / (lambda* delta^2)
      Q2 = delta^-(gamma+2 lam) q1         Q3 = q2
      Q4 = delta^(gamma+lam) abar          Q5 = lambda(T,delta) / lambda*

    with lam = (1/2 - gamma)/3, U = psi(Q0), U_delta = prod psi(Q_i) phi(Q5)."""
    if not (0 <= gamma < 0.5):
        raise InvalidArgument("gamma must lie in [0, 1/2)")
    if r <= 0 or lambda_star <= 0 or delta <= 0:
        raise InvalidArgument("r, lambda_star, delta must be positive")
    lam_exp = (0.5 - gamma) / 3.0
    y = np.atleast_1d(np.asarray(y, dtype=float))
    n_paths = f_values.shape[0]
    q = np.empty((n_paths, 6))
    q[:, 0] = np.linalg.norm(f_values - y, axis=1) / r
    q[:, 1] = 68.0 * drivers ** 3 * g_delta / (lambda_star * delta ** 2)
    q[:, 2] = delta ** (-(gamma + 2 * lam_exp)) * q1
    q[:, 3] = q2
    q[:, 4] = delta ** (gamma + lam_exp) * abar
    q[:, 5] = lam / lambda_star
    u = bump(PSI_HALF, q[:, 0])
    u_delta = u.copy()
    for i in range(1, 5):
        u_delta *= bump(PSI_HALF, q[:, i])
    u_delta *= bump(PHI_TWO, q[:, 5])
    params = dict(y=y, r=float(r), delta=float(delta), lambda_star=float(lambda_star),
                  gamma=float(gamma), lam_exp=lam_exp, drivers=int(drivers))
    return LocalizerSet(q=q, u=u, u_delta=u_delta, params=params)


def support_inclusion_violations(locs: LocalizerSet, f_values: np.ndarray,
                                 lambda_event: np.ndarray) -> int:
    """Count paths with U_delta != 0 outside {|F - y| <= r} intersected with
    the good event (should be zero once delta^lam <= sqrt(lambda*)/(8 d))."""
    p = locs.params
    dist = np.linalg.norm(f_values - np.atleast_1d(p["y"]), axis=1)
    good = (dist <= p["r"]) & np.asarray(lambda_event, dtype=bool)
    return int(np.sum((locs.u_delta > 0) & ~good))


def m_p_estimate(u: np.ndarray, dln_u_sq: np.ndarray, p: int,
                 seed: int | None = None) -> McEstimate:
    """m_p(U) = E_U(|D ln U|^p) = E(U |D ln U|^p); dln_u_sq is the per-path
    squared L2(time) norm of D ln U (only needed where U > 0)."""
    if p < 1:
        raise InvalidArgument("p must be >= 1")
    u = np.asarray(u, dtype=float)
    samples = np.zeros_like(u)
    pos = u > 1e-300
    samples[pos] = u[pos] * np.asarray(dln_u_sq, dtype=float)[pos] ** (p / 2.0)
    n = samples.size
    return McEstimate(mean=float(samples.mean()),
                      se=float(samples.std(ddof=1) / np.sqrt(n)),
                      n_samples=n, seed=seed)
