"""Windowed integration-by-parts machinery.

Everything here lives on the window cells: the covariance matrix of a
functional, the bracket-driven principal part Z_delta, the remainder energy
G_delta with its good event, and the localized IBP weights

  H_{i,U}(F,V) = sum_j ( V s^{ji} L F^j - <D(V s^{ji}), DF^j> - V s^{ji} <D ln U, DF^j> )

with s the inverse covariance, all derivatives, inner products and the
Ornstein-Uhlenbeck operator restricted to the window.  Weights of depth two
are built by the recursion H_{(a1,a2)} = H_{a2}(F, H_{a1}(F,1)), which
requires the window gradient of the inner weight; we compute that gradient in
closed form from the order-3 derivatives of F (no nested differentiation of
MC estimates is ever needed).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .funcalc import GridFunctional
from .localize import PHI_TWO, PSI_HALF, LocalizerSet, log_bump_jet
from .mctypes import McEstimate, loglog_slope
from .nondegen import CoefficientFamily
from .timegrid import (InvalidArgument, PathBatch, TimeGrid, Window,
                       conditional_expectation)


class DegenerateCovariance(RuntimeError):
    def __init__(self, paths: np.ndarray):
        self.paths = paths
        super().__init__(f"singular window covariance on {len(paths)} path(s) "
                         f"with positive localization, e.g. index {paths[0]}")


# ---------------------------------------------------------------------------
# covariance and the principal part
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WindowCovariance:
    matrix: np.ndarray       # (paths, n, n)
    det: np.ndarray          # (paths,)
    inv: np.ndarray          # (paths, n, n); rows of degenerate paths are zero
    degenerate: np.ndarray   # (paths,) bool
    window: Window


def _invert_covariance(sigma: np.ndarray, delta: float) -> tuple[np.ndarray, ...]:
    n = sigma.shape[-1]
    det = np.linalg.det(sigma)
    degenerate = ~(det > 1e-30 * delta ** (2 * n))
    safe = sigma.copy()
    safe[degenerate] = np.eye(n)
    inv = np.linalg.inv(safe)
    inv[degenerate] = 0.0
    return det, inv, degenerate


def window_covariance(F: GridFunctional, w: Window, batch: PathBatch) -> WindowCovariance:
    d1 = F.deriv_flat(batch, 1, w.cells)
    sigma = batch.grid.h * np.einsum("pnq,pmq->pnm", d1, d1)
    det, inv, degenerate = _invert_covariance(sigma, w.delta)
    return WindowCovariance(matrix=sigma, det=det, inv=inv,
                            degenerate=degenerate, window=w)


def _window_sums(batch: PathBatch, w: Window) -> tuple[np.ndarray, np.ndarray]:
    """(levels S_k = W_{t_k} - W_{T-delta} for window nodes k, (P, c, d);
    total increment W_T - W_{T-delta}, (P, d))."""
    dw = batch.increments[:, w.first_cell:w.last_cell + 1, :]
    levels = np.cumsum(dw, axis=1) - dw  # left-point: exclude the own cell
    return levels, dw.sum(axis=1)


def z_delta(fam: CoefficientFamily, w: Window, batch: PathBatch) -> np.ndarray:
    """Z_delta = sum_i a_i (W^i_T - W^i_{T-delta})
               + sum_{i,j} a_{i,j} * sum_k (W^i_{t_k} - W^i_{T-delta}) dW^j_k."""
    levels, total = _window_sums(batch, w)
    dw = batch.increments[:, w.first_cell:w.last_cell + 1, :]
    ito = np.einsum("pki,pkj->pij", levels, dw)       # left-point iterated sums
    first = fam.first if fam.first.ndim == 3 else fam.first[None]
    pair = fam.pair if fam.pair.ndim == 4 else fam.pair[None]
    out = np.einsum("pi,pin->pn", total, np.broadcast_to(
        first, (batch.n_paths,) + first.shape[-2:]))
    out += np.einsum("pij,pijn->pn", ito, np.broadcast_to(
        pair, (batch.n_paths,) + pair.shape[-3:]))
    return out


def z_delta_deriv(fam: CoefficientFamily, w: Window, batch: PathBatch,
                  order: int) -> np.ndarray:
    """Exact window derivatives of Z_delta; order 3 is identically zero.

    D^l_k Z = a_l + sum_i a_{i,l}(W^i_{t_k} - W^i_{T-delta})
                  + sum_j a_{l,j}(W^j_T - W^j_{t_{k+1}})."""
    p = batch.n_paths
    c, d = w.cell_count, batch.drivers
    first = np.broadcast_to(fam.first if fam.first.ndim == 3 else fam.first[None],
                            (p,) + fam.first.shape[-2:])         # (p, d, n)
    pair = np.broadcast_to(fam.pair if fam.pair.ndim == 4 else fam.pair[None],
                           (p,) + fam.pair.shape[-3:])           # (p, d, d, n)
    n = first.shape[-1]
    if order == 1:
        levels, total = _window_sums(batch, w)
        dw = batch.increments[:, w.first_cell:w.last_cell + 1, :]
        # remaining increments strictly after cell k: total - levels - own cell
        tail = total[:, None, :] - levels - dw                   # (p, c, d)
        out = np.broadcast_to(np.swapaxes(first, 1, 2)[:, :, None, :],
                              (p, n, c, d)).copy()
        out += np.einsum("pki,piln->pnkl", levels, pair)
        out += np.einsum("pkj,pljn->pnkl", tail, pair)
        return out
    if order == 2:
        below = np.tril(np.ones((c, c)), k=-1)   # second cell strictly before first
        out = np.einsum("km,piln->pnklmi", below, pair)
        out = out + np.einsum("km,plin->pnklmi", below.T, pair)
        return out
    return np.zeros((p, n) + (c, d) * order)


def z_delta_functional(fam: CoefficientFamily, w: Window, grid: TimeGrid) -> GridFunctional:
    """Z_delta with a deterministic coefficient family, as a functional."""
    if fam.first.ndim != 2:
        raise InvalidArgument("a functional wrapper needs a deterministic family")
    n = fam.dim

    def value(batch):
        return z_delta(fam, w, batch)

    def deriv(batch, order, cells):
        cells = np.asarray(cells)
        full = z_delta_deriv(fam, w, batch, order)
        # embed the window-cell derivative into the requested cell set
        p, d = batch.n_paths, batch.drivers
        c = len(cells)
        out = np.zeros((p, n) + (c, d) * order)
        inside = np.isin(cells, w.cells)
        if not inside.any():
            return out
        sel = np.searchsorted(w.cells, cells[inside])
        idx = np.where(inside)[0]
        if order == 1:
            out[:, :, idx, :] = full[:, :, sel, :]
        elif order == 2:
            tmp = full[:, :, sel, :, :, :][:, :, :, :, sel, :]
            ix = np.ix_(np.arange(p), np.arange(n), idx, np.arange(d),
                        idx, np.arange(d))
            out[ix] = tmp
        return out

    return GridFunctional(n, 3, value, deriv)


@dataclass(frozen=True)
class RemainderBundle:
    z: np.ndarray              # (paths, n)
    r_delta: np.ndarray | None  # (paths, n) or None if n_inner == 0
    g_delta: np.ndarray        # (paths,)
    q1: np.ndarray             # (paths,)
    q2: np.ndarray             # (paths,)
    abar: np.ndarray           # (paths,)
    lam: np.ndarray            # (paths,) spectral lower quantity lambda(T,delta)
    lambda_event: np.ndarray   # (paths,) bool


def remainder_bundle(F: GridFunctional, fam: CoefficientFamily, w: Window,
                     batch: PathBatch, lambda_star: float, n_inner: int = 0,
                     inner_seed: int | None = None) -> RemainderBundle:
    """Decomposition diagnostics on the window: Z, R = F - E_cond(F) - Z,
    G = h-sum of |D F - D Z|^2, the increment sizes q1, q2 and the good event

      {q1 <= sqrt(lambda*)/(8 abar d)} & {q2 <= 1}
      & {G <= lambda* delta^2 / 34} & {lambda >= lambda*}."""
    from .nondegen import lambda_min
    z = z_delta(fam, w, batch)
    d1f = F.deriv(batch, 1, w.cells)
    d1z = z_delta_deriv(fam, w, batch, 1)
    diff = d1f - d1z
    h = batch.grid.h
    g_delta = h * np.einsum("pnkl,pnkl->p", diff, diff)
    levels, total = _window_sums(batch, w)
    q1 = np.linalg.norm(total, axis=1)
    q2 = (h / w.delta) * np.einsum("pkl,pkl->p", levels, levels)
    spec = lambda_min(fam)
    lam = np.broadcast_to(np.atleast_1d(spec.lam), (batch.n_paths,))
    abar = np.broadcast_to(np.atleast_1d(spec.abar), (batch.n_paths,))
    d = batch.drivers
    with np.errstate(divide="ignore"):
        q1_cap = np.where(abar > 0, np.sqrt(lambda_star) / (8.0 * abar * d), np.inf)
    event = (q1 <= q1_cap) & (q2 <= 1.0) & \
        (g_delta <= lambda_star * w.delta ** 2 / 34.0) & (lam >= lambda_star)
    r_delta = None
    if n_inner:
        cond = conditional_expectation(F, w, batch, n_inner, inner_seed)
        r_delta = F.value(batch) - cond.mean - z
    return RemainderBundle(z=z, r_delta=r_delta, g_delta=g_delta, q1=q1, q2=q2,
                           abar=abar, lam=lam, lambda_event=event)


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WindowJets:
    """Flat window-coordinate derivatives of F plus the path data."""

    d1: np.ndarray           # (p, n, q)
    d2: np.ndarray           # (p, n, q, q)
    d3: np.ndarray | None    # (p, n, q, q, q); needed for weight gradients
    dw: np.ndarray           # (p, q) window increments
    h: float
    window: Window


def functional_jets(F: GridFunctional, w: Window, batch: PathBatch,
                    order: int = 2) -> WindowJets:
    cells = w.cells
    return WindowJets(
        d1=F.deriv_flat(batch, 1, cells),
        d2=F.deriv_flat(batch, 2, cells),
        d3=F.deriv_flat(batch, 3, cells) if order >= 3 else None,
        dw=batch.increments[:, w.first_cell:w.last_cell + 1, :].reshape(batch.n_paths, -1),
        h=batch.grid.h, window=w)


@dataclass(frozen=True)
class ScalarJet:
    """A scalar random variable with its window gradient (and optional Hessian)."""

    val: np.ndarray                # (p,)
    d1: np.ndarray                 # (p, q)
    d2: np.ndarray | None = None   # (p, q, q)


def unit_jet(p: int, q: int) -> ScalarJet:
    return ScalarJet(val=np.ones(p), d1=np.zeros((p, q)), d2=np.zeros((p, q, q)))


@dataclass(frozen=True)
class LocalizerJets:
    """U with the window jets of ln U (zero where U vanishes)."""

    u: np.ndarray                  # (p,)
    dln: np.ndarray                # (p, q)
    d2ln: np.ndarray | None = None  # (p, q, q)


def unit_localizer(p: int, q: int) -> LocalizerJets:
    return LocalizerJets(u=np.ones(p), dln=np.zeros((p, q)), d2ln=np.zeros((p, q, q)))


def _sigma_pack(jets: WindowJets, delta: float, order: int):
    """Covariance, inverse and their window derivatives from the F jets."""
    h = jets.h
    d1, d2, d3 = jets.d1, jets.d2, jets.d3
    sigma = h * np.einsum("pnq,pmq->pnm", d1, d1)
    det, inv, degenerate = _invert_covariance(sigma, delta)
    dsig = h * (np.einsum("pnqr,pmq->pnmr", d2, d1)
                + np.einsum("pnq,pmqr->pnmr", d1, d2))
    dinv = -np.einsum("pij,pjkr,pkl->pilr", inv, dsig, inv)
    d2sig = d2inv = None
    if order >= 2:
        if d3 is None:
            raise InvalidArgument("order-3 derivatives of F required")
        d2sig = h * (np.einsum("pnqrs,pmq->pnmrs", d3, d1)
                     + np.einsum("pnqr,pmqs->pnmrs", d2, d2)
                     + np.einsum("pnqs,pmqr->pnmrs", d2, d2)
                     + np.einsum("pnq,pmqrs->pnmrs", d1, d3))
        d2inv = -(np.einsum("pijr,pjks,pkl->pilrs", dinv, dsig, inv)
                  + np.einsum("pij,pjkrs,pkl->pilrs", inv, d2sig, inv)
                  + np.einsum("pij,pjks,pklr->pilrs", inv, dsig, dinv))
    return sigma, det, inv, degenerate, dsig, dinv, d2sig, d2inv


def weight_core(jets: WindowJets, loc: LocalizerJets, v: ScalarJet,
                want_grad: bool = False):
    """H_{i,U}(F, V) for all i (p, n), optionally with its window gradient
    (p, n, q).  Paths with U = 0 emit zero; a singular covariance on a path
    with U > 0 raises DegenerateCovariance."""
    h = jets.h
    d1, d2, d3, dw = jets.d1, jets.d2, jets.d3, jets.dw
    order = 2 if want_grad else 1
    sigma, det, inv, degenerate, dsig, dinv, d2sig, d2inv = \
        _sigma_pack(jets, jets.window.delta, order)
    bad = degenerate & (loc.u > 0)
    if bad.any():
        raise DegenerateCovariance(np.where(bad)[0])

    lf = np.einsum("pq,pnq->pn", dw, d1) - h * np.einsum("pnqq->pn", d2)
    # <D ln U, D F^j>_delta and <D(V s^{ji}), D F^j>_delta assembled per term
    dlnu_df = h * np.einsum("pq,pjq->pj", loc.dln, d1)          # (p, j)
    # D_q (V s^{ji}) = V_q s^{ji} + V (Ds)^{ji}_q
    term1 = np.einsum("pji,pj->pi", inv, lf) * v.val[:, None]
    term2 = h * (np.einsum("pq,pji,pjq->pi", v.d1, inv, d1)
                 + v.val[:, None] * np.einsum("pjiq,pjq->pi", dinv, d1))
    term3 = v.val[:, None] * np.einsum("pji,pj->pi", inv, dlnu_df)
    hval = term1 - term2 - term3
    hval[loc.u <= 0] = 0.0
    if not want_grad:
        return hval, None

    if v.d2 is None or loc.d2ln is None or d3 is None:
        raise InvalidArgument("gradient of the weight needs second-order jets")
    # D_r of each ingredient
    dlf = d1 + np.einsum("pq,pnqr->pnr", dw, d2) - h * np.einsum("pnqqr->pnr", d3)
    # D_r term1
    g1 = (np.einsum("pr,pji,pj->pir", v.d1, inv, lf)
          + v.val[:, None, None] * np.einsum("pjir,pj->pir", dinv, lf)
          + v.val[:, None, None] * np.einsum("pji,pjr->pir", inv, dlf))
    # D_r term2: D_r [ h sum_q (V_q s^{ji} + V Ds_q) d1[j, q] ]
    g2 = h * (np.einsum("pqr,pji,pjq->pir", v.d2, inv, d1)
              + np.einsum("pq,pjir,pjq->pir", v.d1, dinv, d1)
              + np.einsum("pr,pjiq,pjq->pir", v.d1, dinv, d1)
              + v.val[:, None, None] * np.einsum("pjiqr,pjq->pir", d2inv, d1)
              + np.einsum("pq,pji,pjqr->pir", v.d1, inv, d2)
              + v.val[:, None, None] * np.einsum("pjiq,pjqr->pir", dinv, d2))
    # D_r term3: D_r [ V s^{ji} h sum_q lnU_q d1[j, q] ]
    ddlnu_df = h * (np.einsum("pqr,pjq->pjr", loc.d2ln, d1)
                    + np.einsum("pq,pjqr->pjr", loc.dln, d2))
    g3 = (np.einsum("pr,pji,pj->pir", v.d1, inv, dlnu_df)
          + v.val[:, None, None] * np.einsum("pjir,pj->pir", dinv, dlnu_df)
          + v.val[:, None, None] * np.einsum("pji,pjr->pir", inv, ddlnu_df))
    grad = g1 - g2 - g3
    grad[loc.u <= 0] = 0.0
    return hval, grad


def divergence_residual(jets: WindowJets, loc: LocalizerJets, v: ScalarJet) -> np.ndarray:
    """Pathwise residual of the divergence form of the weight, (paths, n).

    On each path the localized weight admits the exact rewriting

        U * H_{i,U}(F,V) = sum_q A^i_q dW_q - h * sum_q D_q A^i_q,
        A^i_q = U * V * sum_j shat^{ji} * (D F^j)_q,

    because h <DF^j, A^i> = U V delta_{ij} collapses the chain-rule term.  The
    right-hand side is a plain Gaussian divergence, so its duality with
    E(U V df/dx_i(F)) is coordinatewise integration by parts -- exact, not a
    quadrature statement.  Agreement of the two assemblies (~1e-12) certifies
    the three-term weight formula independently of any integration scheme.
    """
    h = jets.h
    d1, d2, dw = jets.d1, jets.d2, jets.dw
    sigma, det, inv, degenerate, dsig, dinv, _, _ = \
        _sigma_pack(jets, jets.window.delta, order=1)
    bad = degenerate & (loc.u > 0)
    if bad.any():
        raise DegenerateCovariance(np.where(bad)[0])
    hval, _ = weight_core(jets, loc, v)

    uv = loc.u * v.val                                        # (p,)
    core = np.einsum("pji,pjq->piq", inv, d1)                 # shat^{ji} DF^j_q
    skorokhod = uv[:, None] * np.einsum("piq,pq->pi", core, dw)
    # sum_q D_q A^i_q, with D_q U = U * D_q ln U on {U > 0}
    div = (np.einsum("pq,piq->pi", loc.dln, core) * uv[:, None]
           + loc.u[:, None] * np.einsum("pq,piq->pi", v.d1, core)
           + uv[:, None] * (np.einsum("pjiq,pjq->pi", dinv, d1)
                            + np.einsum("pji,pjqq->pi", inv, d2)))
    rhs = skorokhod - h * div
    rhs[loc.u <= 0] = 0.0
    return loc.u[:, None] * hval - rhs


def ibp_weight(F: GridFunctional, w: Window, batch: PathBatch,
               loc: LocalizerJets | None = None,
               V: GridFunctional | None = None) -> np.ndarray:
    """Depth-1 weights H_{i,U}(F, V), (paths, n)."""
    jets = functional_jets(F, w, batch, order=2)
    p, q = jets.dw.shape
    loc = loc if loc is not None else unit_localizer(p, q)
    if V is None:
        vjet = unit_jet(p, q)
    else:
        vjet = ScalarJet(val=V.value(batch)[:, 0],
                         d1=V.deriv_flat(batch, 1, w.cells)[:, 0],
                         d2=V.deriv_flat(batch, 2, w.cells)[:, 0])
    hval, _ = weight_core(jets, loc, vjet)
    return hval


@dataclass(frozen=True)
class WeightTree:
    alpha: tuple[int, ...]
    values: np.ndarray           # (paths,)
    trace: tuple[tuple[int, ...], ...]


def ibp_weight_iterated(alpha, F: GridFunctional, w: Window, batch: PathBatch,
                        loc: LocalizerJets | None = None) -> WeightTree:
    """H_{alpha,U}(F, 1) by the recursion H_{(a1..ak)} = H_{ak}(F, H_{(a1..a(k-1))}).

    Depth <= 2 (the gradient of the inner weight consumes the order-3
    derivative budget of F)."""
    alpha = tuple(int(a) for a in alpha)
    if not 1 <= len(alpha) <= 2:
        from .funcalc import UnsupportedOrder
        raise UnsupportedOrder("iterated weights are limited to depth 2")
    order = 3 if len(alpha) == 2 else 2
    jets = functional_jets(F, w, batch, order=order)
    p, q = jets.dw.shape
    loc = loc if loc is not None else unit_localizer(p, q)
    trace = [(alpha[0],)]
    if len(alpha) == 1:
        hval, _ = weight_core(jets, loc, unit_jet(p, q))
        return WeightTree(alpha=alpha, values=hval[:, alpha[0]], trace=tuple(trace))
    inner, inner_grad = weight_core(jets, loc, unit_jet(p, q), want_grad=True)
    vjet = ScalarJet(val=inner[:, alpha[0]], d1=inner_grad[:, alpha[0]],
                     d2=None)
    outer, _ = weight_core(jets, loc, vjet)
    trace.append(alpha)
    return WeightTree(alpha=alpha, values=outer[:, alpha[1]], trace=tuple(trace))


# ---------------------------------------------------------------------------
# localizer jets (chain rule through the Q variables)
# ---------------------------------------------------------------------------

def _ball_q_jets(jets: WindowJets, f_values: np.ndarray, y: np.ndarray, r: float,
                 want_second: bool):
    """Q0 = |F - y|/r with window gradient and optional Hessian."""
    g = f_values - np.atleast_1d(y)
    s = np.linalg.norm(g, axis=1)
    s_safe = np.where(s > 0, s, 1.0)
    a = np.einsum("pn,pnq->pq", g, jets.d1)                  # (p, q)
    q0 = s / r
    dq0 = a / (r * s_safe[:, None])
    dq0[s == 0] = 0.0
    d2q0 = None
    if want_second:
        da = (np.einsum("pnr,pnq->pqr", jets.d1, jets.d1)
              + np.einsum("pn,pnqr->pqr", g, jets.d2))
        d2q0 = da / (r * s_safe[:, None, None]) \
            - np.einsum("pq,pr->pqr", a, a) / (r * s_safe[:, None, None] ** 3)
        d2q0[s == 0] = 0.0
    return q0, dq0, d2q0


def _g_delta_jets(jets: WindowJets, fam: CoefficientFamily, batch: PathBatch,
                  w: Window, want_second: bool):
    """G_delta = h |DF - DZ|^2 with window gradient / Hessian."""
    p = batch.n_paths
    c, d = w.cell_count, batch.drivers
    q = c * d
    h = jets.h
    e = jets.d1 - z_delta_deriv(fam, w, batch, 1).reshape(p, -1, q)
    de = jets.d2 - z_delta_deriv(fam, w, batch, 2).reshape(p, -1, q, q)
    g = h * np.einsum("pnq,pnq->p", e, e)
    dg = 2 * h * np.einsum("pnq,pnqr->pr", e, de)
    d2g = None
    if want_second:
        if jets.d3 is None:
            raise InvalidArgument("order-3 derivatives of F required")
        d2g = 2 * h * (np.einsum("pnqr,pnqs->prs", de, de)
                       + np.einsum("pnq,pnqrs->prs", e, jets.d3))
    return g, dg, d2g


def _q1_jets(batch: PathBatch, w: Window, want_second: bool):
    levels, total = _window_sums(batch, w)          # total (p, d)
    p, d = total.shape
    c = w.cell_count
    q1 = np.linalg.norm(total, axis=1)
    safe = np.where(q1 > 0, q1, 1.0)
    dq1 = np.broadcast_to((total / safe[:, None])[:, None, :], (p, c, d)).reshape(p, -1)
    d2q1 = None
    if want_second:
        m = np.eye(d)[None] / safe[:, None, None] \
            - np.einsum("pl,pm->plm", total, total) / safe[:, None, None] ** 3
        d2q1 = np.tile(m[:, None, :, None, :], (1, c, 1, c, 1)).reshape(p, c * d, c * d)
    return q1, dq1.copy(), d2q1


def _q2_jets(batch: PathBatch, w: Window, want_second: bool):
    levels, _ = _window_sums(batch, w)               # S_k, (p, c, d)
    p, c, d = levels.shape
    h = batch.grid.h
    scale = 2 * h / w.delta
    q2 = (h / w.delta) * np.einsum("pkl,pkl->p", levels, levels)
    # d q2 / d dW^l_k0 = scale * sum_{k > k0} S_k^l
    suffix = np.cumsum(levels[:, ::-1, :], axis=1)[:, ::-1, :] - levels
    dq2 = (scale * suffix).reshape(p, -1)
    d2q2 = None
    if want_second:
        counts = np.minimum(np.arange(c - 1, -1, -1)[:, None],
                            np.arange(c - 1, -1, -1)[None, :]).astype(float)
        d2q2 = scale * np.einsum("km,lj->klmj", counts, np.eye(d)).reshape(c * d, c * d)
        d2q2 = np.broadcast_to(d2q2, (p, c * d, c * d))
    return q2, dq2, d2q2


def localizer_jets(locs: LocalizerSet, jets: WindowJets, f_values: np.ndarray,
                   fam: CoefficientFamily | None, batch: PathBatch, w: Window,
                   ball_only: bool = False, want_second: bool = True) -> LocalizerJets:
    """Window jets of ln U (ball_only: U = psi(Q0)) or of ln U_delta.

    Q4 and Q5 are measurable from the pre-window path, so they contribute no
    window derivatives; Q1..Q3 jets are closed forms from the F and Z jets."""
    p_par = locs.params
    p, q = jets.dw.shape
    dln = np.zeros((p, q))
    d2ln = np.zeros((p, q, q)) if want_second else None

    def accumulate(kind, qv, dq, d2q):
        jet = log_bump_jet(kind, qv, 2 if want_second else 1)
        dln[:] += jet[1][:, None] * dq
        if want_second:
            d2ln[:] += jet[2][:, None, None] * np.einsum("pq,pr->pqr", dq, dq)
            if d2q is not None:
                d2ln[:] += jet[1][:, None, None] * d2q

    q0, dq0, d2q0 = _ball_q_jets(jets, f_values, p_par["y"], p_par["r"], want_second)
    accumulate(PSI_HALF, q0, dq0, d2q0)
    if ball_only:
        return LocalizerJets(u=locs.u, dln=dln, d2ln=d2ln)

    if fam is None:
        raise InvalidArgument("the full localizer jets need the coefficient family")
    scale1 = 68.0 * p_par["drivers"] ** 3 / (p_par["lambda_star"] * p_par["delta"] ** 2)
    g, dg, d2g = _g_delta_jets(jets, fam, batch, w, want_second)
    accumulate(PSI_HALF, scale1 * g, scale1 * dg,
               scale1 * d2g if want_second else None)
    scale2 = p_par["delta"] ** (-(p_par["gamma"] + 2 * p_par["lam_exp"]))
    q1, dq1, d2q1 = _q1_jets(batch, w, want_second)
    accumulate(PSI_HALF, scale2 * q1, scale2 * dq1,
               scale2 * d2q1 if want_second else None)
    q2, dq2, d2q2 = _q2_jets(batch, w, want_second)
    accumulate(PSI_HALF, q2, dq2, d2q2)
    # Q4, Q5: pre-window measurable, no window derivative; their bump values
    # only enter through u_delta itself.
    return LocalizerJets(u=locs.u_delta, dln=dln, d2ln=d2ln)


def weight_norm_scaling(rows: list[tuple[float, float]],) -> float:
    """Fitted log-log slope of per-delta weight norms [(delta, norm), ...]."""
    deltas = np.array([r[0] for r in rows])
    norms = np.array([r[1] for r in rows])
    return loglog_slope(deltas, norms)


def localized_norm(values: np.ndarray, u: np.ndarray, p: int) -> McEstimate:
    """||H||_{U,p} = E(U |H|^p)^{1/p} with a delta-method standard error."""
    samples = u * np.abs(values) ** p
    n = samples.size
    mean = samples.mean()
    se = samples.std(ddof=1) / np.sqrt(n)
    if mean <= 0:
        return McEstimate(mean=0.0, se=0.0, n_samples=n)
    return McEstimate(mean=float(mean ** (1.0 / p)),
                      se=float(se * mean ** (1.0 / p - 1.0) / p), n_samples=n)
