"""Euler schemes and their exact pathwise derivatives.

A DiffusionModel bundles the coefficients of dX = b(X)dt + sum_j sigma_j(X)dW^j
together with their spatial derivatives.  `variations` pushes first/second/
third order derivative tensors of the Euler endpoint with respect to selected
increment coordinates through the scheme step by step (exact chain rule on the
discrete map, no finite differences), which makes the Euler endpoint available
as a GridFunctional with smoothness 3.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .funcalc import GridFunctional
from .nondegen import CoefficientFamily
from .timegrid import InvalidArgument, PathBatch, TimeGrid


class SimulationBlowup(RuntimeError):
    pass


@dataclass(frozen=True)
class DiffusionModel:
    """Coefficients, vectorized over paths: callables take (P, N) states.

    sigma(x) -> (P, N, d); b(x) -> (P, N)
    dsigma(x)[p, i, j, k]  = d sigma[i, j] / d x_k
    db(x)[p, i, k]         = d b[i] / d x_k
    d2*/d3* append further state axes; None means identically zero.
    """

    name: str
    dim: int
    drivers: int
    x0: np.ndarray
    sigma: Callable
    b: Callable
    dsigma: Callable
    db: Callable
    d2sigma: Callable | None = None
    d2b: Callable | None = None
    d3sigma: Callable | None = None
    d3b: Callable | None = None
    meta: dict = field(default_factory=dict)


def _const(arr):
    arr = np.asarray(arr, dtype=float)

    def fn(x):
        return np.broadcast_to(arr, (x.shape[0],) + arr.shape)

    return fn


def make_additive(dim: int, drift: np.ndarray | None = None,
                  x0: np.ndarray | None = None) -> DiffusionModel:
    """dX = b dt + dW, N = d, identity diffusion matrix."""
    drift = np.zeros(dim) if drift is None else np.asarray(drift, dtype=float)
    x0 = np.zeros(dim) if x0 is None else np.asarray(x0, dtype=float)
    return DiffusionModel(
        name="additive", dim=dim, drivers=dim, x0=x0,
        sigma=_const(np.eye(dim)), b=_const(drift),
        dsigma=_const(np.zeros((dim, dim, dim))), db=_const(np.zeros((dim, dim))))


def make_scalar_linear(a: float = 1.0, x0: float = 1.0) -> DiffusionModel:
    """dX = a X dW; the Euler endpoint is x0 * prod_k (1 + a dW_k)."""
    def sigma(x):
        return a * x[:, :, None]

    return DiffusionModel(
        name="scalar_linear", dim=1, drivers=1, x0=np.array([float(x0)]),
        sigma=sigma, b=_const(np.zeros(1)),
        dsigma=_const(np.full((1, 1, 1), a)), db=_const(np.zeros((1, 1))),
        meta={"a": float(a)})


def make_heisenberg() -> DiffusionModel:
    """N = 3, d = 2 with sigma_1 = (1, 0, 0), sigma_2 = (0, 1, x_1), b = 0.

    The diffusion vector fields span only a plane, but their bracket restores
    the third direction, so the bracket-augmented spectral bound is 1 at the
    origin."""
    def sigma(x):
        out = np.zeros((x.shape[0], 3, 2))
        out[:, 0, 0] = 1.0
        out[:, 1, 1] = 1.0
        out[:, 2, 1] = x[:, 0]
        return out

    dsig = np.zeros((3, 2, 3))
    dsig[2, 1, 0] = 1.0
    return DiffusionModel(
        name="heisenberg", dim=3, drivers=2, x0=np.zeros(3),
        sigma=sigma, b=_const(np.zeros(3)),
        dsigma=_const(dsig), db=_const(np.zeros((3, 3))))


def make_heisenberg_area() -> DiffusionModel:
    """N = 3, d = 2 with sigma_1 = (1, 0, 0), sigma_2 = (0, x_1, 1), b = 0.

    Same bracket structure as `heisenberg` but with the Ito area integral in
    the second coordinate, so the (X^1, X^2) projection is the canonical
    degenerate pair (W^1_T, int W^1 dW^2)."""
    def sigma(x):
        out = np.zeros((x.shape[0], 3, 2))
        out[:, 0, 0] = 1.0
        out[:, 1, 1] = x[:, 0]
        out[:, 2, 1] = 1.0
        return out

    dsig = np.zeros((3, 2, 3))
    dsig[1, 1, 0] = 1.0
    return DiffusionModel(
        name="heisenberg_area", dim=3, drivers=2, x0=np.zeros(3),
        sigma=sigma, b=_const(np.zeros(3)),
        dsigma=_const(dsig), db=_const(np.zeros((3, 3))))


MODELS: dict[str, Callable[[], DiffusionModel]] = {
    "additive": lambda: make_additive(2),
    "scalar_linear": make_scalar_linear,
    "heisenberg": make_heisenberg,
    "heisenberg_area": make_heisenberg_area,
}


def euler_simulate(model: DiffusionModel, grid: TimeGrid, batch: PathBatch) -> np.ndarray:
    """All Euler states, (paths, m + 1, N)."""
    if batch.drivers != model.drivers:
        raise InvalidArgument("batch driver count does not match the model")
    h = grid.h
    p = batch.n_paths
    out = np.empty((p, grid.cell_count + 1, model.dim))
    x = np.broadcast_to(model.x0, (p, model.dim)).copy()
    out[:, 0] = x
    for k in range(grid.cell_count):
        w = batch.increments[:, k, :]
        x = x + model.b(x) * h + np.einsum("pij,pj->pi", model.sigma(x), w)
        out[:, k + 1] = x
    if not np.all(np.isfinite(out)):
        raise SimulationBlowup(f"non-finite Euler state for model {model.name}")
    return out


def variations(model: DiffusionModel, batch: PathBatch, order: int = 1,
               cells: np.ndarray | None = None):
    """Euler endpoint and its derivative tensors w.r.t. selected increments.

    Returns (x_T, [T1, ..., T_order]) with T_r of shape
    (paths, N, c, d, [c, d, [c, d]]).  Exact derivatives of the discrete
    scheme, propagated with the chain rule of the one-step map
    Phi(x, w) = x + b(x) h + sigma(x) w (which is affine in w, so all
    mixed second derivatives in two w-slots vanish).
    """
    if order < 1 or order > 3:
        raise InvalidArgument("variation order must be 1, 2 or 3")
    grid = batch.grid
    m = grid.cell_count
    if cells is None:
        cells = np.arange(m)
    cells = np.asarray(cells)
    pos = {int(c): s for s, c in enumerate(cells)}
    p, d, n = batch.n_paths, model.drivers, model.dim
    q = len(cells) * d
    h = grid.h

    x = np.broadcast_to(model.x0, (p, n)).copy()
    t1 = np.zeros((p, n, q))
    t2 = np.zeros((p, n, q, q)) if order >= 2 else None
    t3 = np.zeros((p, n, q, q, q)) if order >= 3 else None

    for k in range(m):
        w = batch.increments[:, k, :]
        sig = model.sigma(x)
        dsig = model.dsigma(x)
        # one-step Jacobian in the state: A[p, i, a]
        a_mat = np.eye(n)[None] + h * model.db(x) + np.einsum("pijk,pj->pik", dsig, w)
        hxw = dsig  # d^2 Phi_i / d w_j d x_a  at [p, i, j, a]
        hxx = None
        if model.d2b is not None or model.d2sigma is not None:
            hxx = np.zeros((p, n, n, n))
            if model.d2b is not None:
                hxx += h * model.d2b(x)
            if model.d2sigma is not None:
                hxx += np.einsum("pijab,pj->piab", model.d2sigma(x), w)
        hxxw = model.d2sigma(x) if model.d2sigma is not None else None
        hxxx = None
        if model.d3b is not None or model.d3sigma is not None:
            hxxx = np.zeros((p, n, n, n, n))
            if model.d3b is not None:
                hxxx += h * model.d3b(x)
            if model.d3sigma is not None:
                hxxx += np.einsum("pijabc,pj->piabc", model.d3sigma(x), w)

        active = k in pos
        s = pos[k] * d if active else -1

        if order >= 3:
            new3 = np.einsum("pia,paqrs->piqrs", a_mat, t3)
            if hxx is not None:
                mix = np.einsum("piab,paq,pbrs->piqrs", hxx, t1, t2)
                new3 += mix + mix.transpose(0, 1, 3, 2, 4) + mix.transpose(0, 1, 3, 4, 2)
            if hxxx is not None:
                new3 += np.einsum("piabc,paq,pbr,pcs->piqrs", hxxx, t1, t1, t1)
            if active:
                # d^2 Phi / dw dx applied to the second variation
                cr2 = np.einsum("pija,paqr->piqrj", hxw, t2)
                new3[:, :, :, :, s:s + d] += cr2
                new3[:, :, :, s:s + d, :] += cr2.transpose(0, 1, 2, 4, 3)
                new3[:, :, s:s + d, :, :] += cr2.transpose(0, 1, 4, 2, 3)
                if hxxw is not None:
                    cr1 = np.einsum("pijab,paq,pbr->piqrj", hxxw, t1, t1)
                    new3[:, :, :, :, s:s + d] += cr1
                    new3[:, :, :, s:s + d, :] += cr1.transpose(0, 1, 2, 4, 3)
                    new3[:, :, s:s + d, :, :] += cr1.transpose(0, 1, 4, 2, 3)
            t3 = new3
        if order >= 2:
            new2 = np.einsum("pia,paqr->piqr", a_mat, t2)
            if hxx is not None:
                new2 += np.einsum("piab,paq,pbr->piqr", hxx, t1, t1)
            if active:
                cr = np.einsum("pija,paq->piqj", hxw, t1)
                new2[:, :, :, s:s + d] += cr
                new2[:, :, s:s + d, :] += cr.transpose(0, 1, 3, 2)
            t2 = new2
        t1 = np.einsum("pia,paq->piq", a_mat, t1)
        if active:
            t1[:, :, s:s + d] += sig
        x = x + model.b(x) * h + np.einsum("pij,pj->pi", sig, w)

    if not np.all(np.isfinite(x)):
        raise SimulationBlowup(f"non-finite Euler state for model {model.name}")
    c = len(cells)
    tensors = [t1.reshape(p, n, c, d)]
    if order >= 2:
        tensors.append(t2.reshape(p, n, c, d, c, d))
    if order >= 3:
        tensors.append(t3.reshape(p, n, c, d, c, d, c, d))
    return x, tensors


def euler_functional(model: DiffusionModel, grid: TimeGrid,
                     coords: np.ndarray | None = None) -> GridFunctional:
    """Euler endpoint (optionally a coordinate projection) as a GridFunctional."""
    coords = np.arange(model.dim) if coords is None else np.asarray(coords)

    def value(batch):
        return euler_simulate(model, grid, batch)[:, -1, coords]

    def deriv(batch, order, cells):
        _, tens = variations(model, batch, order=order, cells=cells)
        return tens[order - 1][:, coords]

    return GridFunctional(len(coords), 3, value, deriv)


def lie_bracket(model: DiffusionModel, x: np.ndarray, i: int, j: int) -> np.ndarray:
    """[sigma_i, sigma_j](x) = (grad sigma_j) sigma_i - (grad sigma_i) sigma_j."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    sig = model.sigma(x)
    dsig = model.dsigma(x)
    out = (np.einsum("pak,pk->pa", dsig[:, :, j, :], sig[:, :, i])
           - np.einsum("pak,pk->pa", dsig[:, :, i, :], sig[:, :, j]))
    return out[0] if out.shape[0] == 1 else out


def model_coefficients(model: DiffusionModel,
                       coords: np.ndarray | None = None) -> Callable[[np.ndarray], CoefficientFamily]:
    """Coefficient family of the coordinate projection of the diffusion:
    a_j(x) = projected sigma_j(x) and a_{j,p}(x) = projected (grad sigma_p) sigma_j,
    whose antisymmetrization is the projected Lie bracket [sigma_j, sigma_p].
    The returned builder accepts a single state (N,) or a batch (paths, N)."""
    coords = np.arange(model.dim) if coords is None else np.asarray(coords)

    def fam(x):
        x2 = np.atleast_2d(np.asarray(x, dtype=float))
        sig = model.sigma(x2)                         # (P, N, d)
        dsig = model.dsigma(x2)                       # (P, N, d, N)
        first = np.swapaxes(sig[:, coords, :], 1, 2)  # (P, d, n): a_j
        # pair[p, j, q, :] = sum_k sigma_j^k d_k sigma_q (projected)
        pair = np.einsum("piqk,pkj->pjqi", dsig[:, coords, :, :], sig)
        if np.asarray(x).ndim == 1:
            return CoefficientFamily(first=first[0], pair=pair[0])
        return CoefficientFamily(first=first, pair=pair)

    return fam


def capital_lambda_model(model: DiffusionModel, coords, x_bar: np.ndarray,
                         box: np.ndarray, budget: int = 20, seed: int = 0):
    """Spectral lower bound of the coordinate projection at x_bar, minimized
    over the remaining state coordinates inside a compact box."""
    from .nondegen import capital_lambda
    coords = np.asarray(coords)
    others = np.setdiff1d(np.arange(model.dim), coords)
    builder = model_coefficients(model, coords)
    x_bar = np.asarray(x_bar, dtype=float)

    def fam_at(x_hat):
        x = np.zeros(model.dim)
        x[coords] = x_bar
        x[others] = x_hat
        return builder(x)

    return capital_lambda(fam_at, len(others), np.asarray(box, dtype=float),
                          budget=budget, seed=seed)
