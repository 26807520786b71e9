"""Wiener functionals as smooth maps of the increment matrix.

A GridFunctional answers value queries and exact derivative queries (orders
1-3) with respect to the Brownian increments of selected grid cells.  The
derivative of order r at cells (k_1..k_r) and drivers (l_1..l_r) is the exact
partial derivative of the discrete map, which realizes the Malliavin
derivative D^{l_1..l_r}_{s_1..s_r} piecewise constantly in time.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .mctypes import McEstimate, mc_from_samples
from .timegrid import (InvalidArgument, PathBatch, TimeGrid, Window,
                       conditional_expectation, window_resample)


class UnsupportedOrder(ValueError):
    pass


class GridFunctional:
    """n-dimensional functional of the increment matrix with exact derivatives.

    value(batch)            -> (paths, n)
    deriv(batch, r, cells)  -> (paths, n, c, d, [c, d, [c, d]]) for r = 1..3,
                               cell/driver axes interleaved per derivative slot.
    """

    def __init__(self, n_out: int, smoothness: int,
                 value_fn: Callable[[PathBatch], np.ndarray],
                 deriv_fn: Callable[[PathBatch, int, np.ndarray], np.ndarray]):
        self.n_out = n_out
        self.smoothness = smoothness
        self._value_fn = value_fn
        self._deriv_fn = deriv_fn

    def value(self, batch: PathBatch) -> np.ndarray:
        out = np.asarray(self._value_fn(batch), dtype=float)
        if out.ndim == 1:
            out = out[:, None]
        return out

    def deriv(self, batch: PathBatch, order: int, cells: np.ndarray | None = None) -> np.ndarray:
        if order < 1 or order > self.smoothness:
            raise UnsupportedOrder(
                f"order {order} not available (declared smoothness {self.smoothness})")
        if cells is None:
            cells = np.arange(batch.grid.cell_count)
        return np.asarray(self._deriv_fn(batch, order, np.asarray(cells)), dtype=float)

    def deriv_flat(self, batch: PathBatch, order: int,
                   cells: np.ndarray | None = None) -> np.ndarray:
        """Same derivatives with each (cell, driver) slot flattened to one axis."""
        t = self.deriv(batch, order, cells)
        p, n = t.shape[:2]
        q = t.shape[2] * t.shape[3]
        return t.reshape((p, n) + (q,) * order)


@dataclass(frozen=True)
class DerivTensor:
    """Derivative values of one functional at the requested order and cells."""

    order: int
    cells: np.ndarray
    values: np.ndarray  # (paths, n, c, d, ...) interleaved per slot


def malliavin_derivative(F: GridFunctional, order: int, batch: PathBatch,
                         cells: np.ndarray | None = None) -> DerivTensor:
    if cells is None:
        cells = np.arange(batch.grid.cell_count)
    return DerivTensor(order=order, cells=np.asarray(cells),
                       values=F.deriv(batch, order, cells))


# ---------------------------------------------------------------------------
# shipped elementary functionals
# ---------------------------------------------------------------------------

def _node_index(grid: TimeGrid, t: float | None) -> int:
    if t is None:
        return grid.cell_count
    k = t / grid.h
    if abs(k - round(k)) > 1e-9:
        raise InvalidArgument(f"time {t} is not a grid node")
    return int(round(k))


def constant_functional(values: np.ndarray) -> GridFunctional:
    values = np.atleast_1d(np.asarray(values, dtype=float))
    n = values.size

    def value(batch):
        return np.broadcast_to(values, (batch.n_paths, n)).copy()

    def deriv(batch, order, cells):
        c, d = len(cells), batch.drivers
        return np.zeros((batch.n_paths, n) + (c, d) * order)

    return GridFunctional(n, 3, value, deriv)


def brownian_vector(grid: TimeGrid, drivers: int, t: float | None = None) -> GridFunctional:
    """F = (W^1_t, ..., W^d_t); first chaos in every driver."""
    k_end = _node_index(grid, t)

    def value(batch):
        return batch.increments[:, :k_end, :].sum(axis=1)

    def deriv(batch, order, cells):
        c, d = len(cells), batch.drivers
        out = np.zeros((batch.n_paths, d) + (c, d) * order)
        if order == 1:
            inside = np.asarray(cells) < k_end
            for i in range(d):
                out[:, i, inside, i] = 1.0
        return out

    return GridFunctional(drivers, 3, value, deriv)


def brownian_coordinate(grid: TimeGrid, drivers: int, driver: int = 0,
                        t: float | None = None) -> GridFunctional:
    k_end = _node_index(grid, t)

    def value(batch):
        return batch.increments[:, :k_end, driver].sum(axis=1)[:, None]

    def deriv(batch, order, cells):
        c, d = len(cells), batch.drivers
        out = np.zeros((batch.n_paths, 1) + (c, d) * order)
        if order == 1:
            inside = np.asarray(cells) < k_end
            out[:, 0, inside, driver] = 1.0
        return out

    return GridFunctional(1, 3, value, deriv)


def squared_brownian(grid: TimeGrid, drivers: int = 1, driver: int = 0,
                     t: float | None = None) -> GridFunctional:
    """F = (W^driver_t)^2."""
    k_end = _node_index(grid, t)

    def wt(batch):
        return batch.increments[:, :k_end, driver].sum(axis=1)

    def value(batch):
        return (wt(batch) ** 2)[:, None]

    def deriv(batch, order, cells):
        cells = np.asarray(cells)
        c, d = len(cells), batch.drivers
        out = np.zeros((batch.n_paths, 1) + (c, d) * order)
        inside = cells < k_end
        if order == 1:
            out[:, 0, inside, driver] = 2.0 * wt(batch)[:, None]
        elif order == 2:
            mask = np.outer(inside, inside)
            sub = np.zeros((c, d, c, d))
            sub[:, driver, :, driver] = 2.0 * mask
            out[:] = sub
        return out

    return GridFunctional(1, 3, value, deriv)


def linear_functional(grid: TimeGrid, coeffs: np.ndarray, const: float = 0.0) -> GridFunctional:
    """F = const + sum_{k,l} coeffs[k, l] dW^l_k (scalar first-chaos element)."""
    coeffs = np.asarray(coeffs, dtype=float)

    def value(batch):
        return (const + np.einsum("pkl,kl->p", batch.increments, coeffs))[:, None]

    def deriv(batch, order, cells):
        c, d = len(cells), batch.drivers
        out = np.zeros((batch.n_paths, 1) + (c, d) * order)
        if order == 1:
            out[:, 0] = coeffs[np.asarray(cells)]
        return out

    return GridFunctional(1, 3, value, deriv)


def autodiff_functional(fn, grid: TimeGrid, drivers: int, n_out: int,
                        smoothness: int = 3, chunk: int = 4096) -> GridFunctional:
    """Build a GridFunctional from a jax-traceable map (m, d) -> (n,).

    Derivatives are produced by nested forward-mode differentiation of the
    evaluator restricted to the requested cells; intended for oracles and
    small grids.
    """
    import jax
    import jax.numpy as jnp
    jax.config.update("jax_enable_x64", True)

    value_jit = jax.jit(jax.vmap(fn))

    def value(batch):
        return np.asarray(value_jit(jnp.asarray(batch.increments)))

    def deriv(batch, order, cells):
        cells = np.asarray(cells)

        def restricted(w_sub, w_full):
            return fn(w_full.at[cells].set(w_sub))

        g = restricted
        for _ in range(order):
            g = jax.jacfwd(g, argnums=0)
        g = jax.jit(jax.vmap(g, in_axes=(0, 0)))

        full = np.asarray(batch.increments)
        pieces = []
        for lo in range(0, batch.n_paths, chunk):
            w_full = jnp.asarray(full[lo:lo + chunk])
            pieces.append(np.asarray(g(w_full[:, cells, :], w_full)))
        return np.concatenate(pieces, axis=0)

    return GridFunctional(n_out, smoothness, value, deriv)


# ---------------------------------------------------------------------------
# operators and norms
# ---------------------------------------------------------------------------

def ou_operator(F: GridFunctional, batch: PathBatch,
                window: Window | None = None) -> np.ndarray:
    """Finite-dimensional Ornstein-Uhlenbeck operator, per path:
    LF = sum_{k,l} dW^l_k d_{k,l}F - h sum_{k,l} d^2_{(k,l),(k,l)}F.
    With a window, the sums run over the window cells only (L_delta)."""
    cells = window.cells if window is not None else np.arange(batch.grid.cell_count)
    d1 = F.deriv_flat(batch, 1, cells)
    d2 = F.deriv_flat(batch, 2, cells)
    dw = batch.increments[:, cells, :].reshape(batch.n_paths, -1)
    h = batch.grid.h
    return np.einsum("pq,pnq->pn", dw, d1) - h * np.einsum("pnqq->pn", d2)


def _deriv_sq_by_driver_index(F: GridFunctional, order: int, batch: PathBatch,
                              cells: np.ndarray) -> np.ndarray:
    """h^r-weighted squared L2(time) masses, one entry per driver multi-index:
    returns (paths, n, d, ..., d) with r driver axes."""
    t = F.deriv(batch, order, cells)  # (p, n, c, d, c, d, ...)
    p, n = t.shape[:2]
    # move all driver axes behind n, all cell axes to the back
    cell_axes = [2 + 2 * i for i in range(order)]
    driver_axes = [3 + 2 * i for i in range(order)]
    t = np.transpose(t, [0, 1] + driver_axes + cell_axes)
    d = batch.drivers
    c = len(cells)
    t = t.reshape((p, n) + (d,) * order + (c ** order,))
    return (batch.grid.h ** order) * np.einsum("...c,...c->...", t, t)


def sobolev_norm_estimate(F: GridFunctional, k: int, p: int, batch: PathBatch,
                          window: Window | None = None) -> McEstimate:
    """MC estimate of ||F||_{k,p}: ||F||_p plus, for every derivative order
    r <= k and every driver multi-index, E(|D^a F|_{L2}^p)^{1/p}.  Vector F is
    summed component-wise.  Time integrals are h-weighted sums over the whole
    grid, or over the window cells when a window is given."""
    if p % 2 != 0 or p < 2:
        raise InvalidArgument("p must be a positive even integer")
    if k > F.smoothness:
        raise UnsupportedOrder(f"k={k} exceeds declared smoothness {F.smoothness}")
    cells = window.cells if window is not None else np.arange(batch.grid.cell_count)
    vals = F.value(batch)

    total = 0.0
    var_acc = 0.0
    n_paths = batch.n_paths

    def add_term(samples: np.ndarray) -> None:
        # term = E(samples)^{1/p}, delta-method SE
        nonlocal total, var_acc
        mean = samples.mean()
        if mean <= 0:
            return
        se = samples.std(ddof=1) / np.sqrt(n_paths)
        term = mean ** (1.0 / p)
        total += term
        var_acc += (se * term / (p * mean)) ** 2

    for i in range(F.n_out):
        add_term(np.abs(vals[:, i]) ** p)
    for r in range(1, k + 1):
        mass = _deriv_sq_by_driver_index(F, r, batch, cells)  # (p, n, d^r)
        flat = mass.reshape(n_paths, F.n_out, -1)
        for i in range(F.n_out):
            for a in range(flat.shape[2]):
                add_term(flat[:, i, a] ** (p / 2))
    return McEstimate(mean=float(total), se=float(np.sqrt(var_acc)),
                      n_samples=n_paths, seed=batch.base_seed)


def seminorm_estimate(F: GridFunctional, k: int, p: int, q: int, batch: PathBatch,
                      window: Window | None = None) -> McEstimate:
    """|||F|||_{k,p,q}: orders 3..k only, inner L^q time integral, outer
    p-expectation (the display convention; ignores ||F||_p and orders 1-2)."""
    if p % 2 != 0 or q < 2:
        raise InvalidArgument("p must be even and q >= 2")
    cells = window.cells if window is not None else np.arange(batch.grid.cell_count)
    h = batch.grid.h
    total = 0.0
    var_acc = 0.0
    n_paths = batch.n_paths
    for r in range(3, k + 1):
        t = F.deriv(batch, r, cells)
        pn = t.shape[:2]
        cell_axes = [2 + 2 * i for i in range(r)]
        driver_axes = [3 + 2 * i for i in range(r)]
        t = np.transpose(t, [0, 1] + driver_axes + cell_axes)
        t = t.reshape(pn + (batch.drivers ** r, -1))
        lq = (h ** r) * (np.abs(t) ** q).sum(axis=-1)   # |D^a F^i|_{Lq}^q
        for i in range(F.n_out):
            for a in range(lq.shape[2]):
                samples = lq[:, i, a] ** (p / q)
                mean = samples.mean()
                if mean <= 0:
                    continue
                se = samples.std(ddof=1) / np.sqrt(n_paths)
                term = mean ** (1.0 / p)
                total += term
                var_acc += (se * term / (p * mean)) ** 2
    return McEstimate(mean=float(total), se=float(np.sqrt(var_acc)),
                      n_samples=n_paths, seed=batch.base_seed)


def clark_ocone_residual(F: GridFunctional, w: Window, batch: PathBatch,
                         n_inner: int, inner_seed: int | None = None,
                         integrand_oracle=None, cond_oracle=None) -> McEstimate:
    """Mean squared residual of the windowed martingale representation

        F - E_{T,delta}(F) - sum_i sum_{window cells k} E_{T,T-t_k}(D^i_{t_k}F) dW^i_k.

    Inner conditional expectations by nested window resampling; pass
    integrand_oracle(batch, cell) -> (paths, n, d) and/or
    cond_oracle(batch) -> (paths, n) to replace the nested estimates with
    exact conditional expectations (removes inner-MC noise when studying
    discretization rates)."""
    if n_inner < 2:
        raise InvalidArgument("n_inner must be >= 2")
    seed = batch.base_seed if inner_seed is None else inner_seed
    if cond_oracle is not None:
        cond_mean = np.asarray(cond_oracle(batch), dtype=float)
        if cond_mean.ndim == 1:
            cond_mean = cond_mean[:, None]
    else:
        cond_mean = conditional_expectation(F, w, batch, n_inner, seed).mean
    res = F.value(batch) - cond_mean
    for k in range(w.first_cell, w.last_cell + 1):
        if integrand_oracle is not None:
            integ = np.asarray(integrand_oracle(batch, k), dtype=float)
        else:
            sub = Window(w.t_end, w.t_end - k * batch.grid.h, k, w.last_cell)
            acc = None
            for rep in range(n_inner):
                d1 = F.deriv(window_resample(batch, sub, seed, rep), 1,
                             np.array([k]))[:, :, 0, :]
                acc = d1 if acc is None else acc + d1
            integ = acc / n_inner
        res -= np.einsum("pnl,pl->pn", integ, batch.increments[:, k, :])
    return mc_from_samples((res ** 2).sum(axis=1), seed=seed)
