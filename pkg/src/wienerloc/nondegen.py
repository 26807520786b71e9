"""Bracket-type non-degeneracy quantities for windowed functionals.

A coefficient family holds, per path, the first-order vectors a_i and the
pair vectors a_{i,j} (both measurable from the path before the window).  The
spectral quantity lambda is the smallest eigenvalue of

    M = sum_i a_i a_i^T + sum_{i,j} [a]_{i,j} [a]_{i,j}^T,
    [a]_{i,j} = a_{i,j} - a_{j,i},

i.e. the inf over unit xi of sum <a_i, xi>^2 + sum <[a]_{i,j}, xi>^2, computed
exactly by symmetric eigendecomposition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .mctypes import McEstimate, binomial_ci, loglog_slope, mc_from_samples
from .timegrid import InvalidArgument, PathBatch, Window, window_resample


@dataclass(frozen=True)
class CoefficientFamily:
    """first[..., i, :] = a_i in R^n; pair[..., i, j, :] = a_{i,j} in R^n.

    Leading axes (if any) index paths."""

    first: np.ndarray   # (..., d, n)
    pair: np.ndarray    # (..., d, d, n)

    @property
    def drivers(self) -> int:
        return self.first.shape[-2]

    @property
    def dim(self) -> int:
        return self.first.shape[-1]

    def antisym(self) -> np.ndarray:
        return self.pair - np.swapaxes(self.pair, -3, -2)

    def gram(self) -> np.ndarray:
        bracket = self.antisym()
        m = np.einsum("...ix,...iy->...xy", self.first, self.first)
        m += np.einsum("...ijx,...ijy->...xy", bracket, bracket)
        return m

    def abar(self) -> np.ndarray:
        return np.sqrt((self.first ** 2).sum(axis=(-2, -1))
                       + (self.pair ** 2).sum(axis=(-3, -2, -1)))


@dataclass(frozen=True)
class SpectrumReport:
    lam: np.ndarray       # smallest eigenvalue of M, per path
    abar: np.ndarray
    direction: np.ndarray  # minimizing unit vector, per path


def lambda_min(fam: CoefficientFamily) -> SpectrumReport:
    m = fam.gram()
    if not np.all(np.isfinite(m)):
        raise InvalidArgument("non-finite coefficient entries")
    vals, vecs = np.linalg.eigh(m)
    return SpectrumReport(lam=vals[..., 0], abar=fam.abar(),
                          direction=vecs[..., :, 0])


def capital_lambda(fam_at, n_free: int, box: np.ndarray, budget: int = 20,
                   seed: int = 0):
    """inf over the free coordinates x_hat in a compact box of the smallest
    eigenvalue of the family produced by fam_at(x_hat) -> CoefficientFamily.

    Multi-start local minimization (upper bound on the restricted inf);
    returns (value, minimizing x_hat).  n_free = 0 evaluates directly.
    """
    if budget < 1:
        raise InvalidArgument("budget must be >= 1")
    if n_free == 0:
        rep = lambda_min(fam_at(np.zeros(0)))
        return float(rep.lam), np.zeros(0)
    box = np.asarray(box, dtype=float).reshape(n_free, 2)
    if np.any(box[:, 1] < box[:, 0]):
        raise InvalidArgument("empty box")

    def objective(xh):
        return float(lambda_min(fam_at(np.asarray(xh))).lam)

    gen = np.random.Generator(np.random.Philox(key=np.array([seed, 0xA], dtype=np.uint64)))
    starts = box[:, 0] + (box[:, 1] - box[:, 0]) * gen.random((budget, n_free))
    starts[0] = box.mean(axis=1)
    best_val, best_x = np.inf, starts[0]
    for x0 in starts:
        res = optimize.minimize(objective, x0, method="Nelder-Mead",
                                bounds=list(map(tuple, box)))
        if res.fun < best_val:
            best_val, best_x = float(res.fun), np.clip(res.x, box[:, 0], box[:, 1])
    return best_val, best_x


@dataclass(frozen=True)
class TailRow:
    delta: float
    estimate: float
    ci_low: float
    ci_high: float
    hits: int
    n: int


def tail_probability(values_F: np.ndarray, lam: np.ndarray, y: np.ndarray,
                     r: float, lambda_star: float, delta: float,
                     confidence: float = 0.99) -> TailRow:
    """P({|F - y| <= r} and {lambda(T, delta) < lambda*}) with an exact
    binomial confidence interval; values are per-path arrays for one delta."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    dist = np.linalg.norm(values_F - y, axis=1)
    hit = (dist <= r) & (lam < lambda_star)
    n = hit.size
    k = int(hit.sum())
    lo, hi = binomial_ci(k, n, confidence)
    return TailRow(delta=float(delta), estimate=k / n, ci_low=lo, ci_high=hi,
                   hits=k, n=n)


def tail_slope(rows: list[TailRow], against: str = "inv_delta") -> float:
    """Fitted slope of log-probability; `against` is "inv_delta" (slope of
    log p vs 1/delta, negative under exponential decay) or "delta"."""
    rows = [r for r in rows if r.hits > 0]
    if len(rows) < 2:
        return float("nan")
    p = np.array([r.estimate for r in rows])
    d = np.array([r.delta for r in rows])
    x = 1.0 / d if against == "inv_delta" else d
    return float(np.polyfit(x, np.log(p), 1)[0])


def _window_derivative_means(F, w: Window, batch: PathBatch, n_inner: int,
                             seed: int, want_second: bool):
    """Nested-MC E_{T,delta} of the first (and optionally second) window
    derivatives of F, averaged over window resamples."""
    cells = w.cells
    acc1 = acc2 = None
    for rep in range(n_inner):
        rb = window_resample(batch, w, seed, rep)
        d1 = F.deriv(rb, 1, cells)
        acc1 = d1 if acc1 is None else acc1 + d1
        if want_second:
            d2 = F.deriv(rb, 2, cells)
            acc2 = d2 if acc2 is None else acc2 + d2
    return acc1 / n_inner, (acc2 / n_inner if want_second else None)


def epsilon_alpha(F, fam: CoefficientFamily, alpha: float, p: int, w: Window,
                  batch: PathBatch, n_inner: int, inner_seed: int | None = None,
                  d1_oracle: np.ndarray | None = None,
                  d2_oracle: np.ndarray | None = None) -> McEstimate:
    """Approximation error of the family (a_i, a_{i,j}) against the windowed
    conditional derivatives of F:

      sum_i E[( (1/delta) int |(E_td(D^i_s F) - a_i)/delta^(1/2+alpha)|^2 ds )^p]^(1/2p)
      + sum_{i,j} [ (1/delta^2) int_{s2<s1} E|(E_td(D^j_{s2}D^i_{s1}F) - a_{i,j})
                    / delta^(alpha/2)|^{2p} ds ]^(1/2p)

    Time integrals are h-weighted sums over window cells (strict lower
    triangle for the double integral).  Conditional expectations by nested
    window resampling, or supplied exactly via d1_oracle (paths, n, c, d) /
    d2_oracle (paths, n, c, d, c, d)."""
    if alpha <= 0 or p < 1:
        raise InvalidArgument("need alpha > 0 and p >= 1")
    seed = batch.base_seed if inner_seed is None else inner_seed
    if d1_oracle is None or d2_oracle is None:
        m1, m2 = _window_derivative_means(F, w, batch, n_inner, seed, True)
        d1 = m1 if d1_oracle is None else d1_oracle
        d2 = m2 if d2_oracle is None else d2_oracle
    else:
        d1, d2 = d1_oracle, d2_oracle
    h = batch.grid.h
    delta = w.delta
    d = fam.drivers
    n_paths = batch.n_paths

    total, var_acc = 0.0, 0.0

    def add(samples: np.ndarray, root: float) -> None:
        nonlocal total, var_acc
        mean = samples.mean()
        if mean <= 0:
            return
        se = samples.std(ddof=1) / np.sqrt(n_paths)
        term = mean ** (1.0 / root)
        total += term
        var_acc += (se * term / (root * mean)) ** 2

    first = np.broadcast_to(np.moveaxis(fam.first, -2, -1)[..., :, None, :],
                            d1.shape)  # align (paths, n, c, d)
    diff1 = (d1 - first) / delta ** (0.5 + alpha)
    sq1 = (diff1 ** 2).sum(axis=1)                      # (paths, c, d)
    for i in range(d):
        add(((h / delta) * sq1[:, :, i].sum(axis=1)) ** p, 2 * p)

    c = w.cell_count
    tri = np.tril(np.ones((c, c)), k=-1)                # s2 strictly below s1
    pair = fam.pair                                      # (paths?, d, d, n)
    for i in range(d):
        for j in range(d):
            # a_{i,j} multiplies int (W^i - W^i_{T-delta}) dW^j, so it is the
            # mixed derivative with driver j in the *later* slot: D^i_{s2} of
            # D^j_{s1}, s2 < s1
            target = np.atleast_2d(pair[..., i, j, :])  # (paths, n)
            diff = d2[:, :, :, j, :, i] - target[:, :, None, None]
            nrm2p = ((diff ** 2).sum(axis=1)) ** p      # (paths, c1, c2)
            samples = (h * h / delta ** (2 + alpha * p)) * (nrm2p * tri).sum(axis=(1, 2))
            add(samples, 2 * p)
    return McEstimate(mean=float(total), se=float(np.sqrt(var_acc)),
                      n_samples=n_paths, seed=seed)
