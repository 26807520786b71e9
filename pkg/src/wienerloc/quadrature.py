"""Deterministic Gaussian expectations on small grids.

Tensor-product Gauss-Hermite quadrature over the full increment matrix, used
as an independent oracle against Monte Carlo results.  The number of abscissas
grows as nodes^(m*d); callers keep m*d small (<= 6 or so) and we chunk the
flat index range so memory stays bounded.
"""

from __future__ import annotations

import numpy as np
from scipy import special

from .timegrid import InvalidArgument, PathBatch, TimeGrid


def gauss_hermite_1d(nodes: int) -> tuple[np.ndarray, np.ndarray]:
    """Abscissas/weights for E[f(Z)], Z standard normal."""
    x, w = special.roots_hermitenorm(nodes)
    return x, w / w.sum()


def gh_expectation(func, grid: TimeGrid, drivers: int, nodes: int,
                   chunk: int = 1 << 19):
    """E[func(batch)] by tensor-product quadrature over all m*d increments.

    func maps a PathBatch to an array whose leading axis indexes paths; the
    weighted sum over that axis is returned.
    """
    dim = grid.cell_count * drivers
    total = nodes ** dim
    if total > 1 << 28:
        raise InvalidArgument(
            f"quadrature grid with {total} points is too large (dim={dim}, nodes={nodes})")
    x1, w1 = gauss_hermite_1d(nodes)
    scale = np.sqrt(grid.h)
    acc = None
    for lo in range(0, total, chunk):
        hi = min(lo + chunk, total)
        idx = np.array(np.unravel_index(np.arange(lo, hi), (nodes,) * dim))  # (dim, K)
        pts = (x1[idx].T * scale).reshape(hi - lo, grid.cell_count, drivers)
        wts = w1[idx].prod(axis=0)
        pts.setflags(write=False)
        batch = PathBatch(grid, drivers, pts, base_seed=0)
        vals = np.asarray(func(batch), dtype=float)
        contrib = np.tensordot(wts, vals, axes=(0, 0))
        acc = contrib if acc is None else acc + contrib
    return acc
