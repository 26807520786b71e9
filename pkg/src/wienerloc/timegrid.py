"""Uniform time grids, Brownian increment batches, window operations and the
nested-simulation conditional expectation that conditions on everything
outside a window (T - delta, T].
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from . import rng
from .mctypes import PathwiseEstimate

if TYPE_CHECKING:  # pragma: no cover
    from .funcalc import GridFunctional


class InvalidArgument(ValueError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    horizon: float      # T0
    cell_count: int     # m

    @property
    def h(self) -> float:
        return self.horizon / self.cell_count

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.cell_count + 1)


def make_grid(horizon: float, cell_count: int) -> TimeGrid:
    if not horizon > 0:
        raise InvalidArgument(f"horizon must be positive, got {horizon}")
    if cell_count < 1:
        raise InvalidArgument(f"cell_count must be >= 1, got {cell_count}")
    return TimeGrid(float(horizon), int(cell_count))


@dataclass(frozen=True)
class Window:
    """The interval (T - delta, T], stored as the covered cell index range."""

    t_end: float        # T
    delta: float
    first_cell: int     # first covered cell index
    last_cell: int      # last covered cell index (inclusive)

    @property
    def cells(self) -> np.ndarray:
        return np.arange(self.first_cell, self.last_cell + 1)

    @property
    def cell_count(self) -> int:
        return self.last_cell - self.first_cell + 1


def make_window(grid: TimeGrid, t_end: float, delta: float) -> Window:
    """Window boundaries must sit on grid nodes (delta, T multiples of h)."""
    if not (0 < delta < t_end <= grid.horizon * (1 + 1e-12)):
        raise InvalidArgument(f"need 0 < delta < T <= T0, got T={t_end}, delta={delta}")
    h = grid.h
    k_end = t_end / h
    k_start = (t_end - delta) / h
    if abs(k_end - round(k_end)) > 1e-9 or abs(k_start - round(k_start)) > 1e-9:
        raise InvalidArgument(
            f"window [{t_end - delta}, {t_end}] is not aligned with the grid (h={h})")
    first, last = int(round(k_start)), int(round(k_end)) - 1
    return Window(float(t_end), float(delta), first, last)


@dataclass(frozen=True)
class PathBatch:
    """A batch of Brownian increment matrices.  Immutable after creation."""

    grid: TimeGrid
    drivers: int
    increments: np.ndarray    # (n_paths, m, d), each entry N(0, h)
    base_seed: int

    @property
    def n_paths(self) -> int:
        return self.increments.shape[0]

    def levels(self) -> np.ndarray:
        """Brownian values at the grid nodes, (n_paths, m + 1, d); W_0 = 0."""
        m = self.grid.cell_count
        out = np.zeros((self.n_paths, m + 1, self.drivers))
        np.cumsum(self.increments, axis=1, out=out[:, 1:, :])
        return out

    def replace_increments(self, increments: np.ndarray) -> "PathBatch":
        increments = np.ascontiguousarray(increments)
        increments.setflags(write=False)
        return PathBatch(self.grid, self.drivers, increments, self.base_seed)


def sample_increments(grid: TimeGrid, drivers: int, n_paths: int, seed: int) -> PathBatch:
    if drivers < 1 or n_paths < 1:
        raise InvalidArgument("drivers and n_paths must be >= 1")
    z = rng.normals(seed, rng.stream_tag(rng.TAG_OUTER), (n_paths, grid.cell_count, drivers))
    dw = z * np.sqrt(grid.h)
    dw.setflags(write=False)
    return PathBatch(grid, drivers, dw, seed)


def window_normals(batch: PathBatch, w: Window, inner_seed: int,
                   replication: int = 0) -> np.ndarray:
    """Fresh window increments, (n_paths, window cells, d)."""
    shape = (batch.n_paths, w.cell_count, batch.drivers)
    tag = rng.stream_tag(rng.TAG_INNER, w.first_cell, replication)
    return rng.normals(inner_seed, tag, shape) * np.sqrt(batch.grid.h)


def window_resample(batch: PathBatch, w: Window, inner_seed: int,
                    replication: int = 0) -> PathBatch:
    """Replace the increments inside the window with fresh Gaussian draws."""
    _check_alignment(batch, w)
    dw = batch.increments.copy()
    dw[:, w.first_cell:w.last_cell + 1, :] = window_normals(batch, w, inner_seed, replication)
    return batch.replace_increments(dw)


def _check_alignment(batch: PathBatch, w: Window) -> None:
    if not (0 <= w.first_cell <= w.last_cell < batch.grid.cell_count):
        raise InvalidArgument("window does not fit inside the batch grid")
    h = batch.grid.h
    if abs(w.t_end - (w.last_cell + 1) * h) > 1e-9 * max(1.0, w.t_end):
        raise InvalidArgument("window is not aligned with the batch grid")


def conditional_expectation(F: "GridFunctional", w: Window, batch: PathBatch,
                            n_inner: int, inner_seed: int | None = None) -> PathwiseEstimate:
    """Per-path nested estimate of the conditional expectation given everything
    outside the window: average F over window-resampled copies of each path."""
    if n_inner < 2:
        raise InvalidArgument("n_inner must be >= 2 for a variance estimate")
    _check_alignment(batch, w)
    seed = batch.base_seed if inner_seed is None else inner_seed
    total = None
    total_sq = None
    for rep in range(n_inner):
        vals = F.value(window_resample(batch, w, seed, rep))
        if total is None:
            total = np.zeros_like(vals)
            total_sq = np.zeros_like(vals)
        total += vals
        total_sq += vals * vals
    mean = total / n_inner
    var = np.maximum(total_sq / n_inner - mean * mean, 0.0) * n_inner / (n_inner - 1)
    return PathwiseEstimate(mean=mean, se=np.sqrt(var / n_inner), n_inner=n_inner, seed=seed)
