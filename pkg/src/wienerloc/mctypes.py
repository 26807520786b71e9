"""Result carriers shared by every module: Monte Carlo estimates and check reports."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats


@dataclass(frozen=True)
class McEstimate:
    """Sample mean with its standard error; the universal MC result carrier."""

    mean: float
    se: float
    n_samples: int
    seed: int | None = None
    confidence: float = 0.99

    def ci(self) -> tuple[float, float]:
        z = stats.norm.ppf(0.5 + self.confidence / 2.0)
        return (self.mean - z * self.se, self.mean + z * self.se)

    def within(self, target: float, n_se: float = 3.0) -> bool:
        return abs(self.mean - target) <= n_se * self.se


def mc_from_samples(x: np.ndarray, seed: int | None = None) -> McEstimate:
    x = np.asarray(x, dtype=float).ravel()
    n = x.size
    if n < 2:
        raise ValueError("need at least 2 samples for a standard error")
    return McEstimate(mean=float(x.mean()), se=float(x.std(ddof=1) / np.sqrt(n)),
                      n_samples=n, seed=seed)


def mc_from_moments(total: float, total_sq: float, n: int,
                    seed: int | None = None) -> McEstimate:
    """Estimate from accumulated sum and sum of squares (for chunked passes)."""
    mean = total / n
    var = max(total_sq / n - mean * mean, 0.0) * n / max(n - 1, 1)
    return McEstimate(mean=float(mean), se=float(np.sqrt(var / n)), n_samples=n, seed=seed)


@dataclass(frozen=True)
class PathwiseEstimate:
    """Per-path nested-MC estimates (one mean/SE pair per outer path)."""

    mean: np.ndarray  # (paths, ...) inner-sample means
    se: np.ndarray    # (paths, ...) inner-sample standard errors
    n_inner: int
    seed: int | None = None


@dataclass
class CheckReport:
    """One verification row: named quantity, both sides, verdict, tolerance."""

    name: str
    lhs: float
    rhs: float
    verdict: str  # "pass" | "fail" | "reported-only"
    tolerance: float
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.verdict != "fail"


def binomial_ci(hits: int, n: int, confidence: float = 0.99) -> tuple[float, float]:
    """Clopper-Pearson interval; exact, sensible at zero hits."""
    alpha = 1.0 - confidence
    lo = 0.0 if hits == 0 else stats.beta.ppf(alpha / 2, hits, n - hits + 1)
    hi = 1.0 if hits == n else stats.beta.ppf(1 - alpha / 2, hits + 1, n - hits)
    return (float(lo), float(hi))


def loglog_slope(x: np.ndarray, y: np.ndarray) -> float:
    """Least-squares slope of log y against log x (zero y entries dropped)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    keep = (x > 0) & (y > 0)
    if keep.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(x[keep]), np.log(y[keep]), 1)[0])
