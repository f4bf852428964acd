"""Shared numerical kernels: quadrature, grid densities, weighted KDE,
matrix exponentials and covariance integrals."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from .constants import TOL


class NumericsError(ValueError):
    pass


# ---------------------------------------------------------------------------
# grid densities


@dataclass(frozen=True)
class GridDensity:
    """Nonnegative values tabulated on a strictly increasing 1D grid."""

    x: np.ndarray
    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        x = np.asarray(self.x, float)
        v = np.asarray(self.values, float)
        if x.ndim != 1 or np.any(np.diff(x) <= 0):
            raise NumericsError("grid must be strictly increasing 1D")
        if v.shape != x.shape:
            raise NumericsError("values shape mismatch")
        if v.min() < -1e-13:
            raise NumericsError("density values must be nonnegative")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "values", np.maximum(v, 0.0))
        if self.normalized:
            total = np.trapezoid(self.values, x)
            if abs(total - 1.0) > TOL["law_normalization"]:
                raise NumericsError(f"normalized density integrates to {total!r}")

    def integral(self) -> float:
        return float(np.trapezoid(self.values, self.x))

    def normalize(self) -> "GridDensity":
        total = self.integral()
        if total <= 0:
            raise NumericsError("cannot normalize zero density")
        return GridDensity(self.x, self.values / total, normalized=True)

    def __call__(self, xq: np.ndarray) -> np.ndarray:
        return np.interp(xq, self.x, self.values, left=0.0, right=0.0)

    def l1_distance(self, other: "GridDensity") -> float:
        xs = np.union1d(self.x, other.x)
        return float(np.trapezoid(np.abs(self(xs) - other(xs)), xs))

    def to_csv(self, path):
        np.savetxt(path, np.column_stack([self.x, self.values]),
                   delimiter=",", header="x,value", comments="")


@dataclass(frozen=True)
class GaussianMoments:
    """Mean vector and symmetric PSD covariance."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, float))
        cov = np.atleast_2d(np.asarray(self.cov, float))
        if np.abs(cov - cov.T).max() > 1e-12:
            raise NumericsError("covariance not symmetric")
        if np.linalg.eigvalsh(cov).min() < -1e-12:
            raise NumericsError("covariance not PSD")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", 0.5 * (cov + cov.T))

    def density(self, x: np.ndarray) -> np.ndarray:
        n = self.mean.size
        if n == 1:
            v = max(self.cov[0, 0], 1e-300)
            return np.exp(-0.5 * (np.asarray(x, float) - self.mean[0]) ** 2 / v) \
                / np.sqrt(2 * np.pi * v)
        d = np.atleast_2d(x) - self.mean
        sol = np.linalg.solve(self.cov, d.T).T
        q = np.einsum("...i,...i->...", d, sol)
        return np.exp(-0.5 * q) / np.sqrt((2 * np.pi) ** n * np.linalg.det(self.cov))


# ---------------------------------------------------------------------------
# quadrature


def integrate_trapezoid(values: np.ndarray, x: np.ndarray) -> float:
    values = np.asarray(values, float)
    if not np.isfinite(values).all():
        raise NumericsError("non-finite integrand")
    return float(np.trapezoid(values, x))


def integrate_gauss_hermite(f: Callable, order: int = 64,
                            mean: float = 0.0, sd: float = 1.0) -> float:
    """Integral of f against the N(mean, sd^2) density."""
    nodes, weights = np.polynomial.hermite_e.hermegauss(order)
    vals = f(mean + sd * nodes)
    if not np.isfinite(vals).all():
        raise NumericsError("non-finite integrand at quadrature nodes")
    return float(np.sum(weights * vals) / np.sqrt(2.0 * np.pi))


def integrate(f, rule) -> float:
    """Dispatching front end: ``rule`` is a grid array or a GH options dict."""
    if isinstance(rule, dict):
        return integrate_gauss_hermite(f, rule.get("order", 64),
                                       rule.get("mean", 0.0), rule.get("sd", 1.0))
    x = np.asarray(rule, float)
    vals = f(x) if callable(f) else np.asarray(f, float)
    return integrate_trapezoid(vals, x)


# ---------------------------------------------------------------------------
# matrix kernels


def matrix_exp(A: np.ndarray, t: float = 1.0) -> np.ndarray:
    """exp(A t) by scaling-and-squaring (scipy's Pade implementation)."""
    A = np.atleast_2d(np.asarray(A, float))
    if A.shape[0] != A.shape[1] or A.shape[0] > 16:
        raise NumericsError("matrix_exp expects square n <= 16")
    return scipy.linalg.expm(A * t)


def expm_integral(A: np.ndarray, t: float) -> np.ndarray:
    """int_0^t exp(A u) du via the block-matrix exponential."""
    A = np.atleast_2d(np.asarray(A, float))
    n = A.shape[0]
    blk = np.zeros((2 * n, 2 * n))
    blk[:n, :n] = A
    blk[:n, n:] = np.eye(n)
    return matrix_exp(blk, t)[:n, n:]


def covariance_integral(Gamma: np.ndarray, a: np.ndarray, t: float) -> np.ndarray:
    """Sigma_t = int_0^t exp(Gamma u) a exp(Gamma^T u) du (van Loan block form)."""
    if t < 0:
        raise NumericsError("t must be >= 0")
    Gamma = np.atleast_2d(np.asarray(Gamma, float))
    a = np.atleast_2d(np.asarray(a, float))
    n = Gamma.shape[0]
    if t == 0.0:
        return np.zeros((n, n))
    blk = np.zeros((2 * n, 2 * n))
    blk[:n, :n] = -Gamma
    blk[:n, n:] = a
    blk[n:, n:] = Gamma.T
    E = matrix_exp(blk, t)
    sigma = E[n:, n:].T @ E[:n, n:]
    return 0.5 * (sigma + sigma.T)


# ---------------------------------------------------------------------------
# weighted kernel density estimation


def silverman_bandwidth(points: np.ndarray, weights: np.ndarray) -> float:
    """Silverman's rule with the effective sample size of the weights."""
    w = weights / weights.sum()
    n_eff = 1.0 / np.sum(w * w)
    mu = np.sum(w * points)
    sd = np.sqrt(max(np.sum(w * (points - mu) ** 2), 1e-300))
    order = np.argsort(points)
    cw = np.cumsum(w[order])
    q1 = np.interp(0.25, cw, points[order])
    q3 = np.interp(0.75, cw, points[order])
    spread = min(sd, (q3 - q1) / 1.34) if q3 > q1 else sd
    return 0.9 * spread * n_eff ** (-0.2)


def kde(points: np.ndarray, weights: Optional[np.ndarray] = None,
        bandwidth: Optional[float] = None, grid: Optional[np.ndarray] = None,
        grid_size: int = 1024) -> GridDensity:
    """Weighted Gaussian-kernel density on an automatically sized grid.

    The output integrates to one; the weights only need to be nonnegative
    with a positive sum.  Equal points with stacked weight and duplicated
    points give identical results.
    """
    pts = np.asarray(points, float).reshape(-1)
    if weights is None:
        weights = np.full(pts.size, 1.0 / pts.size)
    w = np.asarray(weights, float)
    if w.min() < 0:
        raise NumericsError("weights must be nonnegative")
    total = w.sum()
    if total <= 0:
        raise NumericsError("weights sum to zero")
    w = w / total
    h = float(bandwidth) if bandwidth is not None else silverman_bandwidth(pts, w)
    if h <= 0:
        raise NumericsError("bandwidth must be positive")
    if grid is None:
        grid = np.linspace(pts.min() - 4 * h, pts.max() + 4 * h, grid_size)
    vals = np.zeros(grid.size)
    norm = 1.0 / (h * np.sqrt(2 * np.pi))
    chunk = max(1, int(2e7) // grid.size)
    for lo in range(0, pts.size, chunk):
        sl = slice(lo, lo + chunk)
        z = (grid[None, :] - pts[sl, None]) / h
        vals += w[sl] @ np.exp(-0.5 * z * z)
    dens = GridDensity(grid, vals * norm)
    return dens.normalize()
