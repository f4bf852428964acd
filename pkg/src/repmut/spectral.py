"""Eigenpairs for the martingale-extraction engine.

Two concrete sources: Kummer confluent-hypergeometric eigenfunctions for
the CIR model, and finite-difference ground states of the Schrodinger
operator for polynomial confining fitness.  A heuristic diagnostic for the
invariant-function integral test is included; it reports growth trends and
never gates anything.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg

from .closed_form import Eigenpair
from .constants import TOL
from .model import DiffusionModel, ModelError


class SpectralError(RuntimeError):
    pass


class EnlargeGridError(SpectralError):
    """Ground state carries mass at the truncation boundary."""

    def __init__(self, msg, suggested_half_width):
        super().__init__(msg)
        self.suggested_half_width = suggested_half_width


# ---------------------------------------------------------------------------
# Kummer confluent hypergeometric function


def kummer_M(a: float, b: float, z) -> np.ndarray | float:
    """Confluent hypergeometric M(a, b, z) by power series.

    Term-ratio stopping at relative 1e-14; intended for |z| <= 50 where the
    series is well conditioned in float64.
    """
    if b <= 0 and float(b).is_integer():
        raise SpectralError(f"parameter pole: b = {b}")
    z_arr = np.asarray(z, dtype=float)
    if np.any(np.abs(z_arr) > 50.0):
        raise SpectralError("kummer_M series restricted to |z| <= 50")
    total = np.ones_like(z_arr)
    term = np.ones_like(z_arr)
    for k in range(1000):
        term = term * ((a + k) / (b + k)) * z_arr / (k + 1.0)
        total = total + term
        if np.all(np.abs(term) <= 1e-14 * np.maximum(np.abs(total), 1e-300)):
            break
    else:
        raise SpectralError("kummer_M series did not converge in 1000 terms")
    return total if isinstance(z, np.ndarray) else float(total)


def kummer_M_prime(a: float, b: float, z):
    """d/dz M(a, b, z) = (a/b) M(a+1, b+1, z)."""
    return (a / b) * kummer_M(a + 1.0, b + 1.0, z)


# ---------------------------------------------------------------------------
# CIR eigenpairs


@dataclass(frozen=True)
class KummerParams:
    a: float
    b: float
    sigma: float
    lam: float

    @property
    def kappa(self):
        return -self.b

    @property
    def gamma(self):
        return np.sqrt(self.kappa ** 2 + 2.0 * self.sigma ** 2)

    @property
    def lam_max(self):
        # largest admissible eigenvalue for a positive eigenfunction
        return self.a * (np.sqrt(self.b ** 2 + 2 * self.sigma ** 2) + self.b) / self.sigma ** 2

    @property
    def alpha(self):
        # positive for lam < lam_max; keeps the Kummer factor positive on
        # the half line (decided by the eigen-residual probe)
        return (self.lam_max - self.lam) / self.gamma

    @property
    def beta(self):
        return 2.0 * self.a / self.sigma ** 2

    @property
    def z_scale(self):
        return 2.0 * self.gamma / self.sigma ** 2


def cir_eigenpair(a: float, b: float, sigma: float, lam: float) -> Eigenpair:
    """Positive eigenfunction exp(((kappa-gamma)/sigma^2) x) M(alpha, beta, z x)
    of the CIR generator plus linear decay fitness g(x) = -x."""
    if 2.0 * a < sigma * sigma:
        raise ModelError("Feller condition violated")
    par = KummerParams(a, b, sigma, lam)
    if lam > par.lam_max + 1e-12:
        raise SpectralError(
            f"lambda = {lam:g} exceeds the admissible maximum {par.lam_max:g}")
    c = (par.kappa - par.gamma) / sigma ** 2
    alpha, beta, q = par.alpha, par.beta, par.z_scale

    def phi(x):
        x = np.asarray(x, float)
        return np.exp(c * x) * kummer_M(alpha, beta, q * x)

    def log_phi(x):
        x = np.asarray(x, float)
        return c * x + np.log(kummer_M(alpha, beta, q * x))

    def grad_log_phi(x):
        x = np.asarray(x, float)
        K = kummer_M(alpha, beta, q * x)
        return c + q * kummer_M_prime(alpha, beta, q * x) / K

    def dphi(x):
        x = np.asarray(x, float)
        return np.exp(c * x) * (c * kummer_M(alpha, beta, q * x)
                                + q * kummer_M_prime(alpha, beta, q * x))

    def d2phi(x):
        x = np.asarray(x, float)
        K = kummer_M(alpha, beta, q * x)
        K1 = kummer_M_prime(alpha, beta, q * x)
        K2 = (alpha / beta) * ((alpha + 1.0) / (beta + 1.0)) \
            * kummer_M(alpha + 2.0, beta + 2.0, q * x)
        return np.exp(c * x) * (c * c * K + 2.0 * c * q * K1 + q * q * K2)

    return Eigenpair(lam=float(lam), phi=phi, dphi=dphi, source="kummer",
                     log_phi=log_phi, grad_log_phi=grad_log_phi, d2phi=d2phi)


def cir_tilted_extra_drift(a: float, b: float, sigma: float, lam: float) -> Callable:
    """Extra drift sigma^2 x d(log phi)/dx of the eigen-tilted CIR process.

    Added to the base drift a + b x this reproduces the tilted dynamics
    a - gamma x + (2 alpha gamma / beta) x M(alpha+1, beta+1, zx)/M(alpha, beta, zx).
    """
    pair = cir_eigenpair(a, b, sigma, lam)

    def extra(t, x):
        xv = np.maximum(x[:, 0], 0.0)
        return (sigma ** 2 * xv * pair.grad_log_phi(xv))[:, None]

    return extra


# ---------------------------------------------------------------------------
# Schrodinger ground states


@dataclass(frozen=True)
class SchrodingerProblem:
    """Ground-state problem -sigma^2 phi'' - g phi = lambda phi on [-L, L]."""

    sigma: float
    g: Callable[[np.ndarray], np.ndarray]
    half_width: float
    nodes: int = 2048

    def __post_init__(self):
        if self.sigma <= 0:
            raise SpectralError("sigma must be positive")
        if self.nodes < 256:
            raise SpectralError("need at least 256 grid nodes")
        gl = float(self.g(np.array([-self.half_width]))[0])
        gr = float(self.g(np.array([self.half_width]))[0])
        g0 = float(self.g(np.array([0.0]))[0])
        if not (gl < g0 - 1.0 and gr < g0 - 1.0):
            raise SpectralError("fitness does not look confining at the grid ends")


def schrodinger_ground_state(problem: SchrodingerProblem) -> Eigenpair:
    """Smallest eigenpair by shifted inverse iteration on the tridiagonal
    finite-difference matrix with Dirichlet ends.

    The fitness is shifted so g <= 0 before discretization (recorded and
    undone in the returned eigenvalue).  Fails with a grid-enlargement hint
    when the ground state touches the boundary.
    """
    L, M, sig2 = problem.half_width, problem.nodes, problem.sigma ** 2
    x = np.linspace(-L, L, M + 2)[1:-1]
    h = x[1] - x[0]
    gvals = np.asarray(problem.g(x), float)
    shift = max(gvals.max(), 0.0)
    potential = -(gvals - shift)  # >= 0 after the up-shift

    diag = 2.0 * sig2 / h ** 2 + potential
    off = np.full(M - 1, -sig2 / h ** 2)
    # banded Cholesky of the SPD matrix, reused across iterations
    ab = np.zeros((2, M))
    ab[0, :] = diag
    ab[1, :-1] = off
    cb = scipy.linalg.cholesky_banded(ab, lower=True)

    v = np.exp(-x ** 2 / (2.0 * max(L / 4.0, 1.0)))
    v /= np.linalg.norm(v)
    lam_shifted = np.inf
    for _ in range(500):
        w = scipy.linalg.cho_solve_banded((cb, True), v)
        w /= np.linalg.norm(w)
        av = diag * w
        av[:-1] += off * w[1:]
        av[1:] += off * w[:-1]
        rho = float(w @ av)
        res = np.linalg.norm(av - rho * w)
        v = w
        lam_shifted = rho
        if res <= 1e-12 * max(abs(rho), 1.0):
            break

    if v.sum() < 0:
        v = -v
    if np.any(v <= 0):
        # Perron ground state must be interior-positive
        if np.any(v[5:-5] <= 0):
            raise SpectralError("ground state changed sign on the interior grid")
        v = np.maximum(v, 1e-300)

    boundary = max(abs(v[0]), abs(v[-1])) / abs(v).max()
    if boundary > TOL["schrodinger_boundary_mass"]:
        raise EnlargeGridError(
            f"boundary amplitude {boundary:.2e} exceeds "
            f"{TOL['schrodinger_boundary_mass']:g}; enlarge the grid",
            suggested_half_width=1.5 * L)

    phi_grid = v / np.sqrt(h)  # L2-normalized on the line
    dphi_grid = np.gradient(phi_grid, h)
    log_grid = np.log(np.maximum(phi_grid, 1e-300))
    gl_grid = dphi_grid / np.maximum(phi_grid, 1e-300)

    def phi(xq):
        return np.interp(xq, x, phi_grid, left=0.0, right=0.0)

    def dphi(xq):
        return np.interp(xq, x, dphi_grid, left=0.0, right=0.0)

    def log_phi(xq):
        return np.interp(xq, x, log_grid)

    def grad_log_phi(xq):
        xq = np.asarray(xq, float)
        out = np.interp(xq, x, gl_grid)
        # linear continuation beyond the grid from the end slopes
        lo, hi = x[0], x[-1]
        slope_lo = (gl_grid[1] - gl_grid[0]) / h
        slope_hi = (gl_grid[-1] - gl_grid[-2]) / h
        out = np.where(xq < lo, gl_grid[0] + slope_lo * (xq - lo), out)
        out = np.where(xq > hi, gl_grid[-1] + slope_hi * (xq - hi), out)
        return out

    pair = Eigenpair(lam=float(lam_shifted - shift), phi=phi, dphi=dphi,
                     source="schrodinger-grid",
                     log_phi=log_phi, grad_log_phi=grad_log_phi,
                     fd_step=h, grid=x, phi_grid=phi_grid)
    return pair


def eigenpair_to_csv(pair: Eigenpair, path, grid=None):
    """Tabulates (x, phi, phi') for inspection; uses the pair's own grid
    when it has one."""
    x = pair.grid if grid is None and pair.grid is not None else grid
    if x is None:
        raise SpectralError("pass an evaluation grid for analytic eigenpairs")
    x = np.asarray(x, float)
    np.savetxt(path, np.column_stack([x, pair.phi(x), pair.dphi(x)]),
               delimiter=",", header="x,phi,dphi", comments="")


# ---------------------------------------------------------------------------
# invariant-function integral diagnostic


def pinsky_diagnostic(model: DiffusionModel, phi: Callable, x0: float = 0.0,
                      max_scale: int = 8, nodes: int = 4096) -> dict:
    """Growth trend of the two nested invariance integrals on expanding
    intervals [x0 - 2^k, x0] and [x0, x0 + 2^k], k = 1..max_scale.

    Heuristic only: monotone unbounded growth on both sides is reported as
    "consistent with divergence".  Works in log space to survive the
    exponential factors.
    """
    if model.dim != 1:
        raise SpectralError("diagnostic is one-dimensional")

    def side(direction):
        vals = []
        for k in range(1, max_scale + 1):
            width = 2.0 ** k
            if direction > 0:
                xs = np.linspace(x0, x0 + width, nodes)
            else:
                xs = np.linspace(x0 - width, x0, nodes)
            if model.domain.kind == "half-line":
                xs = np.clip(xs, 1e-9, None)
            b = model.drift(xs[:, None])[:, 0]
            s2 = model.diffusion(xs[:, None])[:, 0, 0] ** 2
            # S(x) = int_{x0}^{x} 2 b / sigma^2
            integrand = 2.0 * b / s2
            if direction > 0:
                S = np.concatenate([[0.0], np.cumsum(
                    0.5 * np.diff(xs) * (integrand[1:] + integrand[:-1]))])
            else:
                S_rev = np.concatenate([[0.0], np.cumsum(
                    0.5 * np.diff(xs)[::-1] * (integrand[::-1][1:] + integrand[::-1][:-1]))])
                S = -S_rev[::-1]
            log_phi2 = 2.0 * np.log(np.maximum(np.abs(phi(xs)), 1e-300))
            inner_log_terms = log_phi2 - np.log(s2) + S
            # inner(x) = int between x and x0 of exp(inner_log_terms)
            m = inner_log_terms.max()
            e = np.exp(inner_log_terms - m)
            if direction > 0:
                inner = np.concatenate([[0.0], np.cumsum(
                    0.5 * np.diff(xs) * (e[1:] + e[:-1]))])
            else:
                cs = np.cumsum((0.5 * np.diff(xs) * (e[1:] + e[:-1]))[::-1])[::-1]
                inner = np.concatenate([cs, [0.0]])
            log_inner = np.where(inner > 0, np.log(np.maximum(inner, 1e-300)) + m, -np.inf)
            log_outer = -log_phi2 - S + log_inner
            mo = np.max(log_outer)
            if mo > 600.0:  # integral astronomically large; report its log scale
                vals.append(float(mo))
                continue
            total = np.trapezoid(np.exp(log_outer), xs)
            vals.append(float(np.log(max(total, 1e-300))))
        return vals

    left = side(-1)
    right = side(+1)
    grew = all(np.diff(left) > 0) and all(np.diff(right) > 0)
    return {
        "x0": x0,
        "log_integral_left": left,
        "log_integral_right": right,
        "trend": "consistent with divergence" if grew else "inconclusive",
    }
