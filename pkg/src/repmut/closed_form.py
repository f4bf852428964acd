"""Closed-form and semi-analytic solution engines.

Three routes to the same normalized density flow:

* ``linear_engine`` -- constant-coefficient models with fitness whose
  generator image and gradient-times-diffusion are constant; the solution
  is an exponentially tilted Gaussian convolution and is fully analytic
  for Gaussian initial data.
* ``affine_engine`` -- affine drift, constant diffusion, concave quadratic
  fitness; an exponential-quadratic eigenfunction turns the weighted
  expectation into a Gaussian transition density.
* ``tilted_engine`` -- any model with a supplied positive eigenpair; the
  eigen-tilted SDE is simulated and the density recovered by weighted KDE.

All engines expose the same ``ClosedFormSolution`` surface: a density
evaluator, an (unshifted) mass-factor evaluator, a tag and a horizon.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from .constants import TOL, DEFAULT_STEPS_PER_UNIT
from .model import DiffusionModel, FitnessFunction, InitialLaw, probe_points, sample_initial
from .numerics import (GaussianMoments, GridDensity, covariance_integral,
                       expm_integral, kde, matrix_exp)
from .sde import TimeGrid, TiltedDrift, simulate


class EngineError(RuntimeError):
    pass


class HorizonError(EngineError):
    """Normalizing quadrature overflowed; the horizon is too long."""


class RejectedCondition(Exception):
    """Structured rejection: the model/fitness pair misses a precondition."""


# ---------------------------------------------------------------------------
# types


@dataclass(frozen=True)
class ConstantCondition:
    """Constant generator image C1 = A g and gradient row C2 = (grad g)^T sigma."""

    C1: float
    C2: np.ndarray  # (m,)

    def __post_init__(self):
        object.__setattr__(self, "C2", np.atleast_1d(np.asarray(self.C2, float)))


@dataclass(frozen=True)
class Eigenpair:
    """Positive eigenfunction with (A + g) phi = -lam phi.

    ``log_phi`` and ``grad_log_phi`` are the numerically robust primitives;
    ``phi``/``dphi`` satisfy the plain contract.  ``d2phi`` (optional,
    analytic) sharpens the residual probe.  Grid-backed eigenfunctions
    carry their grid and tabulated values for grid-aligned probing.
    """

    lam: float
    phi: Callable
    dphi: Callable
    source: str
    log_phi: Optional[Callable] = None
    grad_log_phi: Optional[Callable] = None
    d2phi: Optional[Callable] = None
    fd_step: Optional[float] = None
    grid: Optional[np.ndarray] = None
    phi_grid: Optional[np.ndarray] = None

    def log_phi_at(self, x):
        if self.log_phi is not None:
            return self.log_phi(x)
        return np.log(np.maximum(self.phi(x), 1e-300))

    def grad_log_phi_at(self, x):
        if self.grad_log_phi is not None:
            return self.grad_log_phi(x)
        return self.dphi(x) / np.maximum(self.phi(x), 1e-300)


@dataclass(frozen=True)
class ClosedFormSolution:
    """Density evaluator u(t, x) plus the unshifted mass factor h_t."""

    engine: str
    horizon: float
    shift: float
    u: Callable  # u(t, x) -> density values
    mass: Callable  # t -> h_t (unshifted fitness)
    grid: np.ndarray
    meta: dict = field(default_factory=dict)

    def density_grid(self, t: float, grid: Optional[np.ndarray] = None) -> GridDensity:
        x = self.grid if grid is None else grid
        return GridDensity(x, np.maximum(self.u(t, x), 0.0)).normalize()

    def mass_factor(self, t: float, shifted: bool = False) -> float:
        h = float(self.mass(t))
        return h * np.exp(-self.shift * t) if shifted else h

    def l1_against(self, other, t: float, grid: Optional[np.ndarray] = None) -> float:
        x = self.grid if grid is None else grid
        a = self.density_grid(t, x)
        b = other.density_grid(t, x) if hasattr(other, "density_grid") \
            else GridDensity(x, np.maximum(other(t, x), 0.0)).normalize()
        return float(np.trapezoid(np.abs(a.values - b.values), x))


# ---------------------------------------------------------------------------
# constant-condition detection


def _fd_gradient(f, x, h):
    n = x.size
    g = np.empty(n)
    for i in range(n):
        e = np.zeros(n)
        e[i] = h * (1.0 + abs(x[i]))
        g[i] = (f(x + e) - f(x - e)) / (2 * e[i])
    return g


def _fd_hessian(f, x, h):
    n = x.size
    H = np.empty((n, n))
    f0 = f(x)
    steps = [h * (1.0 + abs(x[i])) for i in range(n)]
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = steps[i]
        H[i, i] = (f(x + ei) - 2 * f0 + f(x - ei)) / steps[i] ** 2
        for j in range(i + 1, n):
            ej = np.zeros(n)
            ej[j] = steps[j]
            H[i, j] = H[j, i] = (f(x + ei + ej) - f(x + ei - ej)
                                 - f(x - ei + ej) + f(x - ei - ej)) \
                / (4 * steps[i] * steps[j])
    return H


def detect_constant_condition(model: DiffusionModel, fitness,
                              probes: int = 32, seed: int = 11):
    """Returns ConstantCondition if A g and (grad g)^T sigma are constant on
    probe points, else raises RejectedCondition.

    Gradients use central differences with step 1e-5 (1 + |x|); Hessians use
    1e-3 (1 + |x|) to keep the second-difference roundoff below the
    constancy tolerance.
    """
    pts = probe_points(model.domain, max(probes, 32), seed=seed)
    g = fitness.g if isinstance(fitness, FitnessFunction) else fitness

    def g_point(x):
        val = g(np.asarray(x)[None, 0] if x.size == 1 else x[None, :])
        return float(np.asarray(val).reshape(-1)[0])

    c1s, c2s = [], []
    for x in pts:
        grad = _fd_gradient(g_point, x, 1e-5)
        hess = _fd_hessian(g_point, x, 1e-3)
        sig = model.diffusion(x[None, :])[0]
        b = model.drift(x[None, :])[0]
        c1s.append(b @ grad + 0.5 * np.trace(sig @ sig.T @ hess))
        c2s.append(grad @ sig)
    c1s = np.asarray(c1s)
    c2s = np.asarray(c2s)
    C1 = float(np.median(c1s))
    C2 = np.median(c2s, axis=0)
    tol = TOL["constant_condition_rel"]
    if np.abs(c1s - C1).max() > tol * (1.0 + abs(C1)):
        raise RejectedCondition("A g is not constant on probe points")
    if np.abs(c2s - C2).max() > tol * (1.0 + np.linalg.norm(C2)):
        raise RejectedCondition("(grad g)^T sigma is not constant on probe points")
    return ConstantCondition(C1=C1, C2=C2)


# ---------------------------------------------------------------------------
# linear engine (constant coefficients, linear fitness)


def _auto_grid(mean, sd, width=10.0, size=2048):
    return np.linspace(mean - width * sd, mean + width * sd, size)


def linear_engine(model: DiffusionModel, fitness: FitnessFunction,
                  u0: InitialLaw, horizon: float = 1.0,
                  grid_size: int = 2048) -> ClosedFormSolution:
    """Tilted-convolution solution for constant (b, sigma) and linear g.

    For Gaussian initial data the output is the analytic Gaussian
    N(mu_v + t V c, V) with V = S0 + sigma sigma^T t and kernel mean
    mu_v = m0 + b t - sigma C2^T t^2 / 2; otherwise the convolution and
    normalization run on quadrature grids.
    """
    if model.kind != "arithmetic-bm":
        raise RejectedCondition("linear engine needs a constant-coefficient model")
    cond = detect_constant_condition(model, fitness)
    sig = model.params["sigma"]
    b = model.params["b"]
    n = model.dim
    a = sig @ sig.T
    st = getattr(fitness, "structure", None)
    if st and st.get("kind") == "affine-quadratic" and not np.any(np.asarray(st["G"])):
        c = -np.atleast_1d(np.asarray(st["delta"], float))  # exact gradient
    else:
        c = np.linalg.solve(sig.T, cond.C2)  # grad g = sigma^{-T} C2^T
    x0 = np.zeros(n)
    g0 = float(np.asarray(fitness.g(x0[None, 0:1] if n == 1
                                    else x0[None, :])).reshape(-1)[0])  # g(0)

    def kernel_mean(t):
        return b * t - (a @ c) * t * t / 2.0  # sigma C2^T = sigma sigma^T grad g

    if u0.kind == "gaussian":
        m0, S0 = u0.params["mean"], u0.params["cov"]

        def moments(t):
            V = S0 + a * t
            mean = m0 + kernel_mean(t) + t * (V @ c)
            return GaussianMoments(mean, V)

        def u(t, x):
            if t <= 0:
                return u0.density(x)
            return moments(t).density(x)

        def mass(t):
            cb = float(c @ b)
            cac = float(c @ a @ c)
            cm = float(c @ m0)
            cSc = float(c @ S0 @ c)
            return float(np.exp(t * g0 + cb * t * t / 2.0 + cac * t ** 3 / 6.0
                                + t * cm + t * t * cSc / 2.0))

        mT = moments(horizon)
        grid = _auto_grid(float(mT.mean[0]), np.sqrt(float(mT.cov[0, 0]))) if n == 1 \
            else np.zeros(1)
        return ClosedFormSolution(engine="linear-analytic", horizon=horizon,
                                  shift=fitness.g_max, u=u, mass=mass, grid=grid,
                                  meta={"condition": cond})

    if n != 1:
        raise RejectedCondition("non-Gaussian initial data supported in 1D only")
    if u0.kind == "grid-density":
        ygrid = u0.params["x"]
        yvals = u0.params["values"]
    else:
        pts = u0.params["points"][:, 0]
        span = max(pts.max() - pts.min(), 1.0)
        ygrid = np.linspace(pts.min() - 8 - span, pts.max() + 8 + span, 4096)
        yvals = None  # atomic; handled below

    sd_T = np.sqrt(float(a[0, 0]) * horizon + 1.0)
    grid = np.linspace(ygrid.min() - 10 * sd_T, ygrid.max() + 10 * sd_T, grid_size)

    def numerator(t, x):
        mshift = float(kernel_mean(t)[0])
        var = float(a[0, 0]) * t
        if yvals is not None:
            diff = x[:, None] - ygrid[None, :] - mshift
            k = np.exp(-0.5 * diff * diff / var)
            conv = np.trapezoid(k * yvals[None, :], ygrid, axis=1)
        else:
            pts = u0.params["points"][:, 0]
            wts = u0.params["weights"]
            diff = x[:, None] - pts[None, :] - mshift
            conv = np.exp(-0.5 * diff * diff / var) @ wts
        conv /= np.sqrt(2 * np.pi * var)
        expo = t * np.asarray(fitness.g(x), float)
        if expo.max() > 600.0:
            raise HorizonError("tilt overflow; reduce the horizon")
        return np.exp(expo) * conv

    norm_cache = {}

    def u(t, x):
        x = np.asarray(x, float)
        if t <= 0:
            return u0.density(x)
        if t not in norm_cache:
            z = np.trapezoid(numerator(t, grid), grid)
            if not np.isfinite(z) or z <= 0:
                raise HorizonError("normalizing quadrature overflowed")
            norm_cache[t] = z
        return numerator(t, x) / norm_cache[t]

    def mass(t):
        cb = float(c @ b)
        cac = float(c @ a @ c)
        if yvals is not None:
            tilt = np.exp(t * (c[0] * ygrid + g0))
            ey = np.trapezoid(tilt * yvals, ygrid)
        else:
            pts = u0.params["points"][:, 0]
            ey = float(np.exp(t * (c[0] * pts + g0)) @ u0.params["weights"])
        return float(np.exp(cb * t * t / 2.0 + cac * t ** 3 / 6.0) * ey)

    return ClosedFormSolution(engine="linear-quadrature", horizon=horizon,
                              shift=fitness.g_max, u=u, mass=mass, grid=grid,
                              meta={"condition": cond})


# ---------------------------------------------------------------------------
# Riccati machinery


class RiccatiError(EngineError):
    pass


def _lyap(A, Q):
    """Solve A^T X + X A = -Q for symmetric X."""
    X = scipy.linalg.solve_continuous_lyapunov(A.T, -np.asarray(Q, float))
    return 0.5 * (X + X.T)


def riccati_residual(H, a, B, G):
    return 2 * H @ a @ H - B.T @ H - H @ B - G


def solve_riccati(a, B, G, max_iter: int = 100) -> np.ndarray:
    """Stabilizing symmetric solution of 2 H a H - B^T H - H B - G = 0 by
    Newton-Kleinman iteration (Lyapunov linearizations)."""
    a = np.atleast_2d(np.asarray(a, float))
    B = np.atleast_2d(np.asarray(B, float))
    G = np.atleast_2d(np.asarray(G, float))
    n = a.shape[0]
    if np.linalg.eigvalsh(0.5 * (a + a.T)).min() <= 0:
        raise RiccatiError("a must be symmetric positive definite")
    if np.abs(G - G.T).max() > 1e-10:
        raise RiccatiError("G must be symmetric")

    if np.linalg.eigvals(B).real.max() < -1e-12:
        H = np.zeros((n, n))
    else:
        # H0 = (eta/2) a^{-1} gives Gamma0 = B - eta I, Hurwitz by construction
        eta = float(np.linalg.eigvals(B).real.max()) + 1.0
        H = 0.5 * eta * np.linalg.inv(a)
        H = 0.5 * (H + H.T)

    scale = max(1.0, np.linalg.norm(G))
    prev = np.inf
    for _ in range(max_iter):
        res = np.linalg.norm(riccati_residual(H, a, B, G))
        if res <= 1e-14 * scale or (res <= TOL["riccati_residual"] * scale
                                    and res >= 0.5 * prev):
            return H
        prev = res
        Gamma = B - 2 * a @ H
        H = _lyap(Gamma, G + 2 * H @ a @ H)
    res = np.linalg.norm(riccati_residual(H, a, B, G))
    if res <= TOL["riccati_residual"] * scale:
        return H
    raise RiccatiError(f"Newton-Kleinman did not converge; residual {res:.3e}")


def solve_linear_v(H, a, B, b, delta) -> np.ndarray:
    """Solve 2 H a v - B^T v - 2 H b - delta = 0 for v."""
    H = np.atleast_2d(np.asarray(H, float))
    a = np.atleast_2d(np.asarray(a, float))
    B = np.atleast_2d(np.asarray(B, float))
    b = np.atleast_1d(np.asarray(b, float))
    delta = np.atleast_1d(np.asarray(delta, float))
    A = 2 * H @ a - B.T
    rhs = 2 * H @ b + delta
    if np.linalg.cond(A) > 1e12:
        raise RiccatiError("linear system for v is singular")
    v = np.linalg.solve(A, rhs)
    if np.linalg.norm(A @ v - rhs) > TOL["linear_v_residual"] * max(1.0, np.linalg.norm(rhs)):
        raise RiccatiError("linear solve residual too large")
    return v


def affine_eigenpair(model: DiffusionModel, alpha: float, delta, G) -> Eigenpair:
    """Exponential-quadratic eigenpair for affine drift and quadratic decay
    fitness g(x) = -(alpha + delta^T x + x^T G x)."""
    b = model.params["b"]
    B = model.params["B"]
    sig = model.params["sigma"]
    a = sig @ sig.T
    delta = np.atleast_1d(np.asarray(delta, float))
    G = np.atleast_2d(np.asarray(G, float))
    H = solve_riccati(a, B, G)
    v = solve_linear_v(H, a, B, b, delta)
    lam = float(alpha + np.trace(a @ H) + v @ b - 0.5 * v @ a @ v)

    def log_phi(x):
        x2 = np.atleast_2d(x) if np.ndim(x) > 0 else np.array([[x]])
        x2 = x2 if x2.shape[-1] == b.size else x2.reshape(-1, b.size)
        val = -(x2 @ v) - np.einsum("pi,ij,pj->p", x2, H, x2)
        return val if np.ndim(x) > 1 or b.size > 1 else val.reshape(np.shape(x))

    def phi(x):
        return np.exp(log_phi(x))

    def grad_log_phi(x):
        x2 = np.atleast_2d(x).reshape(-1, b.size)
        out = -(v + 2.0 * (x2 @ H))
        return out if b.size > 1 else out[:, 0].reshape(np.shape(x))

    def dphi(x):
        return phi(x) * grad_log_phi(x)

    def d2phi(x):
        x2 = np.atleast_2d(x).reshape(-1, b.size)
        gl = -(v + 2.0 * (x2 @ H))
        ph = np.exp(-(x2 @ v) - np.einsum("pi,ij,pj->p", x2, H, x2))
        hess = ph[:, None, None] * (gl[:, :, None] * gl[:, None, :] - 2.0 * H)
        return hess if b.size > 1 else hess[:, 0, 0].reshape(np.shape(x))

    return Eigenpair(lam=lam, phi=phi, dphi=dphi, source="affine-analytic",
                     log_phi=log_phi, grad_log_phi=grad_log_phi, d2phi=d2phi)


def affine_engine(model: DiffusionModel, fitness: FitnessFunction,
                  u0: InitialLaw, horizon: float = 1.0,
                  grid_size: int = 2048) -> ClosedFormSolution:
    """Eigenfunction-tilted Gaussian solution for affine models with
    fitness -(alpha + delta^T x + x^T G x).

    When the linear eigenpair system is singular (B = 0, G = 0: plain
    constant-coefficient model with linear fitness, which admits no
    exponential-quadratic eigenfunction) the engine falls back to the
    constant-condition kernel route on quadrature grids.
    """
    st = fitness.structure if getattr(fitness, "structure", None) else None
    if not st or st.get("kind") != "affine-quadratic":
        raise RejectedCondition("fitness must carry affine-quadratic structure")
    alpha = float(st["alpha"])
    delta = np.atleast_1d(np.asarray(st["delta"], float))
    G = np.atleast_2d(np.asarray(st["G"], float))
    if model.kind == "arithmetic-bm":
        model = DiffusionModel(domain=model.domain, kind="affine",
                               params={"b": model.params["b"],
                                       "B": np.zeros((model.dim, model.dim)),
                                       "sigma": model.params["sigma"]})
    elif model.kind == "ou":
        kp = model.params
        model = DiffusionModel(domain=model.domain, kind="affine",
                               params={"b": [kp["kappa"] * kp["theta"]],
                                       "B": [[-kp["kappa"]]],
                                       "sigma": [[kp["sigma"]]]})
    if model.kind != "affine":
        raise RejectedCondition("affine engine needs an affine-kind model")
    b, B, sig = model.params["b"], model.params["B"], model.params["sigma"]
    a = sig @ sig.T
    n = model.dim

    if not G.any() and not B.any():
        # constant-coefficient model with linear fitness: no positive
        # exponential-quadratic eigenfunction exists (H = 0 and the linear
        # system for v is singular); use the constant-condition kernel route
        return _affine_c2_fallback(model, fitness, u0, horizon, grid_size)
    pair = affine_eigenpair(model, alpha, delta, G)

    H = solve_riccati(a, B, G)
    v = solve_linear_v(H, a, B, b, delta)
    Gamma = B - 2 * a @ H
    beta = b - a @ v

    def transition(t, y=None):
        A = matrix_exp(Gamma, t)
        r = expm_integral(Gamma, t) @ beta
        S = covariance_integral(Gamma, a, t)
        return A, r, S

    def mean_fitness(mean, cov):
        return -(alpha + delta @ mean + float(np.trace(G @ cov))
                 + mean @ G @ mean)

    if u0.kind == "gaussian":
        m0, S0 = u0.params["mean"], u0.params["cov"]

        def posterior(t):
            A, r, S = transition(t)
            Sinv = np.linalg.inv(S)
            P = 2 * H + A.T @ Sinv @ A + np.linalg.inv(S0)
            Pinv = np.linalg.inv(P)
            M = A.T @ Sinv
            w = -v - A.T @ Sinv @ r + np.linalg.solve(S0, m0)
            Lam = Sinv - M.T @ Pinv @ M - 2 * H
            eta = M.T @ Pinv @ w + Sinv @ r + v
            if np.linalg.eigvalsh(0.5 * (Lam + Lam.T)).min() <= 0:
                raise HorizonError("tilted posterior covariance lost positivity")
            cov = np.linalg.inv(0.5 * (Lam + Lam.T))
            return GaussianMoments(cov @ eta, cov)

        def u(t, x):
            if t <= 0:
                return u0.density(x)
            return posterior(t).density(x)

        def mass(t):
            if t <= 0:
                return 1.0
            s_nodes = np.linspace(0.0, t, 257)
            vals = np.empty_like(s_nodes)
            vals[0] = mean_fitness(m0, S0)
            for i, s in enumerate(s_nodes[1:], start=1):
                gm = posterior(s)
                vals[i] = mean_fitness(gm.mean, gm.cov)
            return float(np.exp(np.trapezoid(vals, s_nodes)))

        gT = posterior(horizon)
        grid = _auto_grid(float(gT.mean[0]), np.sqrt(float(gT.cov[0, 0]))) if n == 1 \
            else np.zeros(1)
        return ClosedFormSolution(engine="affine-analytic", horizon=horizon,
                                  shift=fitness.g_max, u=u, mass=mass, grid=grid,
                                  meta={"eigenpair": pair, "H": H, "v": v,
                                        "Gamma": Gamma, "beta": beta})

    if n != 1:
        raise RejectedCondition("non-Gaussian initial data supported in 1D only")
    ygrid = u0.params["x"] if u0.kind == "grid-density" else None
    if ygrid is None:
        raise RejectedCondition("affine engine needs gaussian or grid-density u0")
    yvals = u0.params["values"]
    grid = _auto_grid(float(np.trapezoid(ygrid * yvals, ygrid)),
                      max(1.0, np.sqrt(float(a[0, 0]) * horizon)) + ygrid.ptp() / 4,
                      size=grid_size)

    def log_numerator(t, x):
        A, r, S = transition(t)
        A1, r1, s1 = float(A[0, 0]), float(r[0]), float(S[0, 0])
        lphi_y = pair.log_phi_at(ygrid)
        diff = x[:, None] - A1 * ygrid[None, :] - r1
        log_k = -0.5 * diff * diff / s1 - 0.5 * np.log(2 * np.pi * s1)
        log_int = log_k + lphi_y[None, :] + np.log(np.maximum(yvals, 1e-300))[None, :]
        m = log_int.max(axis=1)
        integ = np.trapezoid(np.exp(log_int - m[:, None]), ygrid, axis=1)
        out = np.where(integ > 0, m + np.log(np.maximum(integ, 1e-300)), -np.inf)
        return out - pair.log_phi_at(x)

    norm_cache = {}

    def u(t, x):
        x = np.asarray(x, float)
        if t <= 0:
            return u0.density(x)
        if t not in norm_cache:
            lz = log_numerator(t, grid)
            mref = lz[np.isfinite(lz)].max()
            z = np.trapezoid(np.exp(lz - mref), grid)
            if not np.isfinite(z) or z <= 0:
                raise HorizonError("normalizing quadrature overflowed")
            norm_cache[t] = (mref, z)
        mref, z = norm_cache[t]
        return np.exp(log_numerator(t, x) - mref) / z

    def mass(t):
        if t <= 0:
            return 1.0
        s_nodes = np.linspace(0.0, t, 257)
        vals = np.empty_like(s_nodes)
        for i, s in enumerate(s_nodes):
            dens = GridDensity(grid, np.maximum(u(s, grid), 0)).normalize()
            gx = -(alpha + delta[0] * grid + G[0, 0] * grid * grid)
            vals[i] = np.trapezoid(gx * dens.values, grid)
        return float(np.exp(np.trapezoid(vals, s_nodes)))

    return ClosedFormSolution(engine="affine-quadrature", horizon=horizon,
                              shift=fitness.g_max, u=u, mass=mass, grid=grid,
                              meta={"eigenpair": pair, "H": H, "v": v})


def _affine_c2_fallback(model, fitness, u0, horizon, grid_size):
    """Degenerate affine case B = 0, G = 0: constant-condition kernel route,
    evaluated by quadrature (independent of the linear engine's analytic
    shortcut)."""
    cond = detect_constant_condition(model, fitness)
    sig = model.params["sigma"]
    b = model.params["b"]
    a = sig @ sig.T
    n = model.dim
    if n != 1:
        raise RejectedCondition("fallback route implemented in 1D")
    if u0.kind == "gaussian":
        m0 = float(u0.params["mean"][0])
        s0 = float(np.sqrt(u0.params["cov"][0, 0]))
        ygrid = np.linspace(m0 - 12 * s0 - 1, m0 + 12 * s0 + 1, 4096)
        yvals = u0.density(ygrid)
    elif u0.kind == "grid-density":
        ygrid, yvals = u0.params["x"], u0.params["values"]
    else:
        raise RejectedCondition("fallback needs a density-style initial law")
    sd_T = np.sqrt(float(a[0, 0]) * horizon + 1.0)
    grid = np.linspace(ygrid.min() - 10 * sd_T, ygrid.max() + 10 * sd_T, grid_size)

    def u(t, x):
        x = np.asarray(x, float)
        if t <= 0:
            return u0.density(x)
        mshift = float((b * t - sig @ cond.C2 * t * t / 2.0)[0])
        var = float(a[0, 0]) * t
        diff = x[:, None] - ygrid[None, :] - mshift
        conv = np.trapezoid(np.exp(-0.5 * diff * diff / var) * yvals[None, :],
                            ygrid, axis=1) / np.sqrt(2 * np.pi * var)
        lg = t * np.asarray(fitness.g(x), float)
        vals = np.exp(lg) * conv
        zdiff = grid[:, None] - ygrid[None, :] - mshift
        zconv = np.trapezoid(np.exp(-0.5 * zdiff * zdiff / var) * yvals[None, :],
                             ygrid, axis=1) / np.sqrt(2 * np.pi * var)
        z = np.trapezoid(np.exp(t * np.asarray(fitness.g(grid), float)) * zconv, grid)
        if not np.isfinite(z) or z <= 0:
            raise HorizonError("normalizing quadrature overflowed")
        return vals / z

    def mass(t):
        if t <= 0:
            return 1.0
        c1 = cond.C1
        c2sq = float(cond.C2 @ cond.C2)
        tilt = np.exp(t * np.asarray(fitness.g(ygrid), float))
        ey = np.trapezoid(tilt * yvals, ygrid)
        return float(np.exp(c1 * t * t / 2.0 + c2sq * t ** 3 / 6.0) * ey)

    return ClosedFormSolution(engine="affine-c2-fallback", horizon=horizon,
                              shift=fitness.g_max, u=u, mass=mass, grid=grid,
                              meta={"condition": cond})


# ---------------------------------------------------------------------------
# generic eigen-tilted Monte Carlo engine


def tilted_extra_drift(model: DiffusionModel, pair: Eigenpair) -> TiltedDrift:
    """Extra drift (sigma sigma^T) grad log phi of the eigen-tilted process."""

    def extra(t, x):
        if model.dim == 1:
            s = model.diffusion(x)[:, 0, 0]
            return (s * s * pair.grad_log_phi_at(x[:, 0]))[:, None]
        sig = model.diffusion(x)
        a = np.einsum("pij,pkj->pik", sig, sig)
        return np.einsum("pik,pk->pi", a, pair.grad_log_phi_at(x))

    return TiltedDrift(base=model, extra=extra)


def _reweighted_initial(u0: InitialLaw, pair: Eigenpair, domain_kind: str) -> InitialLaw:
    """Initial law with density proportional to phi(y) u0(y)."""
    if u0.kind == "grid-density":
        xg = u0.params["x"]
        base = u0.params["values"]
    elif u0.kind == "gaussian":
        m0 = float(u0.params["mean"][0])
        s0 = float(np.sqrt(u0.params["cov"][0, 0]))
        lo, hi = m0 - 12 * s0, m0 + 12 * s0
        if domain_kind == "half-line":
            lo = max(lo, 1e-6)
        xg = np.linspace(lo, hi, 4096)
        base = u0.density(xg)
    elif u0.kind == "point-cloud":
        pts = u0.params["points"][:, 0]
        wts = u0.params["weights"] * np.exp(pair.log_phi_at(pts))
        return InitialLaw("point-cloud", {"points": pts[:, None],
                                          "weights": wts / wts.sum()})
    else:
        raise RejectedCondition("unsupported initial law for tilted engine")
    logw = pair.log_phi_at(xg) + np.log(np.maximum(base, 1e-300))
    vals = np.exp(logw - logw.max())
    total = np.trapezoid(vals, xg)
    return InitialLaw("grid-density", {"x": xg, "values": vals / total})


def tilted_engine(model: DiffusionModel, fitness: FitnessFunction,
                  pair: Eigenpair, u0: InitialLaw, horizon: float,
                  n_paths: int = 100_000, seed: int = 0,
                  steps_per_unit: int = DEFAULT_STEPS_PER_UNIT,
                  checkpoints: int = 17, grid_size: int = 1024,
                  threads: int = 1) -> ClosedFormSolution:
    """Semi-analytic Monte Carlo engine: simulate the eigen-tilted SDE from
    the phi-reweighted initial law, estimate the terminal density by KDE
    and undo the tilt pointwise.

    The density is available at the stored checkpoint times.  The mass
    factor is not produced here; use the particle system's estimator.
    """
    if model.dim != 1:
        raise RejectedCondition("tilted engine densities are one-dimensional")
    law = _reweighted_initial(u0, pair, model.domain.kind)
    x0 = sample_initial(law, n_paths, seed, domain=model.domain)
    grid_t = TimeGrid(0.0, horizon, max(1, int(round(steps_per_unit * horizon))))
    store = grid_t.checkpoint_indices(checkpoints)
    tilt = tilted_extra_drift(model, pair)
    bundle = simulate(tilt, x0, grid_t, seed, store=store, threads=threads)

    cache: dict = {}

    def density_at(t):
        j = bundle.node_index(t)
        if j in cache:
            return cache[j]
        pos = bundle.positions[:, j, 0]
        est = kde(pos, grid_size=grid_size)
        xg = est.x
        log_u = np.log(np.maximum(est.values, 1e-300)) - pair.log_phi_at(xg)
        clip = pair.log_phi_at(xg) < -700.0
        lost = est.values[clip].sum() * (xg[1] - xg[0]) if clip.any() else 0.0
        if lost > 1e-6:
            raise EngineError(f"phi underflow clipped mass {lost:.2e}")
        log_u[clip] = -np.inf
        vals = np.exp(log_u - log_u[np.isfinite(log_u)].max())
        if model.domain.kind == "half-line":
            vals = np.where(xg > 0, vals, 0.0)
        dens = GridDensity(xg, vals).normalize()
        cache[j] = dens
        return dens

    def u(t, x):
        if t <= 0:
            return u0.density(np.asarray(x, float))
        return density_at(t)(np.asarray(x, float))

    def mass(t):
        raise EngineError("tilted engine has no analytic mass factor; "
                          "use the particle mass estimator")

    gT = density_at(horizon)
    return ClosedFormSolution(engine="tilted-mc", horizon=horizon,
                              shift=fitness.g_max, u=u, mass=mass, grid=gT.x,
                              meta={"eigenpair": pair, "n_paths": n_paths,
                                    "times": bundle.times})


def mass_factor(solution: ClosedFormSolution, t: float, shifted: bool = False) -> float:
    """Mass factor of an engine solution; h_0 = 1 and descends after the
    g <= 0 shift."""
    return solution.mass_factor(t, shifted=shifted)


def validity_horizon(solution: ClosedFormSolution, t_max: float = 64.0,
                     rel: float = 1e-3) -> float:
    """Largest t (within rel) at which the normalizing quadrature is still
    finite at working precision; bisection against HorizonError."""
    def usable(t):
        try:
            vals = solution.u(t, solution.grid)
        except (HorizonError, OverflowError, FloatingPointError):
            return False
        return bool(np.isfinite(vals).all())

    if usable(t_max):
        return t_max
    lo, hi = 0.0, t_max
    while hi - lo > rel * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if usable(mid):
            lo = mid
        else:
            hi = mid
    return lo


# ---------------------------------------------------------------------------
# residual probes


def eigenpair_residual(model: DiffusionModel, fitness, pair: Eigenpair,
                       points: np.ndarray, fd_step: float = 1e-4) -> float:
    """Relative residual max |(A + g) phi + lam phi| / max |phi| on probes.

    Uses analytic derivatives when the eigenpair carries them, aligned grid
    differences for grid-backed pairs, otherwise central differences with
    step fd_step * (1 + |x|).
    """
    g = fitness.g if isinstance(fitness, FitnessFunction) else fitness
    if model.dim != 1:
        pts = np.atleast_2d(points)
        res = []
        for x in pts:
            ph = float(np.asarray(pair.phi(x[None, :])).reshape(-1)[0])
            dp = np.asarray(pair.dphi(x[None, :])).reshape(-1)
            d2 = np.asarray(pair.d2phi(x[None, :])).reshape(len(x), len(x)) \
                if pair.d2phi is not None else _fd_hessian(
                    lambda xx: float(np.asarray(pair.phi(xx[None, :])).reshape(-1)[0]),
                    x, fd_step)
            sig = model.diffusion(x[None, :])[0]
            b = model.drift(x[None, :])[0]
            gval = float(np.asarray(g(x[None, :])).reshape(-1)[0])
            val = b @ dp + 0.5 * np.trace(sig @ sig.T @ d2) + gval * ph + pair.lam * ph
            res.append(abs(val) / max(abs(ph), 1e-300))
        return float(np.max(res))

    x = np.asarray(points, float).reshape(-1)
    if pair.grid is not None and pair.phi_grid is not None:
        h = pair.fd_step
        idx = np.clip(np.searchsorted(pair.grid, x), 1, len(pair.grid) - 2)
        ph = pair.phi_grid[idx]
        dp = (pair.phi_grid[idx + 1] - pair.phi_grid[idx - 1]) / (2 * h)
        d2 = (pair.phi_grid[idx + 1] - 2 * ph + pair.phi_grid[idx - 1]) / h ** 2
        xs = pair.grid[idx]
    else:
        xs = x
        step = fd_step * (1.0 + np.abs(xs))
        ph = pair.phi(xs)
        if pair.d2phi is not None:
            dp = pair.dphi(xs)
            d2 = pair.d2phi(xs)
        else:
            dp = (pair.phi(xs + step) - pair.phi(xs - step)) / (2 * step)
            d2 = (pair.phi(xs + step) - 2 * ph + pair.phi(xs - step)) / step ** 2
    bvec = model.drift(xs[:, None])[:, 0]
    svec = model.diffusion(xs[:, None])[:, 0, 0]
    res = bvec * dp + 0.5 * svec * svec * d2 + np.asarray(g(xs)) * ph + pair.lam * ph
    return float(np.abs(res).max() / np.abs(ph).max())
