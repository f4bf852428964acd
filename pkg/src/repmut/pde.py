"""Finite-difference oracle for the 1D nonlocal replicator-mutator
Cauchy problem.

Strang splitting: an exact reaction half step (multiply by exp(g dt/2) and
renormalize, which handles the nonlocal mean-fitness term exactly) around a
Crank-Nicolson step for the conservative-form forward operator

    d_t u = d_xx (sigma^2 u / 2) - d_x (b u).

Full-line problems use Dirichlet-zero ends with a mass-leak audit;
half-line problems (square-root diffusions) use a staggered grid with a
zero-flux wall at the origin.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from .constants import TOL
from .model import DiffusionModel, FitnessFunction
from .numerics import GridDensity


class PdeError(RuntimeError):
    pass


@dataclass(frozen=True)
class PdeScheme:
    """Spatial grid and stepping policy for the splitting solver."""

    half_width: float = 12.0        # [-L, L], or (0, L] on the half line
    nodes: int = 2048
    dt: Optional[float] = None      # defaults to the diffusive safety bound
    splitting: str = "strang"       # "strang" | "lie"

    def __post_init__(self):
        if self.splitting not in ("strang", "lie"):
            raise PdeError("splitting must be 'strang' or 'lie'")


@dataclass
class PdeTrajectory:
    times: np.ndarray
    grid: np.ndarray
    densities: np.ndarray           # (len(times), M)
    mass_leak: float
    steps: int
    negativity_clips: int = 0
    meta: dict = field(default_factory=dict)

    def density(self, t: float) -> GridDensity:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-9 * max(1.0, abs(t)):
            raise KeyError(f"time {t} not stored")
        return GridDensity(self.grid, self.densities[i]).normalize()

    def to_csv(self, path):
        rows = []
        for i, t in enumerate(self.times):
            for j, x in enumerate(self.grid):
                rows.append([t, x, self.densities[i, j]])
        np.savetxt(path, np.asarray(rows), delimiter=",", header="t,x,u", comments="")

    def summary(self) -> dict:
        return {
            "mass_leak": float(self.mass_leak),
            "steps": int(self.steps),
            "runtime_s": float(self.meta.get("runtime_s", float("nan"))),
            "negativity_clips": int(self.negativity_clips),
            "dx": float(self.meta.get("dx", float("nan"))),
            "dt": float(self.meta.get("dt", float("nan"))),
        }

    def summary_json(self, path):
        import json
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)


def _build_grid(model: DiffusionModel, scheme: PdeScheme):
    if model.domain.kind == "half-line":
        dx = scheme.half_width / scheme.nodes
        x = (np.arange(scheme.nodes) + 0.5) * dx  # staggered off the wall
        return x, dx, True
    x = np.linspace(-scheme.half_width, scheme.half_width, scheme.nodes)
    return x, x[1] - x[0], False


def _flux_matrix(model: DiffusionModel, x: np.ndarray, dx: float, half_line: bool):
    """Tridiagonal generator of du/dt = (F_{j+1/2} - F_{j-1/2}) / dx with
    F = d_x(D u) - b u, D = sigma^2 / 2."""
    M = x.size
    D = model.diffusion(x[:, None])[:, 0, 0] ** 2 / 2.0
    xc = np.concatenate([[x[0] - dx], x, [x[-1] + dx]])
    bmid = model.drift(0.5 * (xc[1:] + xc[:-1])[:, None])[:, 0]  # b at j-1/2 faces
    lower = np.zeros(M)   # coefficient of u_{j-1} in row j
    diag = np.zeros(M)
    upper = np.zeros(M)   # coefficient of u_{j+1}
    for j in range(M):
        # right face j+1/2: F = (D_{j+1} u_{j+1} - D_j u_j)/dx - b (u_j + u_{j+1})/2
        if j < M - 1:
            upper[j] += (D[j + 1] / dx - bmid[j + 1] / 2.0) / dx
            diag[j] += (-D[j] / dx - bmid[j + 1] / 2.0) / dx
        else:
            # Dirichlet ghost u = 0 beyond the last node
            diag[j] += (-D[j] / dx - bmid[j + 1] / 2.0) / dx
        # left face j-1/2 enters with minus sign
        if j > 0:
            lower[j] -= (-D[j - 1] / dx - bmid[j] / 2.0) / dx
            diag[j] -= (D[j] / dx - bmid[j] / 2.0) / dx
        else:
            if half_line:
                pass  # zero-flux wall: F_{-1/2} = 0
            else:
                diag[j] -= (D[j] / dx - bmid[j] / 2.0) / dx
    return lower, diag, upper


def solve_rm_pde(model: DiffusionModel, fitness: FitnessFunction,
                 u0: GridDensity, T: float, scheme: Optional[PdeScheme] = None,
                 store_times: Optional[np.ndarray] = None,
                 store_every: Optional[int] = None) -> PdeTrajectory:
    """Splitting solver for the nonlocal Cauchy problem; densities stay
    normalized step by step, with the diffusion-step boundary leak audited
    separately (failure above the tolerance advises a larger grid)."""
    if model.dim != 1:
        raise PdeError("oracle is one-dimensional")
    t_start = time.time()
    scheme = scheme or PdeScheme()
    x, dx, half_line = _build_grid(model, scheme)
    sig_max2 = float((model.diffusion(x[:, None])[:, 0, 0] ** 2).max())
    dt_bound = dx * dx / (2.0 * max(sig_max2, 1e-12))
    dt = scheme.dt if scheme.dt is not None else dt_bound
    if dt > dt_bound * (1 + 1e-12):
        raise PdeError(f"dt = {dt:g} violates the safety bound {dt_bound:g}")
    steps = int(np.ceil(T / dt))
    dt = T / steps

    u = np.maximum(u0(x), 0.0)
    total = np.trapezoid(u, x)
    if total <= 0:
        raise PdeError("initial density vanishes on the grid")
    u = u / total

    gvals = np.asarray(fitness.g(x), float)
    half_react = np.exp(0.5 * dt * (gvals - gvals.max()))
    full_react = half_react * half_react

    lower, diag, upper = _flux_matrix(model, x, dx, half_line)
    M = x.size
    # banded forms of (I -+ dt/2 A)
    ab_im = np.zeros((3, M))
    ab_im[0, 1:] = -0.5 * dt * upper[:-1]
    ab_im[1, :] = 1.0 - 0.5 * dt * diag
    ab_im[2, :-1] = -0.5 * dt * lower[1:]

    def explicit(vec):
        out = (1.0 + 0.5 * dt * diag) * vec
        out[:-1] += 0.5 * dt * upper[:-1] * vec[1:]
        out[1:] += 0.5 * dt * lower[1:] * vec[:-1]
        return out

    if store_times is not None:
        targets = np.asarray(store_times, float)
    elif store_every is not None:
        targets = np.arange(0, steps + 1, store_every) * dt
    else:
        targets = np.linspace(0.0, T, 33)
    snap_steps = np.unique(np.clip(np.round(targets / dt).astype(int), 0, steps))

    out_times = [0.0]
    out_dens = [u.copy()]
    leak = 0.0
    clips = 0
    lie = scheme.splitting == "lie"

    def react(vec, factor):
        w = vec * factor
        tot = np.trapezoid(w, x)
        if not np.isfinite(tot) or tot <= 0:
            raise PdeError("reaction step lost all mass")
        return w / tot

    for k in range(steps):
        if lie:
            u = react(u, full_react)
        else:
            u = react(u, half_react)
        before = np.trapezoid(u, x)
        u = scipy.linalg.solve_banded((1, 1), ab_im, explicit(u))
        neg = u < 0
        if neg.any():
            if u[neg].min() < -1e-12:
                clips += int((u < -1e-14).sum())
            u = np.maximum(u, 0.0)
        after = np.trapezoid(u, x)
        leak += abs(before - after)
        if leak > TOL["pde_mass_leak"]:
            raise PdeError(
                f"boundary mass leak {leak:.2e} exceeds {TOL['pde_mass_leak']:g}; "
                "enlarge the grid half width")
        u = u / after * before
        if not lie:
            u = react(u, half_react)
        if (k + 1) in snap_steps:
            out_times.append((k + 1) * dt)
            out_dens.append(u.copy())

    return PdeTrajectory(times=np.asarray(out_times), grid=x,
                         densities=np.asarray(out_dens), mass_leak=leak,
                         steps=steps, negativity_clips=clips,
                         meta={"dx": dx, "dt": dt, "half_line": half_line,
                               "runtime_s": time.time() - t_start})


def fitness_mean_trace(traj: PdeTrajectory, fitness: FitnessFunction):
    """Time series of the population mean fitness along the trajectory."""
    g = np.asarray(fitness.g(traj.grid), float)
    vals = [np.trapezoid(g * traj.densities[i], traj.grid)
            / np.trapezoid(traj.densities[i], traj.grid)
            for i in range(len(traj.times))]
    return traj.times.copy(), np.asarray(vals)


def weak_form_residual(model: DiffusionModel, fitness: FitnessFunction,
                       traj: PdeTrajectory, f, df, d2f) -> float:
    """Residual of the variational identity for one smooth test function
    (derivatives supplied analytically); integrates checkpoints by trapezoid."""
    x = traj.grid
    fx = f(x)
    Af = model.drift(x[:, None])[:, 0] * df(x) \
        + 0.5 * model.diffusion(x[:, None])[:, 0, 0] ** 2 * d2f(x)
    g = np.asarray(fitness.g(x), float)
    uf, uAgf, ug = [], [], []
    for i in range(len(traj.times)):
        u = traj.densities[i]
        z = np.trapezoid(u, x)
        uf.append(np.trapezoid(u * fx, x) / z)
        uAgf.append(np.trapezoid(u * (Af + g * fx), x) / z)
        ug.append(np.trapezoid(u * g, x) / z)
    uf, uAgf, ug = map(np.asarray, (uf, uAgf, ug))
    t = traj.times
    lhs = uf[-1] - uf[0]
    rhs = np.trapezoid(uAgf - ug * uf, t)
    return float(abs(lhs - rhs))
