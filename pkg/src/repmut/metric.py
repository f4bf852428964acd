"""Metric machinery on the one-point compactification.

Sub-probability measures are mapped to probability measures on the domain
plus an added point (the "star") absorbing the mass deficit.  The
bounded-Lipschitz (Fortet-Mourier) distance between two compactified
measures is the LP

    maximize  sum_k psi_k Delta_k
    s.t.      |psi_k| <= s,   |psi_j - psi_k| <= l * d_star(x_j, x_k),
              s + l <= 1,

solved exactly.  Small supports go through the in-house dense simplex;
larger ones through scipy's HiGHS backend on a sparse, provably equivalent
constraint set (for sorted 1D supports the star metric is the geodesic
metric of the chain-plus-hub graph, so adjacent and hub edges imply all
pairwise Lipschitz constraints).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.optimize
import scipy.sparse

from .constants import TOL, DENSE_SIMPLEX_MAX_ATOMS
from .numerics import GridDensity
from .particle import EmpiricalMeasure

STAR = "star"


class MetricError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# the compactified metric


def _l(x, x0=0.0):
    x = np.asarray(x, float)
    if x.ndim <= 1:
        return 1.0 / (1.0 + np.abs(x - x0))
    return 1.0 / (1.0 + np.linalg.norm(x - x0, axis=-1))


def dstar(p, q, x0=0.0):
    """Metric on the compactified domain; pass STAR for the added point."""
    if isinstance(p, str) and p == STAR and isinstance(q, str) and q == STAR:
        return 0.0
    if isinstance(p, str) and p == STAR:
        return _l(q, x0)
    if isinstance(q, str) and q == STAR:
        return _l(p, x0)
    p = np.asarray(p, float)
    q = np.asarray(q, float)
    if p.ndim <= 1 and q.ndim <= 1 and (p.ndim == 0 or p.shape == q.shape):
        direct = np.abs(p - q) if p.ndim == 0 else np.linalg.norm(p - q)
        if p.ndim > 0 and p.size > 1:
            direct = np.linalg.norm(p - q)
    else:
        direct = np.abs(p - q)
    return np.minimum(direct, _l(p, x0) + _l(q, x0))


@dataclass(frozen=True)
class StarMetric:
    x0: float = 0.0

    def l(self, x):
        return _l(x, self.x0)

    def __call__(self, p, q):
        return dstar(p, q, self.x0)


# ---------------------------------------------------------------------------
# compactified measures


@dataclass(frozen=True)
class CompactifiedMeasure:
    """Atoms with masses plus the deficit mass on the star point."""

    atoms: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        atoms = np.atleast_2d(np.asarray(self.atoms, float))
        if atoms.shape[0] == 1 and atoms.shape[1] > 1 and np.asarray(self.masses).size > 1:
            atoms = atoms.T
        masses = np.asarray(self.masses, float)
        if masses.size and masses.min() < -1e-15:
            raise MetricError("negative atom mass")
        total = masses.sum()
        if total > 1.0 + TOL["compactify_mass_slack"]:
            raise MetricError(f"total mass {total!r} exceeds one")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "masses", np.maximum(masses, 0.0))

    @property
    def star_mass(self) -> float:
        return max(1.0 - float(self.masses.sum()), 0.0)

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]


def compactify(measure, total_mass: Optional[float] = None) -> CompactifiedMeasure:
    """Maps a sub-probability measure to the compactified space.

    Accepts an EmpiricalMeasure (tilted or normalized), a GridDensity with
    an explicit total mass, or raw (atoms, masses).
    """
    if isinstance(measure, EmpiricalMeasure):
        return CompactifiedMeasure(measure.atoms, measure.masses)
    if isinstance(measure, GridDensity):
        if total_mass is None:
            total_mass = measure.integral()
        mids, masses = grid_density_atoms(measure)
        scale = total_mass / masses.sum() if masses.sum() > 0 else 0.0
        return CompactifiedMeasure(mids[:, None], masses * scale)
    atoms, masses = measure
    return CompactifiedMeasure(np.asarray(atoms, float), np.asarray(masses, float))


def grid_density_atoms(dens: GridDensity, n_atoms: int = 512):
    """Cell midpoints and trapezoid cell masses of a grid density."""
    x, v = dens.x, dens.values
    if x.size > n_atoms + 1:
        edges = np.linspace(x[0], x[-1], n_atoms + 1)
    else:
        edges = x
    mids = 0.5 * (edges[1:] + edges[:-1])
    masses = np.empty(mids.size)
    for i in range(mids.size):
        sl = (x >= edges[i]) & (x <= edges[i + 1])
        xs = np.unique(np.concatenate([[edges[i]], x[sl], [edges[i + 1]]]))
        masses[i] = np.trapezoid(dens(xs), xs)
    return mids, masses


def bin_measure(atoms: np.ndarray, masses: np.ndarray, edges: np.ndarray):
    """Weight-preserving binning of a 1D atomic measure onto cell midpoints.

    Mass outside the edge range is dropped (it reappears as star mass after
    compactification).
    """
    pos = np.asarray(atoms, float).reshape(-1)
    hist, _ = np.histogram(pos, bins=edges, weights=masses)
    mids = 0.5 * (edges[1:] + edges[:-1])
    return mids, hist


# ---------------------------------------------------------------------------
# in-house dense simplex


class LPError(MetricError):
    pass


def _dense_simplex(c, A, b, max_iter=None, bland_after=200, _depth=0):
    """max c^T x s.t. A x <= b, x >= 0, b >= 0 (slack basis start).

    Full-tableau primal simplex, Dantzig pricing with a Bland fallback, one
    perturbation restart on stalling.  Returns (x, value).
    """
    A = np.asarray(A, float)
    b = np.asarray(b, float)
    c = np.asarray(c, float)
    m, n = A.shape
    if max_iter is None:
        max_iter = 80 * (m + n)
    T = np.zeros((m + 1, n + m + 1))
    T[:m, :n] = A
    T[:m, n:n + m] = np.eye(m)
    T[:m, -1] = b
    T[m, :n] = -c
    basis = np.arange(n, n + m)
    bland = False
    stall = 0
    for it in range(max_iter):
        red = T[m, :-1]
        if bland:
            neg = np.nonzero(red < -1e-11)[0]
            if neg.size == 0:
                break
            j = int(neg[0])
        else:
            j = int(np.argmin(red))
            if red[j] >= -1e-11:
                break
        col = T[:m, j]
        pos = col > 1e-11
        if not pos.any():
            raise LPError("LP unbounded (malformed instance)")
        ratios = np.full(m, np.inf)
        ratios[pos] = T[:m, -1][pos] / col[pos]
        best = ratios.min()
        ties = np.nonzero(ratios <= best + 1e-12 * (1.0 + abs(best)))[0]
        if bland:
            i = int(ties[np.argmin(basis[ties])])
        else:
            # break ratio ties on the largest pivot (limits roundoff growth
            # on degenerate instances)
            i = int(ties[np.argmax(col[ties])])
        piv = T[i, j]
        T[i] /= piv
        delta = np.outer(T[:, j], T[i])
        delta[i] = 0.0
        T -= delta
        T[:, j] = 0.0
        T[i, j] = 1.0
        basis[i] = j
        if T[m, -1] <= 0 and it > 0:
            stall += 1
        else:
            stall = 0
        if stall > bland_after:
            bland = True
    else:
        if _depth == 0:
            rng = np.random.default_rng(0)
            return _dense_simplex(c, A, b + rng.uniform(1e-12, 1e-11, size=m),
                                  max_iter, bland_after, _depth=1)
        raise LPError("simplex did not terminate")
    x = np.zeros(n + m)
    x[basis] = T[:m, -1]
    return x[:n], float(T[m, -1])


# ---------------------------------------------------------------------------
# bounded-Lipschitz distance


@dataclass(frozen=True)
class BLResult:
    value: float
    psi: np.ndarray       # certificate on merged atoms, star value last
    s: float
    lip: float
    atoms: np.ndarray
    solver: str
    meta: dict = field(default_factory=dict)


def _merged_support(mu: CompactifiedMeasure, nu: CompactifiedMeasure):
    if mu.dim != nu.dim:
        raise MetricError("dimension mismatch")
    atoms = np.vstack([mu.atoms, nu.atoms])
    delta = np.concatenate([mu.masses, -nu.masses])
    # merge exactly coincident atoms (binned supports)
    order = np.lexsort(atoms.T[::-1])
    atoms, delta = atoms[order], delta[order]
    keep_first = np.ones(len(atoms), bool)
    if len(atoms) > 1:
        same = (atoms[1:] == atoms[:-1]).all(axis=1)
        keep_first[1:] = ~same
    grp = np.cumsum(keep_first) - 1
    merged = atoms[keep_first]
    dsum = np.zeros(keep_first.sum())
    np.add.at(dsum, grp, delta)
    live = np.abs(dsum) > 0.0
    return merged[live], dsum[live]


def _edges_1d(x: np.ndarray, lvals: np.ndarray):
    """Adjacent chain edges with d_star weights; hub edges added separately."""
    k = len(x)
    w = np.minimum(np.abs(np.diff(x)), lvals[:-1] + lvals[1:])
    return np.stack([np.arange(k - 1), np.arange(1, k)], axis=1), w


def bl_distance(mu: CompactifiedMeasure, nu: CompactifiedMeasure,
                x0: float = 0.0) -> BLResult:
    """Fortet-Mourier distance between compactified measures.

    Returns the optimum with a certifying test function on the merged
    support (star value last).  The certificate satisfies every pairwise
    Lipschitz constraint and the norm budget.
    """
    atoms, delta = _merged_support(mu, nu)
    delta_star = -float(delta.sum())  # star masses difference balances atoms
    K = len(atoms)
    if K == 0:
        return BLResult(0.0, np.zeros(1), 0.0, 1.0, atoms, "trivial")
    if K > 4096:
        raise MetricError("merged support too large; coarsen the measures first")
    one_d = atoms.shape[1] == 1
    if one_d:
        order = np.argsort(atoms[:, 0], kind="stable")
        atoms, delta = atoms[order], delta[order]
    lvals = _l(atoms[:, 0] if one_d else atoms, x0)

    if one_d:
        edges, weights = _edges_1d(atoms[:, 0], lvals)
    else:
        ii, jj = np.triu_indices(K, 1)
        dd = np.linalg.norm(atoms[ii] - atoms[jj], axis=1)
        weights = np.minimum(dd, lvals[ii] + lvals[jj])
        edges = np.stack([ii, jj], axis=1)
    # hub edges to the star node (index K)
    hub = np.stack([np.arange(K), np.full(K, K)], axis=1)
    edges = np.vstack([edges, hub])
    weights = np.concatenate([weights, lvals])

    obj = np.concatenate([delta, [delta_star]])
    scale = np.abs(obj).sum()
    if scale <= 0:
        return BLResult(0.0, np.zeros(K + 1), 0.0, 1.0, atoms, "trivial")
    obj_n = obj / scale

    if K <= DENSE_SIMPLEX_MAX_ATOMS:
        psi, s, lip, val = _solve_dense(obj_n, edges, weights, K)
        solver = "dense-simplex"
    else:
        psi, s, lip, val = _solve_highs(obj_n, edges, weights, K)
        solver = "highs"
    result = BLResult(value=val * scale, psi=psi, s=s, lip=lip, atoms=atoms,
                      solver=solver, meta={"delta": obj, "x0": x0})
    if check_certificate(result, x0) > 1e-10:
        # rare degenerate vertex; the second exact solver usually produces a
        # clean certificate, otherwise rescale into strict feasibility
        if solver == "dense-simplex":
            psi, s, lip, val = _solve_highs(obj_n, edges, weights, K)
            result = BLResult(value=val * scale, psi=psi, s=s, lip=lip,
                              atoms=atoms, solver="highs-fallback",
                              meta={"delta": obj, "x0": x0})
        if check_certificate(result, x0) > 1e-10:
            result = _repair_certificate(result, x0)
    return result


def _repair_certificate(result: BLResult, x0: float) -> BLResult:
    """Rescale a slightly infeasible certificate into the norm budget."""
    psi = result.psi.copy()
    K = len(result.atoms)
    s_eff = float(np.abs(psi).max())
    pts = result.atoms[:, 0] if result.atoms.shape[1] == 1 else result.atoms
    lv = _l(pts, x0)
    if result.atoms.shape[1] == 1:
        dd = np.abs(pts[:, None] - pts[None, :])
    else:
        dd = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
    dmat = np.minimum(dd, lv[:, None] + lv[None, :])
    np.fill_diagonal(dmat, np.inf)
    ratios = np.abs(psi[:K, None] - psi[None, :K]) / dmat
    star_ratios = np.abs(psi[:K] - psi[K]) / lv
    l_eff = float(max(ratios.max() if K > 1 else 0.0, star_ratios.max()))
    total = s_eff + l_eff
    if total > 1.0:
        psi /= total
        s_eff /= total
        l_eff /= total
    value = float(psi @ result.meta["delta"])
    return BLResult(value=value, psi=psi, s=s_eff, lip=l_eff,
                    atoms=result.atoms, solver=result.solver + "+repair",
                    meta=result.meta)


def _solve_dense(obj, edges, weights, K):
    nv = K + 1  # psi nodes including star
    n_psi = 2 * nv  # split into psi+ / psi-
    n = n_psi + 2   # + s, l
    ne = len(edges)
    rows = 2 * ne + 2 * nv + 1
    A = np.zeros((rows, n))
    b = np.zeros(rows)
    c = np.zeros(n)
    c[:nv] = obj
    c[nv:2 * nv] = -obj
    r = 0
    for (u, v), w in zip(edges, weights):
        A[r, u] = 1.0; A[r, nv + u] = -1.0
        A[r, v] = -1.0; A[r, nv + v] = 1.0
        A[r, n_psi + 1] = -w
        A[r + 1] = -A[r]
        A[r + 1, n_psi + 1] = -w
        r += 2
    for k in range(nv):
        A[r, k] = 1.0; A[r, nv + k] = -1.0; A[r, n_psi] = -1.0
        A[r + 1, k] = -1.0; A[r + 1, nv + k] = 1.0; A[r + 1, n_psi] = -1.0
        r += 2
    A[r, n_psi] = 1.0
    A[r, n_psi + 1] = 1.0
    b[r] = 1.0
    x, val = _dense_simplex(c, A, b)
    psi = x[:nv] - x[nv:2 * nv]
    return psi, float(x[n_psi]), float(x[n_psi + 1]), val


def _solve_highs(obj, edges, weights, K):
    nv = K + 1
    n = nv + 2  # psi (free), s, l
    ne = len(edges)
    rows, cols, vals = [], [], []
    rhs = []
    r = 0
    for (u, v), w in zip(edges, weights):
        rows += [r, r, r, r + 1, r + 1, r + 1]
        cols += [u, v, nv + 1, u, v, nv + 1]
        vals += [1.0, -1.0, -w, -1.0, 1.0, -w]
        rhs += [0.0, 0.0]
        r += 2
    for k in range(nv):
        rows += [r, r, r + 1, r + 1]
        cols += [k, nv, k, nv]
        vals += [1.0, -1.0, -1.0, -1.0]
        rhs += [0.0, 0.0]
        r += 2
    rows += [r, r]
    cols += [nv, nv + 1]
    vals += [1.0, 1.0]
    rhs += [1.0]
    A = scipy.sparse.csr_matrix((vals, (rows, cols)), shape=(r + 1, n))
    c = np.zeros(n)
    c[:nv] = -obj  # linprog minimizes
    bounds = [(None, None)] * nv + [(0, None), (0, None)]
    res = scipy.optimize.linprog(c, A_ub=A, b_ub=np.asarray(rhs), bounds=bounds,
                                 method="highs")
    if not res.success:
        raise LPError(f"HiGHS failed: {res.message}")
    x = res.x
    return x[:nv], float(x[nv]), float(x[nv + 1]), float(-res.fun)


def check_certificate(result: BLResult, x0: float = 0.0) -> float:
    """Max constraint violation of the certificate over all pairs."""
    psi = result.psi
    K = len(result.atoms)
    viol = max(np.abs(psi).max() - result.s, 0.0)
    viol = max(viol, result.s + result.lip - 1.0)
    if K:
        pts = result.atoms[:, 0] if result.atoms.shape[1] == 1 else result.atoms
        lv = _l(pts, x0)
        if result.atoms.shape[1] == 1:
            dd = np.abs(pts[:, None] - pts[None, :])
        else:
            dd = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
        dmat = np.minimum(dd, lv[:, None] + lv[None, :])
        lhs = np.abs(psi[:K, None] - psi[None, :K])
        viol = max(viol, float((lhs - result.lip * dmat).max()))
        vstar = np.abs(psi[:K] - psi[K]) - result.lip * lv
        viol = max(viol, float(vstar.max()))
    return float(viol)


def bl_dirac_formula(x, y, x0: float = 0.0) -> float:
    """Distance between unit Diracs: 2 d / (2 + d) with d = d_star(x, y)."""
    d = dstar(x, y, x0)
    return 2.0 * d / (2.0 + d)


# ---------------------------------------------------------------------------
# 1D Wasserstein diagnostic


def wasserstein1_1d(mu_atoms, mu_masses, nu_atoms, nu_masses) -> float:
    """W1 between equal-mass atomic measures on the line (CDF sweep)."""
    mu_atoms = np.asarray(mu_atoms, float).reshape(-1)
    nu_atoms = np.asarray(nu_atoms, float).reshape(-1)
    mw = np.asarray(mu_masses, float)
    nw = np.asarray(nu_masses, float)
    if abs(mw.sum() - nw.sum()) > 1e-9 * max(mw.sum(), 1.0):
        raise MetricError("unequal total masses; use bl_distance instead")
    xs = np.concatenate([mu_atoms, nu_atoms])
    ws = np.concatenate([mw, -nw])
    order = np.argsort(xs, kind="stable")
    xs, ws = xs[order], ws[order]
    cdf_diff = np.cumsum(ws)[:-1]
    return float(np.sum(np.abs(cdf_diff) * np.diff(xs)))


# ---------------------------------------------------------------------------
# the time-sup metric estimator


@dataclass(frozen=True)
class DqtResult:
    value: float
    ci_low: float
    ci_high: float
    sups: np.ndarray
    checkpoint_times: np.ndarray
    n_particles: int
    q: float
    reliable_ci: bool


def dqt_estimate(model, fitness, initial_law, reference, *, T: float, N: int,
                 q: float = 2.0, reps: int = 20, seed: int = 0,
                 checkpoints: int = 32, ref_atoms: int = 512,
                 steps_per_unit: int = 400, threads: int = 1,
                 _particle_runner=None) -> DqtResult:
    """Monte Carlo estimate of the q-norm of the sup-over-time BL distance
    between the tilted empirical measure and the tilted reference.

    Both measures are discretized onto the reference's midpoint grid (the
    empirical side by weight-preserving binning), compactified, and compared
    checkpoint by checkpoint; the sup uses the stored checkpoints only.
    """
    from . import rng
    from .particle import run_particles, tilted_measure
    from .sde import TimeGrid

    runner = run_particles if _particle_runner is None else _particle_runner
    grid_t = TimeGrid(0.0, T, max(1, int(round(steps_per_unit * T))))
    lo, hi = reference.grid[0], reference.grid[-1]
    edges = np.linspace(lo, hi, ref_atoms + 1)
    mids = 0.5 * (edges[1:] + edges[:-1])
    sups = np.empty(reps)
    times_used = None
    for r in range(reps):
        rep_seed = rng.derive_seed(seed, f"dqt-rep-{r}")
        ens = runner(model, fitness, initial_law, N, grid_t, rep_seed,
                     checkpoints=checkpoints, threads=threads)
        times_used = ens.times
        best = 0.0
        for t in ens.times:
            emp = tilted_measure(ens, t)
            ea, em = bin_measure(emp.atoms, emp.masses, edges)
            emp_c = CompactifiedMeasure(ea[:, None], em)
            h_ref = reference.mass_factor(t, shifted=True)
            uvals = np.maximum(reference.u(t, mids), 0.0)
            cell = uvals * np.diff(edges)
            total = cell.sum()
            ref_m = cell / total * h_ref if total > 0 else cell
            ref_c = CompactifiedMeasure(mids[:, None], ref_m)
            best = max(best, bl_distance(emp_c, ref_c).value)
        sups[r] = best
    value = float(np.mean(sups ** q) ** (1.0 / q))
    if reps >= 3:
        gen = np.random.default_rng(rng.derive_seed(seed, "dqt-bootstrap"))
        idx = gen.integers(0, reps, size=(1000, reps))
        boots = np.mean(sups[idx] ** q, axis=1) ** (1.0 / q)
        ci_low, ci_high = np.percentile(boots, [2.5, 97.5])
        reliable = True
    else:
        ci_low = ci_high = value
        reliable = False
    return DqtResult(value=value, ci_low=float(ci_low), ci_high=float(ci_high),
                     sups=sups, checkpoint_times=times_used, n_particles=N,
                     q=q, reliable_ci=reliable)
