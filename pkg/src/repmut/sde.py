"""Path simulation for base and tilted diffusions.

Euler-Maruyama by default, exact Gaussian updates for the constant
coefficient and OU kinds, full truncation for CIR.  Noise comes from the
counter-based generator in :mod:`repmut.rng`, so a path is a pure function
of (seed, particle id, grid) regardless of batching or thread count.

Fitness weights are accumulated on the integration grid while stepping
(trapezoid rule on the shifted fitness g - g_max), which lets ensembles
store only sparse time checkpoints.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import rng
from .model import DiffusionModel, FitnessFunction


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition of [t0, T] with ``steps`` intervals."""

    t0: float
    T: float
    steps: int

    def __post_init__(self):
        if not self.t0 < self.T:
            raise ValueError("need t0 < T")
        if self.steps < 1:
            raise ValueError("need steps >= 1")

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.steps

    @property
    def nodes(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.steps + 1)

    def checkpoint_indices(self, count: int) -> np.ndarray:
        """Indices of ~count stored nodes, always including both ends."""
        count = min(max(count, 2), self.steps + 1)
        return np.unique(np.round(np.linspace(0, self.steps, count)).astype(int))


@dataclass(frozen=True)
class TiltedDrift:
    """Base model plus an extra drift term (t, x) -> R^n."""

    base: DiffusionModel
    extra: Callable[[float, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class PathBundle:
    """Positions (and optionally log-weights) at the stored time nodes."""

    times: np.ndarray            # (S,)
    positions: np.ndarray        # (N, S, n)
    seed: int
    scheme: str
    logw: Optional[np.ndarray] = None   # (N, S), trapezoid of g - shift
    shift: float = 0.0
    fine_steps: int = 0
    particle_ids: Optional[np.ndarray] = None

    @property
    def n_particles(self) -> int:
        return self.positions.shape[0]

    def node_index(self, t: float) -> int:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-9 * max(1.0, abs(t)):
            raise KeyError(f"time {t} not on the stored grid")
        return i


def _eval_fitness(fit, x: np.ndarray) -> np.ndarray:
    return fit(x[:, 0]) if x.shape[1] == 1 else fit(x)


def _drift_of(model_or_tilt, t: float, x: np.ndarray) -> np.ndarray:
    if isinstance(model_or_tilt, TiltedDrift):
        return model_or_tilt.base.drift(x) + model_or_tilt.extra(t, x)
    return model_or_tilt.drift(x)


def simulate(model_or_tilt, initial: np.ndarray, grid: TimeGrid, seed: int,
             *, fitness: Optional[FitnessFunction] = None,
             store: Optional[np.ndarray] = None,
             particle_ids: Optional[np.ndarray] = None,
             threads: int = 1) -> PathBundle:
    """Simulates N paths; returns positions (and weights) at stored nodes.

    ``store`` is an index array into the fine grid nodes (defaults to all
    nodes).  ``particle_ids`` are the RNG stream keys, defaulting to
    0..N-1; passing a permutation permutes the realized paths.
    """
    base = model_or_tilt.base if isinstance(model_or_tilt, TiltedDrift) else model_or_tilt
    tilted = isinstance(model_or_tilt, TiltedDrift)
    x0 = np.atleast_2d(np.asarray(initial, float))
    if x0.shape[1] != base.dim:
        if x0.shape[0] == base.dim and x0.shape[1] != base.dim:
            x0 = x0.T
        else:
            raise SimulationError("initial points shape mismatch")
    n_part = x0.shape[0]
    ids = (np.arange(n_part, dtype=np.uint64) if particle_ids is None
           else np.asarray(particle_ids, dtype=np.uint64))
    if ids.shape[0] != n_part:
        raise SimulationError("particle_ids length mismatch")
    store_idx = np.arange(grid.steps + 1) if store is None else np.asarray(store, int)
    if store_idx[0] != 0 or store_idx[-1] != grid.steps:
        raise SimulationError("stored nodes must include both grid ends")
    if np.any(np.diff(store_idx) <= 0):
        raise SimulationError("stored node indices must be strictly increasing")

    if base.kind == "cir":
        scheme = "cir-full-truncation"
    elif base.kind in ("arithmetic-bm", "ou") and not tilted:
        scheme = "exact-gaussian"
    else:
        scheme = "euler-maruyama"

    nodes = grid.nodes
    times = nodes[store_idx]
    n_dim, m_dim = base.dim, base.m
    positions = np.empty((n_part, len(store_idx), n_dim))
    logw = np.empty((n_part, len(store_idx))) if fitness is not None else None

    def run_chunk(sl: slice):
        x = x0[sl].copy()
        cid = ids[sl]
        acc = np.zeros(x.shape[0]) if fitness is not None else None
        g_prev = _eval_fitness(fitness.shifted, x) if fitness is not None else None
        out_col = 0
        store_set = set(int(i) for i in store_idx)
        if 0 in store_set:
            positions[sl, 0] = x
            if logw is not None:
                logw[sl, 0] = 0.0
            out_col = 1
        dt = grid.dt
        sqdt = np.sqrt(dt)
        z_carry = None
        for k in range(grid.steps):
            if m_dim == 1:
                # consume both Box-Muller outputs of one counter block
                if k % 2 == 0:
                    z1, z_carry = rng.normal_pair(seed, cid, k // 2)
                    z = z1[:, None]
                else:
                    z = z_carry[:, None]
            else:
                z = rng.normals(seed, cid, k, m_dim)
            t_k = nodes[k]
            if scheme == "exact-gaussian":
                x = _exact_step(base, x, z, dt, sqdt)
            elif scheme == "cir-full-truncation":
                xp = np.maximum(x, 0.0)
                a, bb = base.params["a"], base.params["b"]
                sg = base.params["sigma"]
                drift = a + bb * xp
                if tilted:
                    drift = drift + model_or_tilt.extra(t_k, xp)
                x = x + drift * dt + sg * np.sqrt(xp) * z[:, :1] * sqdt
            else:
                drift = _drift_of(model_or_tilt, t_k, x)
                sig = base.diffusion(x)
                if n_dim == 1 and m_dim == 1:
                    x = x + drift * dt + sig[:, :, 0] * z * sqdt
                else:
                    x = x + drift * dt + np.einsum("pij,pj->pi", sig, z) * sqdt
            if not np.isfinite(x).all():
                raise SimulationError(
                    f"non-finite state at step {k + 1} (t = {nodes[k + 1]:g})")
            x_rec = np.maximum(x, 0.0) if scheme == "cir-full-truncation" else x
            if fitness is not None:
                g_new = _eval_fitness(fitness.shifted, x_rec)
                acc = acc + 0.5 * dt * (g_prev + g_new)
                g_prev = g_new
            if (k + 1) in store_set:
                positions[sl, out_col] = x_rec
                if logw is not None:
                    logw[sl, out_col] = acc
                out_col += 1

    if threads <= 1 or n_part < 2048:
        run_chunk(slice(0, n_part))
    else:
        bounds = np.linspace(0, n_part, threads + 1).astype(int)
        chunks = [slice(bounds[i], bounds[i + 1]) for i in range(threads)
                  if bounds[i] < bounds[i + 1]]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run_chunk, chunks))

    return PathBundle(times=times, positions=positions, seed=int(seed),
                      scheme=scheme, logw=logw,
                      shift=(fitness.g_max if fitness is not None else 0.0),
                      fine_steps=grid.steps, particle_ids=ids)


def _exact_step(model: DiffusionModel, x, z, dt, sqdt):
    if model.kind == "arithmetic-bm":
        b, sig = model.params["b"], model.params["sigma"]
        return x + b * dt + (z @ sig.T) * sqdt
    kappa = model.params["kappa"]
    theta = model.params["theta"]
    sig = model.params["sigma"]
    decay = np.exp(-kappa * dt)
    sd = sig * np.sqrt((1.0 - decay * decay) / (2.0 * kappa))
    return theta + (x - theta) * decay + sd * z[:, :1]


def simulate_cir(model: DiffusionModel, initial, grid: TimeGrid, seed: int,
                 **kwargs) -> PathBundle:
    """CIR paths under the full-truncation scheme (states recorded >= 0)."""
    if model.kind != "cir":
        raise SimulationError("simulate_cir expects a cir-kind model")
    return simulate(model, initial, grid, seed, **kwargs)


def accumulate_log_weight(bundle: PathBundle, fitness: FitnessFunction) -> np.ndarray:
    """Trapezoid of the shifted fitness along stored paths; (N, S) array.

    Requires the bundle to be stored on its full integration grid; sparse
    bundles already carry fused weights from :func:`simulate`.
    """
    if bundle.times.size != bundle.fine_steps + 1:
        raise SimulationError(
            "bundle stores sparse checkpoints; pass fitness= to simulate instead")
    g = np.empty(bundle.positions.shape[:2])
    for j in range(bundle.times.size):
        g[:, j] = _eval_fitness(fitness.shifted, bundle.positions[:, j])
    dt = np.diff(bundle.times)
    seg = 0.5 * dt * (g[:, 1:] + g[:, :-1])
    out = np.zeros_like(g)
    np.cumsum(seg, axis=1, out=out[:, 1:])
    return out
