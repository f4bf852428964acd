"""Weighted particle system: N independent diffusions with exponential
fitness weights, yielding normalized and tilted empirical measures and the
total-mass estimator.

Weights are kept in log space throughout; the normalization uses
log-sum-exp so the fitness shift cancels exactly in normalized measures.
"""

from __future__ import annotations

from dataclasses import dataclass
import numpy as np

from .constants import DEFAULT_CHECKPOINTS
from .model import DiffusionModel, FitnessFunction, InitialLaw, sample_initial
from .sde import PathBundle, TimeGrid, simulate


class ParticleError(RuntimeError):
    pass


@dataclass(frozen=True)
class WeightedParticleEnsemble:
    """Particle positions and accumulated log-weights at stored nodes."""

    times: np.ndarray        # (S,)
    positions: np.ndarray    # (N, S, n)
    logw: np.ndarray         # (N, S); trapezoid of g - shift, zero at t0
    shift: float
    seed: int

    @property
    def n_particles(self) -> int:
        return self.positions.shape[0]

    def node_index(self, t: float) -> int:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-9 * max(1.0, abs(t)):
            raise KeyError(f"time {t} not on the stored checkpoint grid")
        return i

    def to_csv(self, path):
        n, s, d = self.positions.shape
        rows = []
        for i in range(n):
            for j in range(s):
                rows.append([i, self.times[j], *self.positions[i, j], self.logw[i, j]])
        header = "particle,t," + ",".join(f"x{k}" for k in range(d)) + ",logw"
        np.savetxt(path, np.asarray(rows), delimiter=",", header=header, comments="")


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Atoms with masses; ``normalization`` is "normalized" or "tilted"."""

    atoms: np.ndarray   # (N, n)
    masses: np.ndarray  # (N,)
    normalization: str

    @property
    def total_mass(self) -> float:
        return float(self.masses.sum())


def run_particles(model: DiffusionModel, fitness: FitnessFunction,
                  initial_law: InitialLaw, n_particles: int, grid: TimeGrid,
                  seed: int, checkpoints: int = DEFAULT_CHECKPOINTS,
                  threads: int = 1) -> WeightedParticleEnsemble:
    """N independent paths with fused weight accumulation on the fine grid."""
    x0 = sample_initial(initial_law, n_particles, seed, domain=model.domain)
    store = grid.checkpoint_indices(checkpoints)
    bundle = simulate(model, x0, grid, seed, fitness=fitness, store=store,
                      threads=threads)
    return ensemble_from_bundle(bundle)


def ensemble_from_bundle(bundle: PathBundle) -> WeightedParticleEnsemble:
    if bundle.logw is None:
        raise ParticleError("bundle carries no weights; simulate with fitness=")
    return WeightedParticleEnsemble(times=bundle.times, positions=bundle.positions,
                                    logw=bundle.logw, shift=bundle.shift,
                                    seed=bundle.seed)


def normalized_measure(ens: WeightedParticleEnsemble, t: float) -> EmpiricalMeasure:
    """Self-normalized weighted empirical measure at a stored node."""
    j = ens.node_index(t)
    lw = ens.logw[:, j]
    m = lw.max()
    if not np.isfinite(m):
        raise ParticleError("all weights underflowed; shorten the horizon "
                            "or lower the shift")
    w = np.exp(lw - m)
    return EmpiricalMeasure(atoms=ens.positions[:, j], masses=w / w.sum(),
                            normalization="normalized")


def tilted_measure(ens: WeightedParticleEnsemble, t: float) -> EmpiricalMeasure:
    """Sub-probability measure with atom masses exp(L_i)/N."""
    j = ens.node_index(t)
    masses = np.exp(ens.logw[:, j]) / ens.n_particles
    return EmpiricalMeasure(atoms=ens.positions[:, j], masses=masses,
                            normalization="tilted")


def mass_estimate(ens: WeightedParticleEnsemble, t: float) -> float:
    """Unbiased estimator (1/N) sum exp(L_i(t)) of the shifted mass factor."""
    j = ens.node_index(t)
    return float(np.exp(ens.logw[:, j]).mean())


def mass_estimate_se(ens: WeightedParticleEnsemble, t: float) -> float:
    j = ens.node_index(t)
    w = np.exp(ens.logw[:, j])
    return float(w.std(ddof=1) / np.sqrt(ens.n_particles))
