"""Diffusion models, fitness functions and initial laws.

Everything here is immutable after construction.  Validation is probe-based:
Lipschitz and bound checks are evaluated on sampled points and reported,
never proven.  Hard failures are reserved for conditions that make the
downstream simulation meaningless (Feller violation, singular diffusion).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import qmc

from . import rng


class ModelError(ValueError):
    """Hard model validation failure."""


# ---------------------------------------------------------------------------
# domains


@dataclass(frozen=True)
class DomainSpec:
    """Open domain the state lives in: full space, half line or a box."""

    kind: str  # "full-space" | "half-line" | "box"
    dim: int = 1
    bounds: Optional[tuple] = None  # ((lo, hi), ...) for boxes

    def __post_init__(self):
        if self.kind not in ("full-space", "half-line", "box"):
            raise ModelError(f"unknown domain kind {self.kind!r}")
        if self.dim < 1:
            raise ModelError("dimension must be positive")
        if self.kind == "half-line" and self.dim != 1:
            raise ModelError("half-line domain requires dim == 1")
        if self.kind == "box":
            if self.bounds is None or len(self.bounds) != self.dim:
                raise ModelError("box domain needs one (lo, hi) pair per axis")
            for lo, hi in self.bounds:
                if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                    raise ModelError("box bounds must be finite and ordered")

    def contains(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        if self.kind == "full-space":
            return np.isfinite(x).all(axis=1)
        if self.kind == "half-line":
            return np.isfinite(x).all(axis=1) & (x[:, 0] > 0.0)
        lo = np.array([b[0] for b in self.bounds])
        hi = np.array([b[1] for b in self.bounds])
        return np.isfinite(x).all(axis=1) & ((x > lo) & (x < hi)).all(axis=1)

    def probe_box(self, fallback_half_width: float = 10.0):
        """Finite box used for probe sampling on unbounded domains."""
        if self.kind == "box":
            return np.array([b[0] for b in self.bounds]), np.array([b[1] for b in self.bounds])
        if self.kind == "half-line":
            return np.array([1e-3]), np.array([fallback_half_width])
        w = fallback_half_width
        return np.full(self.dim, -w), np.full(self.dim, w)


def probe_points(domain: DomainSpec, count: int, seed: int = 0,
                 box: Optional[tuple] = None) -> np.ndarray:
    """Quasi-random (Halton) probe points inside the domain's probe box."""
    lo, hi = domain.probe_box() if box is None else (np.asarray(box[0], float), np.asarray(box[1], float))
    sampler = qmc.Halton(d=domain.dim, scramble=True, seed=seed)
    u = sampler.random(count)
    return lo + u * (hi - lo)


# ---------------------------------------------------------------------------
# diffusion models


@dataclass(frozen=True)
class DiffusionModel:
    """Drift/diffusion pair (b, sigma) on a domain.

    ``kind`` selects exact-update and positivity schemes downstream:
    "arithmetic-bm" and "ou" get exact Gaussian updates, "cir" the
    full-truncation scheme.  ``params`` carries the named coefficients for
    those kinds; ``drift``/``diffusion`` callables are derived from them
    (or user supplied for "custom").
    """

    domain: DomainSpec
    kind: str  # arithmetic-bm | ou | cir | affine | custom
    params: dict = field(default_factory=dict)
    drift: Callable[[np.ndarray], np.ndarray] = None
    diffusion: Callable[[np.ndarray], np.ndarray] = None
    m: int = 1  # driving Brownian dimension
    lipschitz_declared: bool = True

    def __post_init__(self):
        n = self.domain.dim
        p = dict(self.params)
        if self.kind == "arithmetic-bm":
            b = np.broadcast_to(np.asarray(p.get("b", 0.0), float), (n,)).copy()
            sig = np.atleast_2d(np.asarray(p.get("sigma", 1.0), float))
            if sig.shape == (1, 1) and n > 1:
                sig = np.eye(n) * sig[0, 0]
            object.__setattr__(self, "m", sig.shape[1])
            object.__setattr__(self, "drift", lambda x: np.broadcast_to(b, x.shape))
            object.__setattr__(self, "diffusion", lambda x: np.broadcast_to(sig, x.shape[:-1] + sig.shape))
            p["b"], p["sigma"] = b, sig
        elif self.kind == "ou":
            kappa = float(p["kappa"])
            theta = float(p.get("theta", 0.0))
            sig = float(p["sigma"])
            if n != 1:
                raise ModelError("ou kind is one-dimensional; use affine for n > 1")
            object.__setattr__(self, "m", 1)
            object.__setattr__(self, "drift", lambda x: kappa * (theta - x))
            object.__setattr__(self, "diffusion",
                               lambda x: np.broadcast_to(np.array([[sig]]), x.shape[:-1] + (1, 1)))
        elif self.kind == "cir":
            a, bb, sig = float(p["a"]), float(p["b"]), float(p["sigma"])
            if self.domain.kind != "half-line":
                raise ModelError("cir kind requires the half-line domain")
            if 2.0 * a < sig * sig:
                raise ModelError(
                    f"Feller condition violated: 2a = {2*a:g} < sigma^2 = {sig*sig:g}")
            object.__setattr__(self, "m", 1)
            object.__setattr__(self, "drift", lambda x: a + bb * x)
            object.__setattr__(self, "diffusion",
                               lambda x: (sig * np.sqrt(np.maximum(x, 0.0)))[..., None])
        elif self.kind == "affine":
            b = np.broadcast_to(np.asarray(p["b"], float), (n,)).copy()
            B = np.asarray(p["B"], float).reshape(n, n)
            sig = np.asarray(p["sigma"], float).reshape(n, -1)
            a = sig @ sig.T
            if np.linalg.eigvalsh(a).min() <= 0:
                raise ModelError("affine kind needs sigma*sigma^T strictly positive definite")
            object.__setattr__(self, "m", sig.shape[1])
            object.__setattr__(self, "drift", lambda x: b + x @ B.T)
            object.__setattr__(self, "diffusion", lambda x: np.broadcast_to(sig, x.shape[:-1] + sig.shape))
            p["b"], p["B"], p["sigma"] = b, B, sig
        elif self.kind == "custom":
            if self.drift is None or self.diffusion is None:
                raise ModelError("custom kind requires drift and diffusion callables")
        else:
            raise ModelError(f"unknown model kind {self.kind!r}")
        object.__setattr__(self, "params", p)

    @property
    def dim(self) -> int:
        return self.domain.dim


def validate_model(model: DiffusionModel, probes: int = 256, seed: int = 0) -> dict:
    """Probe-based sanity report for a model; pure in its inputs.

    Flags local-Lipschitz violations on sampled pairs, re-checks the Feller
    inequality for CIR and positive definiteness for affine kinds.  Only
    reports; the hard failures already happened at construction.
    """
    pts = probe_points(model.domain, 2 * probes, seed=seed)
    x, y = pts[:probes], pts[probes:]
    bx, by = model.drift(x), model.drift(y)
    dxy = np.linalg.norm(x - y, axis=1)
    dxy = np.where(dxy == 0.0, 1.0, dxy)
    drift_ratio = np.linalg.norm(bx - by, axis=1) / dxy
    sx = model.diffusion(x).reshape(probes, -1)
    sy = model.diffusion(y).reshape(probes, -1)
    diff_ratio = np.linalg.norm(sx - sy, axis=1) / dxy
    report = {
        "kind": model.kind,
        "drift_lipschitz_max": float(drift_ratio.max()),
        "diffusion_lipschitz_max": float(diff_ratio.max()),
        "lipschitz_declared": model.lipschitz_declared,
        "flags": [],
    }
    if model.kind == "cir":
        a, sig = model.params["a"], model.params["sigma"]
        report["feller_margin"] = float(2 * a - sig * sig)
    if model.kind == "affine":
        sig = model.params["sigma"]
        report["a_min_eig"] = float(np.linalg.eigvalsh(sig @ sig.T).min())
    if not model.lipschitz_declared:
        report["flags"].append("lipschitz not declared by user")
    return report


# ---------------------------------------------------------------------------
# fitness functions


@dataclass(frozen=True)
class FitnessFunction:
    """Fitness g with its shift bound and Lipschitz-modulus metadata.

    ``g_max`` is the scenario's shift constant: weights downstream integrate
    g - g_max.  For fitness functions that are genuinely bounded above it
    should be a true upper bound; for scenarios with linearly growing
    fitness it is a declared effective bound, validated only on
    ``bound_region``.  ``q_coeffs`` are the coefficients (degree ascending)
    of the modulus polynomial Q with |g(x)-g(y)| <= Q(|x|+|y|) |x-y|.
    """

    g: Callable[[np.ndarray], np.ndarray]
    g_max: float
    q_coeffs: Sequence[float]
    bound_region: Optional[tuple] = None  # (lo, hi) arrays for probing
    structure: Optional[dict] = None      # engine hints, e.g. quadratic coefficients

    def __post_init__(self):
        if not np.isfinite(self.g_max):
            raise ModelError("g_max must be finite")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.g(x)

    def shifted(self, x: np.ndarray) -> np.ndarray:
        return self.g(x) - self.g_max

    def modulus(self, r: np.ndarray) -> np.ndarray:
        return np.polynomial.polynomial.polyval(r, np.asarray(self.q_coeffs, float))

    @property
    def modulus_degree(self) -> int:
        return max(len(self.q_coeffs) - 1, 0)


def check_fitness_bound(fitness: FitnessFunction, domain: DomainSpec,
                        count: int = 1000, seed: int = 0) -> dict:
    """Probes g <= g_max on quasi-random points of the declared region."""
    pts = probe_points(domain, count, seed=seed, box=fitness.bound_region)
    vals = np.asarray(fitness.g(pts if domain.dim > 1 else pts[:, 0]))
    over = vals > fitness.g_max
    return {
        "count": count,
        "violations": int(over.sum()),
        "worst_excess": float(np.maximum(vals - fitness.g_max, 0.0).max()),
    }


def check_fitness_modulus(fitness: FitnessFunction,
                          pairs: Sequence[tuple]) -> dict:
    """Checks |g(x)-g(y)| <= Q(|x|+|y|)|x-y| on the given pairs.

    Diagnostic only: the report lists violating pairs, nothing raises.
    """
    violations = []
    for x, y in pairs:
        xa, ya = np.asarray(x, float), np.asarray(y, float)
        lhs = float(np.abs(fitness.g(xa) - fitness.g(ya)))
        rhs = float(fitness.modulus(np.linalg.norm(np.atleast_1d(xa))
                                    + np.linalg.norm(np.atleast_1d(ya)))
                    * np.linalg.norm(np.atleast_1d(xa - ya)))
        if lhs > rhs * (1 + 1e-12):
            violations.append({"x": x, "y": y, "lhs": lhs, "rhs": rhs})
    return {"pairs": len(list(pairs)), "violations": violations}


# ---------------------------------------------------------------------------
# initial laws


@dataclass(frozen=True)
class InitialLaw:
    """Sampleable initial distribution with optional density and moments.

    Kinds: gaussian(mean, cov), mixture of gaussians, point-cloud (atoms
    with equal or given weights) and grid-density (1D tabulated density,
    sampled by inverse CDF).
    """

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        p = dict(self.params)
        if self.kind == "gaussian":
            mean = np.atleast_1d(np.asarray(p["mean"], float))
            cov = np.atleast_2d(np.asarray(p["cov"], float))
            if cov.shape != (mean.size, mean.size):
                raise ModelError("gaussian cov shape mismatch")
            w, v = np.linalg.eigh(cov)
            if w.min() < -1e-12:
                raise ModelError("gaussian covariance not PSD")
            p["mean"], p["cov"] = mean, cov
            p["_root"] = v @ np.diag(np.sqrt(np.maximum(w, 0.0))) @ v.T
        elif self.kind == "mixture":
            comps = p["components"]  # list of (weight, mean, var), 1D
            wts = np.array([c[0] for c in comps], float)
            if wts.min() < 0 or abs(wts.sum() - 1.0) > 1e-12:
                raise ModelError("mixture weights must be a probability vector")
        elif self.kind == "point-cloud":
            pts = np.atleast_2d(np.asarray(p["points"], float))
            if pts.ndim == 2 and pts.shape[0] == 1 and pts.shape[1] > 1 and p.get("dim", 1) == 1:
                pts = pts.T
            wts = np.asarray(p.get("weights", np.full(pts.shape[0], 1.0 / pts.shape[0])), float)
            if wts.min() < 0 or abs(wts.sum() - 1.0) > 1e-9:
                raise ModelError("point-cloud weights must be a probability vector")
            p["points"], p["weights"] = pts, wts
        elif self.kind == "grid-density":
            x = np.asarray(p["x"], float)
            f = np.asarray(p["values"], float)
            if np.any(np.diff(x) <= 0):
                raise ModelError("grid must be strictly increasing")
            if f.min() < 0:
                raise ModelError("density values must be nonnegative")
            total = np.trapezoid(f, x)
            if abs(total - 1.0) > 1e-6:
                f = f / total
            p["x"], p["values"] = x, f
        else:
            raise ModelError(f"unknown initial law kind {self.kind!r}")
        object.__setattr__(self, "params", p)

    @property
    def dim(self) -> int:
        if self.kind == "gaussian":
            return self.params["mean"].size
        if self.kind == "point-cloud":
            return self.params["points"].shape[1]
        return 1

    def density(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, float)
        if self.kind == "gaussian":
            mean, cov = self.params["mean"], self.params["cov"]
            if mean.size == 1:
                v = cov[0, 0]
                return np.exp(-0.5 * (x - mean[0]) ** 2 / v) / np.sqrt(2 * np.pi * v)
            d = x - mean
            sol = np.linalg.solve(cov, d.T).T
            q = np.einsum("...i,...i->...", d, sol)
            norm = np.sqrt((2 * np.pi) ** mean.size * np.linalg.det(cov))
            return np.exp(-0.5 * q) / norm
        if self.kind == "mixture":
            out = np.zeros_like(x, dtype=float)
            for w, m, v in self.params["components"]:
                out += w * np.exp(-0.5 * (x - m) ** 2 / v) / np.sqrt(2 * np.pi * v)
            return out
        if self.kind == "grid-density":
            return np.interp(x, self.params["x"], self.params["values"],
                             left=0.0, right=0.0)
        raise ModelError(f"{self.kind} law has no density evaluator")

    def moment(self, order: int) -> float:
        """Raw moment E[X^order] (1D kinds only for order > 1)."""
        if self.kind == "gaussian" and self.dim == 1:
            m, v = self.params["mean"][0], self.params["cov"][0, 0]
            # recursion E[X^k] = m E[X^{k-1}] + (k-1) v E[X^{k-2}]
            mom = [1.0, m]
            for k in range(2, order + 1):
                mom.append(m * mom[k - 1] + (k - 1) * v * mom[k - 2])
            return mom[order]
        if self.kind == "point-cloud" and self.dim == 1:
            pts, wts = self.params["points"][:, 0], self.params["weights"]
            return float(np.sum(wts * pts ** order))
        if self.kind == "grid-density":
            x, f = self.params["x"], self.params["values"]
            return float(np.trapezoid(x ** order * f, x))
        if self.kind == "mixture":
            total = 0.0
            for w, m, v in self.params["components"]:
                sub = InitialLaw("gaussian", {"mean": [m], "cov": [[v]]})
                total += w * sub.moment(order)
            return total
        raise ModelError("moment not available for this law")

    def mean_cov(self):
        if self.kind == "gaussian":
            return self.params["mean"].copy(), self.params["cov"].copy()
        if self.kind == "point-cloud":
            pts, wts = self.params["points"], self.params["weights"]
            m = wts @ pts
            d = pts - m
            return m, (wts[:, None] * d).T @ d
        m1, m2 = self.moment(1), self.moment(2)
        return np.array([m1]), np.array([[m2 - m1 * m1]])


def sample_initial(law: InitialLaw, count: int, seed: int,
                   domain: Optional[DomainSpec] = None) -> np.ndarray:
    """Deterministic i.i.d. sample of the law; shape (count, dim).

    The draw for index i depends only on (seed, i), so prefixes of the
    sample agree across different counts.  When ``domain`` is given the
    configuration is rejected if the law can put mass outside it.
    """
    if count < 1:
        raise ModelError("count must be >= 1")
    if domain is not None:
        _check_law_domain(law, domain)
    ids = np.arange(count, dtype=np.uint64)
    if law.kind == "gaussian":
        mean, root = law.params["mean"], law.params["_root"]
        z = rng.normals(seed, ids, 0, mean.size, stream=rng.STREAM_INIT)
        return mean + z @ root.T
    if law.kind == "mixture":
        comps = law.params["components"]
        wts = np.array([c[0] for c in comps])
        means = np.array([c[1] for c in comps])
        sds = np.sqrt(np.array([c[2] for c in comps]))
        u = rng.uniforms(seed, ids, 0, 1, stream=rng.STREAM_INIT)[:, 0]
        idx = np.searchsorted(np.cumsum(wts), u, side="right").clip(0, len(comps) - 1)
        z = rng.normals(seed, ids, 1, 1, stream=rng.STREAM_INIT)[:, 0]
        return (means[idx] + sds[idx] * z)[:, None]
    if law.kind == "point-cloud":
        pts, wts = law.params["points"], law.params["weights"]
        if count == pts.shape[0] and np.allclose(wts, 1.0 / count):
            return pts.copy()
        u = rng.uniforms(seed, ids, 0, 1, stream=rng.STREAM_INIT)[:, 0]
        idx = np.searchsorted(np.cumsum(wts), u, side="right").clip(0, pts.shape[0] - 1)
        return pts[idx]
    if law.kind == "grid-density":
        x, f = law.params["x"], law.params["values"]
        cdf = np.concatenate([[0.0], np.cumsum((f[1:] + f[:-1]) * 0.5 * np.diff(x))])
        cdf /= cdf[-1]
        u = rng.uniforms(seed, ids, 0, 1, stream=rng.STREAM_INIT)[:, 0]
        return np.interp(u, cdf, x)[:, None]
    raise ModelError(f"cannot sample law kind {law.kind!r}")


def _check_law_domain(law: InitialLaw, domain: DomainSpec):
    if domain.kind == "full-space":
        return
    if law.kind == "gaussian" or law.kind == "mixture":
        raise ModelError(
            f"{law.kind} law puts mass outside the {domain.kind} domain; "
            "use a grid-density or point-cloud law")
    if law.kind == "point-cloud":
        if not domain.contains(law.params["points"]).all():
            raise ModelError("point-cloud atoms outside the domain")
    if law.kind == "grid-density":
        x = law.params["x"]
        pts = x[law.params["values"] > 0]
        if not domain.contains(pts[:, None]).all():
            raise ModelError("grid-density support outside the domain")
