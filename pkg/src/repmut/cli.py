"""Scenario-driven command line front end.

Subcommands: solve, chaos, particles, validate, manifest.  All randomness
flows from a master seed through named stage derivations; outputs are CSV
and SVG files written atomically.  Exit codes: 0 ok, 2 config error,
3 numeric failure, 4 invariant failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .closed_form import (ClosedFormSolution, EngineError, RejectedCondition,
                          affine_engine, linear_engine, tilted_engine)
from .constants import TOL, DEFAULT_CHECKPOINTS, DEFAULT_STEPS_PER_UNIT
from .metric import MetricError, dqt_estimate
from .model import InitialLaw, ModelError
from .numerics import GridDensity, NumericsError, kde
from .particle import mass_estimate, mass_estimate_se, normalized_measure, run_particles
from .pde import PdeError, PdeScheme, solve_rm_pde
from .report import atomic_write_text, loglog_svg, write_csv
from .scenarios import (CANONICAL, Scenario, affine_quadratic_fitness, bm_model,
                        cir_model, gamma_like_law, linear_fitness, ou_model,
                        quadratic_decay_fitness)
from .sde import SimulationError, TimeGrid
from .spectral import SchrodingerProblem, SpectralError, cir_eigenpair, schrodinger_ground_state

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_INVARIANT = 4


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


DEFAULT_CONFIG = {
    "scenario": None,
    "model": None,
    "fitness": None,
    "initial": None,
    "horizon": 1.0,
    "engines": None,
    "particles": {"N": [250, 500, 1000, 2000, 4000], "reps": 20, "q": 2.0,
                  "n_kde": 100_000},
    "metric": {"checkpoints": DEFAULT_CHECKPOINTS, "ref_atoms": 512},
    "steps_per_unit": DEFAULT_STEPS_PER_UNIT,
    "output": "out",
    "seed": 20240801,
}


def load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    for key, val in raw.items():
        if key not in DEFAULT_CONFIG:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(DEFAULT_CONFIG[key], dict) and isinstance(val, dict):
            cfg[key].update(val)
        else:
            cfg[key] = val
    return cfg


def canonical_json(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def build_scenario(cfg: dict) -> Scenario:
    if cfg.get("scenario"):
        name = cfg["scenario"]
        if name not in CANONICAL:
            raise ConfigError(f"unknown scenario {name!r}; "
                              f"choose from {sorted(CANONICAL)}")
        sc = CANONICAL[name](horizon=cfg["horizon"]) if cfg.get("horizon") \
            else CANONICAL[name]()
        if cfg.get("engines"):
            sc = Scenario(sc.name, sc.model, sc.fitness, sc.initial_law,
                          sc.horizon, tuple(cfg["engines"]), sc.meta)
        return sc
    if not (cfg.get("model") and cfg.get("fitness") and cfg.get("initial")):
        raise ConfigError("config needs either a scenario name or "
                          "model+fitness+initial sections")
    try:
        model = _build_model(cfg["model"])
        fitness = _build_fitness(cfg["fitness"])
        initial = _build_initial(cfg["initial"])
    except (ModelError, KeyError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    engines = tuple(cfg.get("engines") or ("pde", "particle"))
    return Scenario("custom", model, fitness, initial, float(cfg["horizon"]),
                    engines)


def _build_model(mc: dict):
    kind = mc.get("kind")
    if kind == "arithmetic-bm":
        return bm_model(mc.get("b", 0.0), mc.get("sigma", 1.0), mc.get("n", 1))
    if kind == "ou":
        return ou_model(mc["kappa"], mc.get("theta", 0.0), mc["sigma"])
    if kind == "cir":
        return cir_model(mc["a"], mc["b"], mc["sigma"])
    raise ConfigError(f"unknown model kind {kind!r}")


def _build_fitness(fc: dict):
    kind = fc.get("kind")
    if kind == "linear":
        return linear_fitness(fc.get("slope", 1.0), fc.get("g_max", 2.0))
    if kind == "quadratic-decay":
        return quadratic_decay_fitness(fc.get("scale", 1.0))
    if kind == "affine-quadratic":
        return affine_quadratic_fitness(fc["alpha"], fc["delta"], fc["G"],
                                        fc.get("g_max"))
    raise ConfigError(f"unknown fitness kind {kind!r}")


def _build_initial(ic: dict):
    kind = ic.get("kind")
    if kind == "gamma-like":
        return gamma_like_law(ic.get("shape", 2.0), ic.get("rate", 2.0))
    return InitialLaw(kind, {k: v for k, v in ic.items() if k != "kind"})


# ---------------------------------------------------------------------------
# manifest


@dataclass
class RunManifest:
    config_hash: str
    master_seed: int
    artifact_version: str
    stage_seeds: dict = field(default_factory=dict)
    wallclock: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=lambda: dict(TOL))
    status: str = "running"

    def stage_seed(self, stage: str) -> int:
        s = rng.derive_seed(self.master_seed, stage)
        self.stage_seeds[stage] = s
        return s

    def write(self, path: str):
        atomic_write_text(path, json.dumps(self.__dict__, indent=2, sort_keys=True))


def _new_manifest(cfg: dict, seed) -> RunManifest:
    from . import __version__
    master = int(seed if seed is not None else cfg["seed"])
    return RunManifest(config_hash=config_hash(cfg), master_seed=master,
                       artifact_version=__version__)


# ---------------------------------------------------------------------------
# engine construction


def _build_eigenpair(sc: Scenario):
    model = sc.model
    if model.kind == "cir":
        p = model.params
        lam0 = p["a"] * (np.sqrt(p["b"] ** 2 + 2 * p["sigma"] ** 2) + p["b"]) \
            / p["sigma"] ** 2
        return cir_eigenpair(p["a"], p["b"], p["sigma"], lam0)
    st = getattr(sc.fitness, "structure", None)
    if st and st.get("kind") == "affine-quadratic" and np.any(np.asarray(st["G"])):
        sig_gen = float(sc.meta.get("sigma_gen", 1.0)) if sc.meta else 1.0
        prob = SchrodingerProblem(sigma=sig_gen, g=sc.fitness.g, half_width=8.0,
                                  nodes=2048)
        return schrodinger_ground_state(prob)
    sol = affine_engine(sc.model, sc.fitness, sc.initial_law, horizon=sc.horizon)
    return sol.meta["eigenpair"]


def build_solution(engine: str, sc: Scenario, cfg: dict, seed: int,
                   threads: int = 1):
    """One engine's solution object; raises RejectedCondition and friends."""
    spu = int(cfg["steps_per_unit"])
    checkpoints = int(cfg["metric"]["checkpoints"])
    if engine == "linear":
        return linear_engine(sc.model, sc.fitness, sc.initial_law, sc.horizon)
    if engine == "affine":
        return affine_engine(sc.model, sc.fitness, sc.initial_law, sc.horizon)
    if engine == "tilted":
        pair = _build_eigenpair(sc)
        return tilted_engine(sc.model, sc.fitness, pair, sc.initial_law,
                             sc.horizon, n_paths=int(cfg["particles"]["n_kde"]),
                             seed=seed, steps_per_unit=spu,
                             checkpoints=checkpoints, threads=threads)
    if engine == "pde":
        return _pde_solution(sc, cfg)
    if engine == "particle":
        return _particle_solution(sc, cfg, seed, threads)
    raise ConfigError(f"unknown engine {engine!r}")


def _pde_grid_density(sc: Scenario, half_width, nodes):
    if sc.model.domain.kind == "half-line":
        dx = half_width / nodes
        x = (np.arange(nodes) + 0.5) * dx
    else:
        x = np.linspace(-half_width, half_width, nodes)
    vals = sc.initial_law.density(x)
    return GridDensity(x, np.maximum(vals, 0.0)).normalize()


def _pde_solution(sc: Scenario, cfg: dict) -> ClosedFormSolution:
    half_width = 12.0 if sc.model.domain.kind != "half-line" else 14.0
    nodes = 2048
    scheme = PdeScheme(half_width=half_width, nodes=nodes)
    u0 = _pde_grid_density(sc, half_width, nodes)
    times = np.linspace(0.0, sc.horizon, int(cfg["metric"]["checkpoints"]))
    traj = solve_rm_pde(sc.model, sc.fitness, u0, sc.horizon, scheme,
                        store_times=times)

    def u(t, x):
        return traj.density(t)(np.asarray(x, float))

    def mass(t):
        raise EngineError("PDE oracle tracks the normalized density only")

    return ClosedFormSolution(engine="pde-oracle", horizon=sc.horizon,
                              shift=sc.fitness.g_max, u=u, mass=mass,
                              grid=traj.grid, meta={"trajectory": traj})


def _particle_solution(sc: Scenario, cfg: dict, seed: int,
                       threads: int = 1) -> ClosedFormSolution:
    n = int(cfg["particles"]["n_kde"])
    spu = int(cfg["steps_per_unit"])
    grid_t = TimeGrid(0.0, sc.horizon, max(1, int(round(spu * sc.horizon))))
    ens = run_particles(sc.model, sc.fitness, sc.initial_law, n, grid_t, seed,
                        checkpoints=int(cfg["metric"]["checkpoints"]),
                        threads=threads)
    cache = {}

    def u(t, x):
        if t <= 0:
            return sc.initial_law.density(np.asarray(x, float))
        j = ens.node_index(t)
        if j not in cache:
            nm = normalized_measure(ens, ens.times[j])
            cache[j] = kde(nm.atoms[:, 0], nm.masses)
        return cache[j](np.asarray(x, float))

    def mass(t):
        return mass_estimate(ens, t) * np.exp(sc.fitness.g_max * t)

    xs = ens.positions[:, -1, 0]
    grid = np.linspace(xs.min() - 1, xs.max() + 1, 1024)
    return ClosedFormSolution(engine="particle-kde", horizon=sc.horizon,
                              shift=sc.fitness.g_max, u=u, mass=mass, grid=grid,
                              meta={"ensemble": ens})


# ---------------------------------------------------------------------------
# subcommands


def cmd_solve(cfg: dict, out: str, seed, threads: int) -> int:
    sc = build_scenario(cfg)
    manifest = _new_manifest(cfg, seed)
    os.makedirs(out, exist_ok=True)
    manifest.write(os.path.join(out, "manifest.json"))
    times = np.linspace(0.0, sc.horizon, int(cfg["metric"]["checkpoints"]))
    solutions = {}
    failures = {}
    for engine in sc.engines:
        t0 = time.time()
        stage_seed = manifest.stage_seed(f"solve/{engine}")
        try:
            solutions[engine] = build_solution(engine, sc, cfg, stage_seed, threads)
        except (RejectedCondition, EngineError, SpectralError) as exc:
            failures[engine] = str(exc)
            print(f"[solve] engine {engine}: skipped ({exc})")
        manifest.wallclock[f"solve/{engine}"] = time.time() - t0

    if not solutions:
        print("[solve] no engine produced a solution")
        return EXIT_NUMERIC

    ref_grid = next(iter(solutions.values())).grid
    for engine, sol in solutions.items():
        if engine == "particle":
            etimes = sol.meta["ensemble"].times
        elif engine == "tilted":
            etimes = sol.meta["times"]
        elif engine == "pde":
            etimes = sol.meta["trajectory"].times
        else:
            etimes = times
        rows = []
        for t in etimes:
            try:
                u = np.maximum(sol.u(t, ref_grid), 0.0)
            except (EngineError, KeyError):
                continue
            rows.extend([t, x, v] for x, v in zip(ref_grid, u))
        write_csv(os.path.join(out, f"density_{engine}.csv"), "t,x,u", rows)

    if "pde" in solutions:
        solutions["pde"].meta["trajectory"].summary_json(
            os.path.join(out, "pde_summary.json"))

    names = sorted(solutions)
    l1_rows = []
    t_end = sc.horizon
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            ua = np.maximum(solutions[a].u(t_end, ref_grid), 0.0)
            ub = np.maximum(solutions[b].u(t_end, ref_grid), 0.0)
            ua /= np.trapezoid(ua, ref_grid)
            ub /= np.trapezoid(ub, ref_grid)
            l1_rows.append([a, b, np.trapezoid(np.abs(ua - ub), ref_grid)])
            print(f"[solve] L1({a}, {b}) at t={t_end:g}: {l1_rows[-1][2]:.4f}")
    write_csv(os.path.join(out, "l1_table.csv"), "engine_a,engine_b,l1", l1_rows)

    mass_rows = []
    analytic = next((solutions[e] for e in ("linear", "affine") if e in solutions), None)
    particle = solutions.get("particle")
    mass_times = particle.meta["ensemble"].times if particle is not None else times
    for t in mass_times:
        h = analytic.mass(t) if analytic is not None else float("nan")
        if particle is not None:
            ens = particle.meta["ensemble"]
            h_mc = mass_estimate(ens, t) * np.exp(sc.fitness.g_max * t)
            se = mass_estimate_se(ens, t) * np.exp(sc.fitness.g_max * t)
        else:
            h_mc, se = (1.0, 0.0) if t == 0 else (float("nan"),) * 2
        mass_rows.append([t, h, h_mc, se])
    write_csv(os.path.join(out, "masses.csv"), "t,h_t,h_t_mc,se", mass_rows)

    manifest.status = "failed-engines: " + ",".join(failures) if failures else "complete"
    manifest.write(os.path.join(out, "manifest.json"))
    return EXIT_OK


def cmd_chaos(cfg: dict, out: str, seed, threads: int) -> int:
    sc = build_scenario(cfg)
    n_ladder = [int(n) for n in cfg["particles"]["N"]]
    if len(n_ladder) < 3:
        raise ConfigError("chaos study needs at least 3 particle counts")
    reps = int(cfg["particles"]["reps"])
    q = float(cfg["particles"]["q"])
    manifest = _new_manifest(cfg, seed)
    os.makedirs(out, exist_ok=True)
    manifest.write(os.path.join(out, "manifest.json"))

    try:
        reference = linear_engine(sc.model, sc.fitness, sc.initial_law, sc.horizon)
    except RejectedCondition:
        reference = affine_engine(sc.model, sc.fitness, sc.initial_law, sc.horizon)

    rows = []
    values = []
    for n in n_ladder:
        t0 = time.time()
        stage_seed = manifest.stage_seed(f"chaos/N={n}")
        res = dqt_estimate(sc.model, sc.fitness, sc.initial_law, reference,
                           T=sc.horizon, N=n, q=q, reps=reps, seed=stage_seed,
                           checkpoints=int(cfg["metric"]["checkpoints"]),
                           ref_atoms=int(cfg["metric"]["ref_atoms"]),
                           steps_per_unit=int(cfg["steps_per_unit"]),
                           threads=threads)
        manifest.wallclock[f"chaos/N={n}"] = time.time() - t0
        rows.append([n, res.value, res.ci_low, res.ci_high])
        values.append(res.value)
        flag = "" if res.reliable_ci else "  (CI unreliable: too few reps)"
        print(f"[chaos] N={n}: D={res.value:.6f} CI=({res.ci_low:.6f}, "
              f"{res.ci_high:.6f}){flag}")
    write_csv(os.path.join(out, "rates.csv"), "N,D,ci_lo,ci_hi", rows)

    logN = np.log(np.asarray(n_ladder, float))
    logD = np.log(np.asarray(values))
    slope, intercept = np.polyfit(logN, logD, 1)
    gen = np.random.default_rng(rng.derive_seed(manifest.master_seed, "chaos-slope-boot"))
    slopes = []
    for _ in range(500):
        idx = gen.integers(0, len(n_ladder), len(n_ladder))
        if len(set(idx.tolist())) < 2:
            continue
        slopes.append(np.polyfit(logN[idx], logD[idx], 1)[0])
    s_lo, s_hi = (np.percentile(slopes, [2.5, 97.5]) if slopes
                  else (slope, slope))
    inversions = int(np.sum(np.diff(values) > 0))
    if inversions > 1:
        print(f"[chaos] warning: {inversions} inversions in D(N)")
    theory = -0.5 if q > sc.model.dim / 2 else -q / sc.model.dim
    print(f"[chaos] fitted slope {slope:.3f} (bootstrap CI [{s_lo:.3f}, {s_hi:.3f}]); "
          f"theoretical leading exponent {theory:g}")
    loglog_svg(os.path.join(out, "rates.svg"),
               n_ladder, values,
               ci=[(r[2], r[3]) for r in rows],
               fit=(slope, intercept / np.log(10.0)),  # axes are log10
               annotation=f"fit slope {slope:.3f}; theory {theory:g}",
               title=f"decay of D(N), scenario {sc.name}")
    slope_rows = [[slope, s_lo, s_hi, theory, inversions]]
    write_csv(os.path.join(out, "slope.csv"),
              "slope,ci_lo,ci_hi,theory,inversions", slope_rows)
    manifest.status = "complete"
    manifest.write(os.path.join(out, "manifest.json"))
    return EXIT_OK


def cmd_particles(cfg: dict, out: str, seed, threads: int) -> int:
    sc = build_scenario(cfg)
    manifest = _new_manifest(cfg, seed)
    os.makedirs(out, exist_ok=True)
    manifest.write(os.path.join(out, "manifest.json"))
    n = int(cfg["particles"]["n_kde"])
    grid_t = TimeGrid(0.0, sc.horizon,
                      max(1, int(round(cfg["steps_per_unit"] * sc.horizon))))
    stage_seed = manifest.stage_seed("particles")
    t0 = time.time()
    ens = run_particles(sc.model, sc.fitness, sc.initial_law, n, grid_t,
                        stage_seed, checkpoints=int(cfg["metric"]["checkpoints"]),
                        threads=threads)
    manifest.wallclock["particles"] = time.time() - t0
    ens.to_csv(os.path.join(out, "ensemble.csv"))
    mass_rows = []
    for t in ens.times:
        h_mc = mass_estimate(ens, t) * np.exp(sc.fitness.g_max * t)
        se = mass_estimate_se(ens, t) * np.exp(sc.fitness.g_max * t)
        mass_rows.append([t, float("nan"), h_mc, se])
    write_csv(os.path.join(out, "masses.csv"), "t,h_t,h_t_mc,se", mass_rows)
    manifest.status = "complete"
    manifest.write(os.path.join(out, "manifest.json"))
    print(f"[particles] wrote {n} particles x {len(ens.times)} checkpoints")
    return EXIT_OK


def cmd_validate(full: bool = True) -> int:
    from .validate import run_all
    ok, results = run_all(full=full)
    width = max(len(name) for name, _, _ in results)
    for name, good, detail in results:
        print(f"{name:<{width}}  {'PASS' if good else 'FAIL'}  {detail}")
    print(f"[validate] {sum(g for _, g, _ in results)}/{len(results)} invariants pass")
    return EXIT_OK if ok else EXIT_INVARIANT


def cmd_manifest(cfg: dict, out, seed) -> int:
    manifest = _new_manifest(cfg, seed)
    for stage in ("solve/linear", "solve/affine", "solve/tilted", "solve/pde",
                  "solve/particle", "particles", "chaos/N=*"):
        manifest.stage_seed(stage)
    text = json.dumps(manifest.__dict__, indent=2, sort_keys=True)
    if out:
        os.makedirs(out, exist_ok=True)
        manifest.write(os.path.join(out, "manifest.json"))
    print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="repmut",
        description="replicator-mutator solvers: closed forms, particles, PDE oracle")
    parser.add_argument("command",
                        choices=["solve", "chaos", "particles", "validate", "manifest"])
    parser.add_argument("--config", help="path to a JSON scenario configuration")
    parser.add_argument("--seed", type=int, default=None, help="master seed override")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads (results are independent of this)")
    parser.add_argument("--quick", action="store_true",
                        help="validate: reduced sample counts")
    args = parser.parse_args(argv)

    try:
        if args.command == "validate":
            return cmd_validate(full=not args.quick)
        if not args.config:
            raise ConfigError(f"{args.command} requires --config")
        cfg = load_config(args.config)
        out = args.out or cfg["output"]
        if args.command == "solve":
            return cmd_solve(cfg, out, args.seed, args.threads)
        if args.command == "chaos":
            return cmd_chaos(cfg, out, args.seed, args.threads)
        if args.command == "particles":
            return cmd_particles(cfg, out, args.seed, args.threads)
        if args.command == "manifest":
            return cmd_manifest(cfg, args.out, args.seed)
        raise ConfigError(f"unknown command {args.command}")
    except (ConfigError, ModelError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EngineError, SimulationError, PdeError, MetricError, NumericsError,
            SpectralError, RejectedCondition) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
