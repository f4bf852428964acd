import numpy as np
import pytest

from repmut.model import FitnessFunction
from repmut.numerics import GridDensity
from repmut.pde import (PdeError, PdeScheme, fitness_mean_trace, solve_rm_pde,
                        weak_form_residual)
from repmut.scenarios import (bm_model, cir_model, harmonic_scenario,
                              linear_bm_scenario)


def gaussian_grid_density(var=0.25, half_width=12.0, nodes=2048):
    x = np.linspace(-half_width, half_width, nodes)
    return GridDensity(x, np.exp(-0.5 * x ** 2 / var) / np.sqrt(2 * np.pi * var))


class TestHeatLimit:
    def test_zero_fitness_matches_heat_kernel(self, zero_fitness):
        m = bm_model(0.0, np.sqrt(2.0))
        u0 = gaussian_grid_density(0.25)
        traj = solve_rm_pde(m, zero_fitness, u0, T=1.0,
                            scheme=PdeScheme(half_width=12.0, nodes=2048))
        var = 0.25 + 2.0
        exact = np.exp(-0.5 * traj.grid ** 2 / var) / np.sqrt(2 * np.pi * var)
        l1 = np.trapezoid(np.abs(traj.density(1.0).values - exact), traj.grid)
        assert l1 <= 5e-3

    def test_normalized_after_every_stored_step(self, zero_fitness):
        m = bm_model(0.0, np.sqrt(2.0))
        u0 = gaussian_grid_density(0.25, half_width=10.0, nodes=512)
        traj = solve_rm_pde(m, zero_fitness, u0, T=0.3,
                            scheme=PdeScheme(half_width=10.0, nodes=512),
                            store_every=1)
        for i in range(len(traj.times)):
            total = np.trapezoid(traj.densities[i], traj.grid)
            assert abs(total - 1.0) <= 1e-9


class TestLinearFitness:
    def test_matches_analytic_gaussian(self):
        sc = linear_bm_scenario()
        u0 = gaussian_grid_density(1.0)
        traj = solve_rm_pde(sc.model, sc.fitness, u0, T=1.0,
                            scheme=PdeScheme(half_width=12.0, nodes=2048))
        mean, var = 2.0, 3.0
        exact = np.exp(-0.5 * (traj.grid - mean) ** 2 / var) / np.sqrt(2 * np.pi * var)
        l1 = np.trapezoid(np.abs(traj.density(1.0).values - exact), traj.grid)
        assert l1 <= 2e-2

    def test_mean_fitness_trace(self):
        sc = linear_bm_scenario()
        u0 = gaussian_grid_density(1.0)
        traj = solve_rm_pde(sc.model, sc.fitness, u0, T=1.0,
                            scheme=PdeScheme(half_width=12.0, nodes=1024))
        ts, trace = fitness_mean_trace(traj, sc.fitness)
        target = ts + ts ** 2  # m0 + s0^2 t + t^2 with m0=0, s0=1
        assert np.abs(trace - target).max() <= 2e-2

    def test_constant_fitness_trace(self):
        m = bm_model(0.0, 1.0)
        fit = FitnessFunction(g=lambda x: np.full_like(np.asarray(x, float), 3.0),
                              g_max=3.0, q_coeffs=[0.0])
        u0 = gaussian_grid_density(0.5, half_width=10.0, nodes=512)
        traj = solve_rm_pde(m, fit, u0, T=0.2,
                            scheme=PdeScheme(half_width=10.0, nodes=512))
        _, trace = fitness_mean_trace(traj, fit)
        assert np.abs(trace - 3.0).max() <= 1e-12


class TestHarmonic:
    def test_trace_finite_and_continuous(self):
        sc = harmonic_scenario()
        u0 = gaussian_grid_density(0.25, half_width=10.0, nodes=1024)
        traj = solve_rm_pde(sc.model, sc.fitness, u0, T=1.0,
                            scheme=PdeScheme(half_width=10.0, nodes=1024))
        ts, trace = fitness_mean_trace(traj, sc.fitness)
        assert np.isfinite(trace).all()
        assert np.abs(np.diff(trace)).max() < 0.5

    def test_positivity_audit(self):
        sc = harmonic_scenario()
        u0 = gaussian_grid_density(0.25, half_width=10.0, nodes=1024)
        traj = solve_rm_pde(sc.model, sc.fitness, u0, T=1.0,
                            scheme=PdeScheme(half_width=10.0, nodes=1024))
        assert traj.negativity_clips == 0
        assert traj.densities.min() >= 0.0


class TestHalfLine:
    def test_cir_preserves_stationary_density(self):
        # Gamma(2a/s^2, 2|b|/s^2) = Gamma(2, 2) is stationary for g = 0
        m = cir_model(1.0, -1.0, 1.0)
        fit = FitnessFunction(g=lambda x: np.zeros_like(np.asarray(x, float)),
                              g_max=0.0, q_coeffs=[0.0])
        dx = 14.0 / 1024
        x = (np.arange(1024) + 0.5) * dx
        u0 = GridDensity(x, 4.0 * x * np.exp(-2.0 * x)).normalize()
        traj = solve_rm_pde(m, fit, u0, T=0.5,
                            scheme=PdeScheme(half_width=14.0, nodes=1024))
        l1 = np.trapezoid(np.abs(traj.density(0.5).values - u0.values), x)
        assert l1 <= 5e-3
        assert traj.mass_leak <= 1e-4

    def test_mass_leak_guard_raises(self):
        m = bm_model(0.0, np.sqrt(2.0))
        fit = FitnessFunction(g=lambda x: np.zeros_like(np.asarray(x, float)),
                              g_max=0.0, q_coeffs=[0.0])
        x = np.linspace(-3, 3, 256)
        u0 = GridDensity(x, np.exp(-0.5 * x ** 2)).normalize()
        with pytest.raises(PdeError, match="leak"):
            solve_rm_pde(m, fit, u0, T=4.0, scheme=PdeScheme(half_width=3.0, nodes=256))


class TestRefinement:
    def test_weak_form_residual_second_order(self):
        sc = linear_bm_scenario()
        u0 = gaussian_grid_density(1.0, half_width=12.0, nodes=512)

        def f(x):
            return np.exp(-0.5 * (x - 1.0) ** 2)

        def df(x):
            return -(x - 1.0) * f(x)

        def d2f(x):
            return ((x - 1.0) ** 2 - 1.0) * f(x)

        res = []
        for nodes in (512, 1024):
            traj = solve_rm_pde(sc.model, sc.fitness,
                                gaussian_grid_density(1.0, 12.0, nodes), T=0.5,
                                scheme=PdeScheme(half_width=12.0, nodes=nodes),
                                store_every=1)
            res.append(weak_form_residual(sc.model, sc.fitness, traj, f, df, d2f))
        assert res[0] / res[1] >= 3.0

    def test_l1_error_refinement_order(self):
        sc = linear_bm_scenario()
        errs = []
        for nodes in (512, 1024):
            u0 = gaussian_grid_density(1.0, 12.0, nodes)
            traj = solve_rm_pde(sc.model, sc.fitness, u0, T=0.5,
                                scheme=PdeScheme(half_width=12.0, nodes=nodes))
            mean, var = 0.5 + 0.25, 2.0
            exact = np.exp(-0.5 * (traj.grid - mean) ** 2 / var) / np.sqrt(2 * np.pi * var)
            errs.append(np.trapezoid(np.abs(traj.density(0.5).values - exact), traj.grid))
        factor = errs[0] / errs[1]
        assert 4.0 * 0.6 <= factor <= 4.0 * 1.4

    def test_dt_safety_bound_enforced(self):
        sc = linear_bm_scenario()
        u0 = gaussian_grid_density(1.0, 12.0, 512)
        with pytest.raises(PdeError, match="safety"):
            solve_rm_pde(sc.model, sc.fitness, u0, T=0.5,
                         scheme=PdeScheme(half_width=12.0, nodes=512, dt=0.01))

    def test_lie_splitting_available(self):
        sc = linear_bm_scenario()
        u0 = gaussian_grid_density(1.0, 12.0, 512)
        traj = solve_rm_pde(sc.model, sc.fitness, u0, T=0.25,
                            scheme=PdeScheme(half_width=12.0, nodes=512,
                                             splitting="lie"))
        assert abs(np.trapezoid(traj.density(0.25).values, traj.grid) - 1) < 1e-9


class TestSummary:
    def test_summary_json(self, tmp_path, zero_fitness):
        import json
        m = bm_model(0.0, 1.0)
        x = np.linspace(-8, 8, 256)
        u0 = GridDensity(x, np.exp(-0.5 * x ** 2)).normalize()
        traj = solve_rm_pde(m, zero_fitness, u0, T=0.05,
                            scheme=PdeScheme(half_width=8.0, nodes=256))
        path = tmp_path / "summary.json"
        traj.summary_json(path)
        data = json.loads(path.read_text())
        assert set(data) >= {"mass_leak", "steps", "runtime_s"}
        assert data["steps"] == traj.steps
