import numpy as np
import pytest

import repmut.metric as metric_mod
from repmut.metric import (STAR, CompactifiedMeasure, MetricError, bl_dirac_formula,
                           bl_distance, bin_measure, check_certificate, compactify,
                           dqt_estimate, dstar, grid_density_atoms, wasserstein1_1d)
from repmut.numerics import GridDensity
from repmut.particle import EmpiricalMeasure


class TestDstar:
    def test_identity(self):
        assert dstar(2.3, 2.3) == 0.0
        assert dstar(STAR, STAR) == 0.0

    def test_shortcut_value(self):
        # d(0, 5) = min(5, 1 + 1/6) = 7/6
        assert dstar(0.0, 5.0) == pytest.approx(7.0 / 6.0, abs=1e-15)

    def test_star_distance(self):
        assert dstar(3.0, STAR) == pytest.approx(0.25, abs=1e-15)

    def test_symmetry_random(self):
        gen = np.random.default_rng(0)
        for _ in range(100):
            x, y = gen.uniform(-30, 30, 2)
            assert dstar(x, y) == dstar(y, x)

    def test_bounded_by_two(self):
        gen = np.random.default_rng(1)
        pts = gen.uniform(-1e6, 1e6, (100, 2))
        assert all(dstar(x, y) <= 2.0 for x, y in pts)

    def test_triangle_inequality_bulk(self):
        gen = np.random.default_rng(2)
        x = gen.uniform(-50, 50, (10_000, 3))
        d12 = np.array([dstar(a, b) for a, b in zip(x[:, 0], x[:, 1])])
        d13 = np.array([dstar(a, b) for a, b in zip(x[:, 0], x[:, 2])])
        d32 = np.array([dstar(a, b) for a, b in zip(x[:, 2], x[:, 1])])
        assert (d12 <= d13 + d32 + 1e-12).all()

    def test_triangle_with_star(self):
        gen = np.random.default_rng(3)
        for _ in range(1000):
            x, y = gen.uniform(-20, 20, 2)
            assert dstar(x, STAR) <= dstar(x, y) + dstar(y, STAR) + 1e-12


class TestCompactify:
    def test_probability_measure_no_star_mass(self):
        m = compactify(EmpiricalMeasure(np.array([[0.0], [1.0]]),
                                        np.array([0.5, 0.5]), "normalized"))
        assert m.star_mass == 0.0

    def test_tilted_deficit_to_star(self):
        m = compactify(EmpiricalMeasure(np.array([[0.0]]),
                                        np.array([np.exp(-1.0)]), "tilted"))
        assert m.star_mass == pytest.approx(1 - np.exp(-1.0), abs=1e-15)

    def test_empty_measure_is_pure_star(self):
        m = CompactifiedMeasure(np.zeros((0, 1)), np.zeros(0))
        assert m.star_mass == 1.0

    def test_excess_mass_fails(self):
        with pytest.raises(MetricError, match="exceeds"):
            CompactifiedMeasure(np.array([[0.0]]), np.array([1.1]))

    def test_grid_density_atoms_conserve_mass(self):
        x = np.linspace(-5, 5, 2001)
        dens = GridDensity(x, np.exp(-0.5 * x ** 2) / np.sqrt(2 * np.pi))
        mids, masses = grid_density_atoms(dens, 512)
        assert masses.sum() == pytest.approx(dens.integral(), abs=1e-9)
        c = compactify(dens, total_mass=0.7)
        assert c.masses.sum() == pytest.approx(0.7, abs=1e-12)


class TestBlDistance:
    def test_identical_measures(self):
        mu = CompactifiedMeasure(np.array([[0.0], [2.0]]), np.array([0.3, 0.4]))
        assert bl_distance(mu, mu).value <= 1e-12

    def test_dirac_formula_random_pairs(self):
        gen = np.random.default_rng(4)
        for _ in range(100):
            x, y = gen.uniform(-8, 8, 2)
            mu = CompactifiedMeasure(np.array([[x]]), np.array([1.0]))
            nu = CompactifiedMeasure(np.array([[y]]), np.array([1.0]))
            r = bl_distance(mu, nu)
            assert abs(r.value - bl_dirac_formula(x, y)) <= 1e-9
            assert check_certificate(r) <= 1e-9

    def test_far_diracs_saturate(self):
        # d_star = 2 is unreachable but large separations approach value 1
        mu = CompactifiedMeasure(np.array([[-600.0]]), np.array([1.0]))
        nu = CompactifiedMeasure(np.array([[700.0]]), np.array([1.0]))
        d = dstar(-600.0, 700.0)
        assert bl_distance(mu, nu).value == pytest.approx(2 * d / (2 + d), abs=1e-9)

    def test_half_dirac_analytic(self):
        # delta_x vs (1/2) delta_x: optimum l(x)/(2 + l(x)) (star shortcut)
        x0 = 1.3
        lx = 1.0 / (1.0 + abs(x0))
        mu = CompactifiedMeasure(np.array([[x0]]), np.array([1.0]))
        nu = CompactifiedMeasure(np.array([[x0]]), np.array([0.5]))
        r = bl_distance(mu, nu)
        assert r.value == pytest.approx(lx / (2 + lx), abs=1e-9)

    def test_half_dirac_brute_force(self):
        x0 = 1.3
        lx = 1.0 / (1.0 + abs(x0))
        r = bl_distance(CompactifiedMeasure(np.array([[x0]]), np.array([1.0])),
                        CompactifiedMeasure(np.array([[x0]]), np.array([0.5])))

        def value_at(s):
            # inner maximization over (psi1, psi_star) is analytic: stretch
            # against the star point within the Lipschitz and sup budgets
            lip = 1.0 - s
            psi_star = -s
            psi1 = min(s, psi_star + lip * lx)
            return 0.5 * psi1 - 0.5 * psi_star

        # coarse grid search plus ternary refinement of the concave profile
        ss = np.linspace(0, 1, 4001)
        s_lo, s_hi = 0.0, 1.0
        s_best = ss[np.argmax([value_at(s) for s in ss])]
        s_lo, s_hi = max(0.0, s_best - 1e-3), min(1.0, s_best + 1e-3)
        for _ in range(80):
            m1 = s_lo + (s_hi - s_lo) / 3
            m2 = s_hi - (s_hi - s_lo) / 3
            if value_at(m1) < value_at(m2):
                s_lo = m1
            else:
                s_hi = m2
        best = value_at(0.5 * (s_lo + s_hi))
        assert r.value == pytest.approx(best, abs=1e-9)

    def test_axioms_on_random_triples(self):
        gen = np.random.default_rng(5)
        for _ in range(300):
            ms = []
            for _ in range(3):
                k = int(gen.integers(1, 5))
                atoms = gen.uniform(-6, 6, k)[:, None]
                masses = gen.dirichlet(np.ones(k)) * gen.uniform(0.2, 1.0)
                ms.append(CompactifiedMeasure(atoms, masses))
            dab = bl_distance(ms[0], ms[1]).value
            dba = bl_distance(ms[1], ms[0]).value
            dac = bl_distance(ms[0], ms[2]).value
            dcb = bl_distance(ms[2], ms[1]).value
            assert abs(dab - dba) <= 1e-10
            assert dab <= dac + dcb + 1e-9

    def test_certificates_feasible(self):
        gen = np.random.default_rng(6)
        for _ in range(50):
            k1, k2 = gen.integers(1, 8, 2)
            mu = CompactifiedMeasure(gen.uniform(-6, 6, int(k1))[:, None],
                                     gen.dirichlet(np.ones(int(k1))) * 0.8)
            nu = CompactifiedMeasure(gen.uniform(-6, 6, int(k2))[:, None],
                                     gen.dirichlet(np.ones(int(k2))) * 0.9)
            assert check_certificate(bl_distance(mu, nu)) <= 1e-9

    def test_dense_vs_highs_agree(self):
        gen = np.random.default_rng(7)
        for _ in range(10):
            k = int(gen.integers(8, 21))
            mu = CompactifiedMeasure(gen.uniform(-6, 6, k)[:, None],
                                     gen.dirichlet(np.ones(k)) * gen.uniform(0.3, 1))
            nu = CompactifiedMeasure(gen.uniform(-6, 6, k)[:, None],
                                     gen.dirichlet(np.ones(k)) * gen.uniform(0.3, 1))
            dense = bl_distance(mu, nu)
            assert dense.solver == "dense-simplex"
            old = metric_mod.DENSE_SIMPLEX_MAX_ATOMS
            metric_mod.DENSE_SIMPLEX_MAX_ATOMS = 0
            try:
                sparse = bl_distance(mu, nu)
            finally:
                metric_mod.DENSE_SIMPLEX_MAX_ATOMS = old
            assert sparse.solver == "highs"
            assert abs(dense.value - sparse.value) <= 1e-10

    def test_upper_bounds(self):
        gen = np.random.default_rng(8)
        for _ in range(50):
            k = int(gen.integers(1, 6))
            mu = CompactifiedMeasure(gen.uniform(-9, 9, k)[:, None],
                                     gen.dirichlet(np.ones(k)) * gen.uniform(0.1, 1))
            nu = CompactifiedMeasure(gen.uniform(-9, 9, k)[:, None],
                                     gen.dirichlet(np.ones(k)) * gen.uniform(0.1, 1))
            val = bl_distance(mu, nu).value
            tv = 0.5 * (np.abs(np.concatenate([mu.masses, -nu.masses])).sum()
                        + abs(mu.star_mass - nu.star_mass))
            assert val <= 2.0 + 1e-12
            assert val <= 2 * tv + 1e-9

    def test_star_only_difference(self):
        # same atoms, different masses: value positive, certificate feasible
        atoms = np.array([[0.0], [1.0]])
        mu = CompactifiedMeasure(atoms, np.array([0.4, 0.4]))
        nu = CompactifiedMeasure(atoms, np.array([0.3, 0.3]))
        r = bl_distance(mu, nu)
        assert 0 < r.value <= 0.2
        assert check_certificate(r) <= 1e-9


class TestWasserstein:
    def test_identical(self):
        assert wasserstein1_1d([0.0, 1.0], [0.5, 0.5], [0.0, 1.0], [0.5, 0.5]) == 0.0

    def test_translated_diracs(self):
        assert wasserstein1_1d([0.0], [1.0], [1.0], [1.0]) == 1.0

    def test_empirical_vs_exact_grid(self):
        gen = np.random.default_rng(9)
        sample = gen.standard_normal(100_000)
        x = np.linspace(-8, 8, 4001)
        dens = np.exp(-0.5 * x ** 2) / np.sqrt(2 * np.pi)
        cell = dens * (x[1] - x[0])
        cell /= cell.sum()
        d = wasserstein1_1d(sample, np.full(sample.size, 1.0 / sample.size), x, cell)
        assert d <= 0.02

    def test_unequal_masses_rejected(self):
        with pytest.raises(MetricError, match="unequal"):
            wasserstein1_1d([0.0], [1.0], [0.0], [0.5])


class TestDqt:
    def _setup(self):
        from repmut.closed_form import linear_engine
        from repmut.scenarios import linear_bm_scenario
        sc = linear_bm_scenario()
        ref = linear_engine(sc.model, sc.fitness, sc.initial_law)
        return sc, ref

    def test_self_reference_is_zero(self):
        # replicate the reference measure on both sides: distance 0 at each t
        sc, ref = self._setup()
        edges = np.linspace(ref.grid[0], ref.grid[-1], 257)
        mids = 0.5 * (edges[1:] + edges[:-1])
        for t in (0.25, 1.0):
            h = ref.mass_factor(t, shifted=True)
            cell = np.maximum(ref.u(t, mids), 0) * np.diff(edges)
            m = cell / cell.sum() * h
            c = CompactifiedMeasure(mids[:, None], m)
            assert bl_distance(c, c).value <= 1e-12

    def test_value_in_metric_range_single_particle(self):
        sc, ref = self._setup()
        res = dqt_estimate(sc.model, sc.fitness, sc.initial_law, ref,
                           T=0.5, N=1, q=2.0, reps=2, seed=3, checkpoints=5,
                           ref_atoms=128, steps_per_unit=100)
        assert 0.0 < res.value <= 2.0
        assert not res.reliable_ci

    def test_decay_with_n(self):
        sc, ref = self._setup()
        vals = []
        for n in (64, 1024):
            res = dqt_estimate(sc.model, sc.fitness, sc.initial_law, ref,
                               T=0.5, N=n, q=2.0, reps=4, seed=5, checkpoints=5,
                               ref_atoms=256, steps_per_unit=100)
            vals.append(res.value)
        assert vals[1] < vals[0]

    def test_bin_measure_preserves_weight(self):
        gen = np.random.default_rng(10)
        atoms = gen.uniform(-3, 3, 500)
        masses = gen.uniform(0, 1, 500) / 600
        edges = np.linspace(-4, 4, 65)
        mids, binned = bin_measure(atoms, masses, edges)
        assert binned.sum() == pytest.approx(masses.sum(), rel=1e-12)
