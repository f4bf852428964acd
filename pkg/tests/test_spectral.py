import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from repmut.closed_form import eigenpair_residual
from repmut.model import FitnessFunction
from repmut.scenarios import bm_model, cir_model
from repmut.spectral import (EnlargeGridError, SchrodingerProblem, SpectralError,
                             cir_eigenpair, cir_tilted_extra_drift, kummer_M,
                             kummer_M_prime, pinsky_diagnostic,
                             schrodinger_ground_state)

CIR_FIT = FitnessFunction(g=lambda x: -np.asarray(x, float), g_max=0.0, q_coeffs=[1.0])


def cir_lam_max(a, b, sigma):
    return a * (np.sqrt(b * b + 2 * sigma * sigma) + b) / sigma ** 2


class TestKummer:
    def test_value_at_zero(self):
        assert kummer_M(1.7, 2.3, 0.0) == 1.0

    def test_exponential_identity(self):
        # M(1, 2, z) = (e^z - 1)/z
        assert kummer_M(1.0, 2.0, 1.0) == pytest.approx(np.e - 1.0, abs=1e-12)

    def test_equal_parameters(self):
        assert kummer_M(3.5, 3.5, 2.0) == pytest.approx(np.exp(2.0), abs=1e-12)

    def test_against_scipy(self):
        from scipy.special import hyp1f1
        gen = np.random.default_rng(0)
        for _ in range(50):
            a = gen.uniform(-4, 4)
            b = gen.uniform(0.3, 6)
            z = gen.uniform(0, 30)
            ours = kummer_M(a, b, z)
            ref = hyp1f1(a, b, z)
            assert ours == pytest.approx(ref, rel=1e-10, abs=1e-12)

    def test_pole_rejected(self):
        with pytest.raises(SpectralError, match="pole"):
            kummer_M(1.0, -2.0, 1.0)

    def test_large_z_rejected(self):
        with pytest.raises(SpectralError, match="50"):
            kummer_M(1.0, 2.0, np.array([60.0]))

    @settings(max_examples=40, deadline=None)
    @given(st.floats(-3, 3), st.floats(0.5, 5), st.floats(0, 12))
    def test_contiguous_recurrence(self, a, b, z):
        # z capped at 12: the alternating series' cancellation keeps the
        # float64 identity error under the 1e-10 gate in this regime
        # M(a,b,z) = M(a-1,b,z) + (z/b) M(a,b+1,z)
        lhs = kummer_M(a, b, z)
        rhs = kummer_M(a - 1, b, z) + (z / b) * kummer_M(a, b + 1, z)
        assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), 1.0)

    def test_derivative_relation(self):
        a, b = 1.3, 2.7
        z = np.array([0.5, 2.0])
        h = 1e-6
        fd = (kummer_M(a, b, z + h) - kummer_M(a, b, z - h)) / (2 * h)
        assert np.abs(kummer_M_prime(a, b, z) - fd).max() < 1e-8


class TestCirEigenpair:
    def test_lam_max_boundary_form(self):
        # at the top eigenvalue, alpha = 0 so the Kummer factor is one
        a, b, sig = 1.0, -1.0, 1.0
        lam0 = cir_lam_max(a, b, sig)
        pair = cir_eigenpair(a, b, sig, lam0)
        x = np.linspace(0.1, 5, 40)
        kappa, gamma = 1.0, np.sqrt(3.0)
        target = np.exp((kappa - gamma) * x)
        assert np.abs(pair.phi(x) - target).max() < 1e-12
        # tilted drift reduces to a - gamma x
        extra = cir_tilted_extra_drift(a, b, sig, lam0)
        drift = (a + b * x) + extra(0.0, x[:, None])[:, 0]
        assert np.abs(drift - (a - gamma * x)).max() < 1e-10

    def test_residual_at_lam_max(self):
        pair = cir_eigenpair(1.0, -1.0, 1.0, cir_lam_max(1.0, -1.0, 1.0))
        res = eigenpair_residual(cir_model(), CIR_FIT, pair, np.linspace(0.1, 5, 64))
        assert res <= 1e-6

    def test_residual_below_lam_max(self):
        lam = cir_lam_max(1.0, -1.0, 1.0) - 0.4
        pair = cir_eigenpair(1.0, -1.0, 1.0, lam)
        res = eigenpair_residual(cir_model(), CIR_FIT, pair, np.linspace(0.2, 4, 48))
        assert res <= 1e-6

    def test_positivity(self):
        pair = cir_eigenpair(1.0, -1.0, 1.0, cir_lam_max(1.0, -1.0, 1.0))
        x = np.linspace(1e-3, 10, 500)
        assert (pair.phi(x) > 0).all()

    def test_above_lam_max_rejected(self):
        with pytest.raises(SpectralError, match="admissible"):
            cir_eigenpair(1.0, -1.0, 1.0, cir_lam_max(1.0, -1.0, 1.0) + 0.1)

    def test_feller_required(self):
        from repmut.model import ModelError
        with pytest.raises(ModelError):
            cir_eigenpair(0.3, -1.0, 1.0, 0.0)


class TestSchrodinger:
    def test_harmonic_ground_state(self):
        gs = schrodinger_ground_state(SchrodingerProblem(
            sigma=1.0, g=lambda x: -x ** 2, half_width=8.0, nodes=2048))
        assert abs(gs.lam - 1.0) <= 1e-4
        x = np.linspace(-4, 4, 512)
        exact = np.exp(-x ** 2 / 2) / np.pi ** 0.25
        l2 = np.sqrt(np.trapezoid((gs.phi(x) - exact) ** 2, x))
        assert l2 <= 1e-3

    def test_sigma_scaling(self):
        # lambda_0 = sigma for -sigma^2 phi'' + x^2 phi
        gs = schrodinger_ground_state(SchrodingerProblem(
            sigma=2.0, g=lambda x: -x ** 2, half_width=10.0, nodes=2048))
        assert abs(gs.lam - 2.0) <= 1e-3

    def test_interior_positivity(self):
        gs = schrodinger_ground_state(SchrodingerProblem(
            sigma=1.0, g=lambda x: -x ** 4 + x, half_width=6.0, nodes=1024))
        assert (gs.phi_grid > 0).all()

    def test_grid_convergence_order(self):
        lams = [schrodinger_ground_state(SchrodingerProblem(
            sigma=1.0, g=lambda x: -x ** 2, half_width=8.0, nodes=n)).lam
            for n in (512, 1024, 2048)]
        factor = abs(lams[0] - lams[1]) / abs(lams[1] - lams[2])
        assert 4 * 0.7 <= factor <= 4 * 1.3

    def test_narrow_grid_raises_with_hint(self):
        with pytest.raises(EnlargeGridError) as err:
            schrodinger_ground_state(SchrodingerProblem(
                sigma=1.0, g=lambda x: -x ** 2, half_width=3.0, nodes=512))
        assert err.value.suggested_half_width > 3.0

    def test_non_confining_rejected(self):
        with pytest.raises(SpectralError, match="confining"):
            SchrodingerProblem(sigma=1.0, g=lambda x: np.zeros_like(x),
                               half_width=8.0, nodes=512)

    def test_up_shift_recorded_and_undone(self):
        # adding a constant to g shifts lambda by the same constant
        gs0 = schrodinger_ground_state(SchrodingerProblem(
            sigma=1.0, g=lambda x: -x ** 2, half_width=8.0, nodes=1024))
        gs5 = schrodinger_ground_state(SchrodingerProblem(
            sigma=1.0, g=lambda x: 5.0 - x ** 2, half_width=8.0, nodes=1024))
        assert gs5.lam == pytest.approx(gs0.lam - 5.0, abs=1e-10)
        x = np.linspace(-3, 3, 101)
        assert np.abs(gs5.phi(x) - gs0.phi(x)).max() < 1e-10


class TestPinskyDiagnostic:
    def test_bm_constant_function_quadratic_growth(self):
        m = bm_model(0.0, 1.0)
        rep = pinsky_diagnostic(m, lambda x: np.ones_like(np.asarray(x, float)),
                                x0=0.0, max_scale=6)
        assert rep["trend"] == "consistent with divergence"
        # integral ~ width^2 / 2: log values grow by ~2 log 2 per doubling
        diffs = np.diff(rep["log_integral_right"])
        assert np.all(np.abs(diffs - 2 * np.log(2)) < 0.2)

    def test_monotone_in_scale(self):
        m = bm_model(0.0, 1.0)
        rep = pinsky_diagnostic(m, lambda x: np.ones_like(np.asarray(x, float)))
        assert all(np.diff(rep["log_integral_left"]) > 0)

    def test_ou_eigenfunction_smoke(self):
        from repmut.closed_form import affine_engine
        from repmut.scenarios import ou_linear_scenario
        sc = ou_linear_scenario()
        pair = affine_engine(sc.model, sc.fitness, sc.initial_law).meta["eigenpair"]
        rep = pinsky_diagnostic(sc.model, pair.phi, x0=0.0, max_scale=5)
        assert "trend" in rep


class TestSerialization:
    def test_eigenpair_csv(self, tmp_path):
        from repmut.spectral import eigenpair_to_csv
        gs = schrodinger_ground_state(SchrodingerProblem(
            sigma=1.0, g=lambda x: -x ** 2, half_width=8.0, nodes=512))
        path = tmp_path / "pair.csv"
        eigenpair_to_csv(gs, path)
        data = np.loadtxt(path, delimiter=",", skiprows=1)
        assert data.shape[1] == 3
        assert (data[:, 1] > 0).all()

    def test_analytic_pair_needs_grid(self, tmp_path):
        from repmut.spectral import eigenpair_to_csv
        pair = cir_eigenpair(1.0, -1.0, 1.0, cir_lam_max(1.0, -1.0, 1.0))
        with pytest.raises(SpectralError):
            eigenpair_to_csv(pair, tmp_path / "x.csv")
        eigenpair_to_csv(pair, tmp_path / "x.csv", grid=np.linspace(0.1, 5, 50))
        assert (tmp_path / "x.csv").exists()
