"""Hand-checkable values and closed-form cases across the pipeline."""

import math

import numpy as np
import pytest
from scipy.integrate import quad

from dossfbm import coeffs, driver, fbm, flow, scheme
from dossfbm.coeffs import Bounds, builtin_family
from dossfbm.constants import compute_constants

TRIG = builtin_family("trig", 1.0, 1.0)
GD = builtin_family("gudermann", 1.0)
zero = coeffs._constant(0.0)


def sin_drift(c):
    """``b = sin``, ``sigma = c``."""
    return coeffs.custom(
        np.sin, np.cos, lambda z: -np.sin(z), coeffs._constant(c), zero, zero, Bounds(M1=1, M4=1, M6=1, M5=abs(c))
    )


NO_NOISE = sin_drift(0.0)


class TestPaths:
    @pytest.mark.parametrize("s,t,h,want", [(1, 1, 0.3, 1.0), (2, 1, 0.5, 1.0), (1, 0, 0.35, 0.0)])
    def test_covariance_values(self, s, t, h, want):
        assert fbm.covariance(s, t, h) == pytest.approx(want, abs=1e-15)

    def test_zero_path_stats(self):
        path = fbm.FbmPath(0.3, 1.0, 8, np.zeros(9), 0, "cholesky")
        s = path.stats(0.05)
        assert (s.sup_norm, s.holder_norm) == (0.0, 0.0)

    def test_linear_path_stats(self):
        t = np.linspace(0, 1, 65)
        path = fbm.FbmPath(0.3, 1.0, 64, t, 0, "cholesky")
        s = path.stats(0.05)
        assert s.sup_norm == 1.0
        assert s.holder_norm == pytest.approx(1.0, rel=1e-12)

    def test_uniform_times(self):
        path = fbm.generate(100, 3.0, 0.3, 0)
        np.testing.assert_allclose(np.diff(path.times), 0.03, rtol=1e-12)

    def test_single_step_variance(self):
        vals = fbm.sample_matrix(1, 2.0, 0.3, range(10_000), "circulant")[:, 1]
        se = np.std(vals**2, ddof=1) / 100
        assert abs(np.mean(vals**2) - 2.0**0.6) <= 5 * se

    def test_brownian_increments(self):
        vals = fbm.sample_matrix(64, 1.0, 0.5, range(10_000))
        inc = vals[:, 21] - vals[:, 20]
        se = np.std(inc**2, ddof=1) / 100
        assert abs(np.mean(inc**2) - 1 / 64) <= 5 * se


class TestCoefficients:
    def test_values(self):
        a = builtin_family("additive", 2.0)
        assert a.sigma(3.7) == 2.0 and a.dsigma(3.7) == 0.0
        assert (a.bounds.M5, a.bounds.M2, a.bounds.M3) == (2.0, 0.0, 0.0)
        assert TRIG.b(np.pi / 2) == 1.0 and TRIG.sigma(0.0) == 1.0
        assert GD.d2sigma(0.0) == -1.0

    def test_dense_validation(self):
        assert coeffs.validate_bounds(TRIG, 10.0, 10_000).violation_margin <= 0

    def test_halved_sigma_bound(self):
        report = coeffs.validate_bounds(TRIG.with_bounds(check=False, M5=0.5))
        assert not report.passed
        assert report.violation_margin == pytest.approx(0.5, abs=1e-6)


class TestFlowValues:
    def test_partition_values(self):
        np.testing.assert_array_equal(flow.build_partition(1.0, 2).nodes, [-1, -0.5, 0, 0.5, 1])
        assert flow.build_partition(3.0, 3).nodes[4] == 1.0

    def test_reference_values(self):
        assert flow.solve_phi_reference(builtin_family("additive", 0.3), 1.0, -2.0) == pytest.approx(0.4, abs=1e-12)
        assert flow.solve_phi_reference(GD, 0.0, 1.3) == pytest.approx(2 * math.atan(math.tanh(0.65)), abs=1e-10)

    def test_gudermann_errors_within_second_order_bounds(self):
        f = flow.make_flow(GD, 1.0, 64)
        assert abs(f.psi(0.0, 0.8) - flow.solve_phi_reference(GD, 0.0, 0.8)) <= math.e**2 / (6 * 64**2)
        assert abs(f.phi(0.0, 1.0) - flow.solve_phi_reference(GD, 0.0, 1.0)) <= math.e / (6 * 64**2)

    def test_zero_sigma(self):
        f = flow.make_flow(NO_NOISE, 1.0, 8)
        for u in (-1.0, -0.3, 0.0, 0.55):
            assert f.psi(0.7, u) == 0.7 and f.phi(0.7, u) == 0.7
            assert f.psi_du(0.7, u, "left") == 0.0 and f.psi_du(0.7, u, "right") == 0.0

    def test_additive_derivative(self):
        f = flow.make_flow(builtin_family("additive", 0.4), 1.0, 8)
        for u in (-1.0, -0.25, 0.0, 0.6):
            assert f.psi_du(0.1, u, "left") == f.psi_du(0.1, u, "right") == pytest.approx(0.4)

    def test_derivative_matches_central_difference(self):
        f = flow.make_flow(GD, 1.0, 64)
        h = 1e-6
        for u in (-0.71, 0.123, 0.5071):
            fd = (f.psi(0.0, u + h) - f.psi(0.0, u - h)) / (2 * h)
            assert f.psi_du(0.0, u) == pytest.approx(fd, rel=1e-6)


class TestDrift:
    def test_zero_drift(self):
        f = flow.make_flow(GD, 1.0, 8)
        g, h1 = f.drift_terms(0.4, 0.3)
        assert g == 0.0 and h1 == 0.0

    def test_additive_sin(self):
        pair = sin_drift(0.6)
        f = flow.make_flow(pair, 1.0, 8)
        for z, u in ((0.2, 0.7), (-1.0, -0.45)):
            g, h1 = f.drift_terms(z, u)
            assert g == pytest.approx(np.sin(z + 0.6 * u), rel=1e-14)
            assert h1 == pytest.approx(0.6 * np.cos(z + 0.6 * u), rel=1e-14)

    def test_g_against_exact_flow(self):
        f = flow.make_flow(TRIG, 1.0, 128)
        q, _ = quad(lambda r: TRIG.dsigma(flow.solve_phi_reference(TRIG, 0.0, r)), 0.0, 0.5, epsabs=1e-13)
        want = math.exp(-q) * math.sin(flow.solve_phi_reference(TRIG, 0.0, 0.5))
        assert driver.g_l(TRIG, f, 0.5, 0.0) == pytest.approx(want, abs=1e-3)

    def test_h1_central_difference(self):
        f = flow.make_flow(TRIG, 1.0, 128)
        h = 1e-6
        fd = (driver.g_l(TRIG, f, 0.3 + h, 0.2) - driver.g_l(TRIG, f, 0.3 - h, 0.2)) / (2 * h)
        assert driver.h1_l(TRIG, f, 0.3, 0.2) == pytest.approx(fd, rel=1e-5)


class TestTrajectories:
    def test_exact_y_against_heun(self):
        pair = sin_drift(0.5)
        path = fbm.generate(64, 1.0, 0.35, 2)
        y = driver.integrate_y_exact(pair, path, 0.3, tol=1e-8).values
        # Y' = sin(Y + 0.5 B_t), fine-step Heun on the interpolated path
        sub = 256
        h = path.dt / sub
        v = 0.3
        out = [v]
        for i in range(64):
            b0, b1 = path.values[i], path.values[i + 1]
            for j in range(sub):
                ba = b0 + (b1 - b0) * j / sub
                bb = b0 + (b1 - b0) * (j + 1) / sub
                k1 = math.sin(v + 0.5 * ba)
                k2 = math.sin(v + h * k1 + 0.5 * bb)
                v += 0.5 * h * (k1 + k2)
            out.append(v)
        assert np.max(np.abs(y - out)) <= 10 * 1e-8

    def test_trajectories_stay_below_M(self):
        path = fbm.generate(256, 1.0, 0.35, 4)
        M = compute_constants(TRIG.bounds, 1.0, 0.1, path.stats(0.01), 0.35).M
        f = flow.make_flow(TRIG, path.sup_norm, 32)
        for traj in (
            driver.integrate_y_exact(TRIG, path, 0.1),
            driver.integrate_y_l(TRIG, f, path, 0.1),
            driver.step_scheme_y(TRIG, f, path, 0.1, 32, 8),
        ):
            assert np.max(np.abs(traj.values)) <= M

    def test_fine_level_matches_exact_y(self):
        path = fbm.generate(16, 1.0, 0.35, 1)
        consts = compute_constants(TRIG.bounds, 1.0, 0.1, path.stats(0.01), 0.35)
        y = driver.integrate_y_exact(TRIG, path, 0.1, tol=1e-12).values
        yl = driver.integrate_y_l(TRIG, flow.make_flow(TRIG, path.sup_norm, 4096), path, 0.1).values
        assert math.log(np.max(np.abs(y - yl))) <= consts.log_lemma5_bound(4096)

    def test_scheme_vs_y_l_within_bound(self):
        path = fbm.generate(2048, 1.0, 0.35, 3)
        consts = compute_constants(TRIG.bounds, 1.0, 0.1, path.stats(0.01), 0.35)
        f = flow.make_flow(TRIG, path.sup_norm, 256)
        y_nn = driver.step_scheme_y(TRIG, f, path, 0.1, 256, 8).values
        y_l = driver.integrate_y_l(TRIG, f, path, 0.1).values[::8]
        # the bound overflows a float; compare logarithms
        assert math.log(np.max(np.abs(y_nn - y_l))) <= consts.log_lemma7_bound(256)

    def test_y_l_deterministic(self):
        path = fbm.generate(32, 1.0, 0.35, 1)
        f = flow.make_flow(TRIG, path.sup_norm, 16)
        a = driver.integrate_y_l(TRIG, f, path, 0.1).values
        b = driver.integrate_y_l(TRIG, flow.make_flow(TRIG, path.sup_norm, 16), path, 0.1).values
        assert np.array_equal(a, b)


class TestSolutions:
    def test_additive_translation(self):
        for n in (1, 4, 32):
            cfg = scheme.SchemeConfig(hurst=0.3, n=n, family="additive", params=(0.9,), x0=-0.2, seed=n)
            path = cfg.path()
            want = -0.2 + 0.9 * path.values[:: cfg.q]
            np.testing.assert_allclose(scheme.solve_x_scheme(cfg, path).values, want, atol=1e-14)
            np.testing.assert_allclose(scheme.solve_x_reference(cfg, path).values, want, atol=1e-13)

    def test_no_noise_first_order(self):
        # X' = sin(X), X(0) = 0.4 has X(t) = 2 arctan(tan(0.2) e^t)
        exact = lambda t: 2 * np.arctan(np.tan(0.2) * np.exp(t))
        errs = []
        for n in (16, 32, 64):
            path = fbm.generate(8 * n, 1.0, 0.35, 0)
            _, x = scheme.scheme_x_batch(NO_NOISE, path.values[None, :], 1.0, 0.4, n, 8, path.sup_norm)
            errs.append(np.max(np.abs(x[0] - exact(np.linspace(0, 1, n + 1)))))
        assert np.log2(errs[0] / errs[1]) == pytest.approx(1.0, abs=0.1)
        assert np.log2(errs[1] / errs[2]) == pytest.approx(1.0, abs=0.1)

    def test_frozen_y_without_drift(self):
        cfg = scheme.SchemeConfig(hurst=0.35, n=8, family="zero_drift_trig", params=(0.7,), x0=0.3, seed=5)
        path = cfg.path()
        x = scheme.solve_x_reference(cfg, path).values
        phi, _ = flow.flow_reference(cfg.coefficients(), np.full(9, 0.3), path.values[:: cfg.q])
        # both sides are oracle solves at relative tolerance 1e-10
        np.testing.assert_allclose(x, phi, rtol=1e-9)

    def test_single_run_within_pathwise_bound(self):
        cfg = scheme.SchemeConfig(hurst=0.4, n=512, x0=0.1, seed=3)
        path = cfg.path()
        err = scheme.sup_error(scheme.solve_x_scheme(cfg, path), scheme.solve_x_reference(cfg, path))
        consts = scheme.path_constants(cfg.coefficients(), path, cfg.x0, cfg.rho)
        assert math.log(err) <= consts.log_theorem_bound(512)
