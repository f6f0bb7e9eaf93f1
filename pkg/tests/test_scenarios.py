from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import quad, solve_ivp

from fwclosure import string_kernels as sk
from fwclosure.errors import CrossingAngleError, DegenerateClassificationError
from fwclosure.hybrid import IntegratorConfig, simulate
from fwclosure.model import eval_free_rhs, filippov_sliding_lambda, uniqueness_certificate
from fwclosure import scenarios as sc

from conftest import bowed_friction, reference_twofold


class TestLinearString:
    def test_validation(self):
        with pytest.raises(ValueError):
            sc.build_linear_string_modal(1.0, 0.4, 0)
        with pytest.raises(ValueError):
            sc.build_linear_string_modal(1.0, 1.4, 3)

    def test_static_deflection(self):
        ls = sc.build_linear_string_modal(1.0, 0.4, 64)
        assert abs(ls.static_deflection() - 0.24) / 0.24 < 1e-2
        assert sc.build_linear_string_modal(2.0, 0.4, 64).static_deflection() == pytest.approx(0.06, rel=1e-2)

    def test_zero_force_keeps_rest(self):
        ls = sc.build_linear_string_modal(1.0, 0.4, 4)
        sol = solve_ivp(lambda t, x: ls.rhs(t, x, 0.0), (0, 2), np.zeros(8), rtol=1e-10)
        assert np.all(sol.y == 0.0)

    def test_step_response_solves_modal_system(self):
        ls = sc.build_linear_string_modal(1.0, 0.4, 8)
        sol = solve_ivp(lambda t, x: ls.rhs(t, x, 1.0), (0, 2), np.zeros(16), rtol=1e-11, atol=1e-12, dense_output=True)
        t = np.linspace(0, 2, 41)
        assert np.allclose(ls.contact_displacement(sol.sol(t).T), ls.step_response(t), atol=1e-8)

    def test_step_response_square_wave_shape(self):
        ls = sc.build_linear_string_modal(1.0, 0.4, 8)
        # the exact contact motion is piecewise linear with slope 1/(2c) right after the step
        assert ls.step_response(0.2)[0] == pytest.approx(0.1, abs=0.02)


class TestImageSolution:
    def test_rest_at_zero(self):
        assert sc.dalembert_contact_displacement(1.0, 0.4, 0.0) == 0.0

    def test_negative_time(self):
        with pytest.raises(ValueError):
            sc.dalembert_contact_displacement(1.0, 0.4, -0.1)

    @given(st.floats(0.0, 4.0), st.floats(0.5, 2.0), st.floats(0.1, 0.9))
    def test_periodic(self, t, c, xi):
        a = sc.dalembert_contact_displacement(c, xi, t)
        b = sc.dalembert_contact_displacement(c, xi, t + 2.0 / c)
        assert a == pytest.approx(b, abs=1e-12)

    @pytest.mark.parametrize("c, xi", [(1.0, 0.4), (2.0, 0.3)])
    def test_time_average_is_static_deflection(self, c, xi):
        period = 2.0 / c
        avg = quad(lambda t: sc.dalembert_contact_displacement(c, xi, t), 0, period, points=[2 * xi / c, 2 * (1 - xi) / c], limit=200)[0] / period
        assert avg == pytest.approx(xi * (1 - xi) / c**2, rel=1e-10)

    def test_initial_slope(self):
        assert sc.dalembert_contact_displacement(1.0, 0.4, 0.1) == pytest.approx(0.05, abs=1e-15)

    def test_modal_agrees(self):
        ls = sc.build_linear_string_modal(1.0, 0.4, 256)
        t = np.linspace(0, 4, 4001)
        assert np.abs(ls.step_response(t) - sc.dalembert_contact_displacement(1.0, 0.4, t)).max() <= 1e-3


class TestFriction:
    def test_builder_validation(self):
        with pytest.raises(ValueError):
            sc.build_friction_oscillator(0.05, -1.0, 0.03, 1.0, 0.5)
        with pytest.raises(ValueError):
            sc.build_friction_oscillator(float("nan"), 50.0, 0.03, 1.0, 0.5)

    def test_structure(self):
        m = bowed_friction()
        assert m.dim == 3 and m.kappa_index == 2
        assert np.array_equal(m.lplus, [0.0, 0.05, 0.0])
        y = np.array([0.2, 0.7, 0.1])
        assert m.lambda_plus(y) == pytest.approx(-1.0 + 0.5 * (0.7 - 1.0))
        assert m.lambda_minus(y) == pytest.approx(1.0 + 0.5 * (0.7 - 1.0))
        f = m.rhs(0.0, 0.3, y)
        assert f == pytest.approx([0.7, -math.pi**2 * 0.2 - 0.06 * 0.7 + 0.3 + 50 * 0.05 * 0.2, 50 * 0.2])

    @given(st.tuples(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3)))
    def test_certificate_case_two(self, y):
        assert uniqueness_certificate(bowed_friction(), np.array(y)).case == 2

    @given(st.floats(-2, 2), st.floats(-2, 2))
    def test_critical_manifold(self, y1, kappa):
        m = bowed_friction(stiffness=1.0)
        lam = filippov_sliding_lambda(m, 0.0, np.array([y1, 1.0, kappa]))
        assert 1.0 * lam - y1 - 2 * 0.03 == pytest.approx(0.0, abs=1e-12)

    def test_steady_slip_is_unstable_equilibrium(self):
        m = bowed_friction()
        eq = sc.friction_steady_slip(m)
        assert np.allclose(eval_free_rhs(m, 0.0, eq, -1), 0.0, atol=1e-14)
        jac = sc.numerical_jacobian(lambda y: eval_free_rhs(m, 0.0, y, -1), eq)
        assert np.linalg.eigvals(jac).real.max() > 0

    def test_converges_to_periodic_orbit(self):
        m = bowed_friction()
        y0 = sc.friction_steady_slip(m) + np.array([0.01, 0.0, 0.0])
        tr = simulate(m, y0, "FREE_MINUS", None, (0.0, 60.0), IntegratorConfig(dt=2e-3))
        hits = sc.poincare_returns(tr, 1, 0.0, direction=-1)
        assert len(hits) >= 6
        gaps = np.linalg.norm(np.diff(hits[-5:], axis=0), axis=1)
        assert gaps[-1] < 1e-3
        # all sampled states remain bounded on the orbit
        assert np.abs(tr.y).max() < 10


class TestTwofoldModel:
    def test_structure(self):
        m = reference_twofold()
        assert m.dim == 4 and m.kappa_index == 3
        assert np.array_equal(m.lplus, [0.05, 0.0, 0.0, 0.0])
        f = m.rhs(0.0, 0.5, np.array([0.0, 1.0, 2.0, 0.1]))
        assert f == pytest.approx([1.0 + 0.5 * 3.0 - 0.05 * 10 * 0.4, -1.0 - 1.5, -0.1 + 0.5 * 2.1, 4.0])

    def test_validation(self):
        with pytest.raises(ValueError):
            sc.build_twofold(-2, -1.1, 0.0, (0.05, 0, 0))
        with pytest.raises(ValueError):
            sc.build_twofold(-2, -1.1, 10.0, (0.05, 0))

    @given(st.floats(-3, 3), st.floats(-3, 3))
    def test_force_coefficient_is_hyperbolicity_factor(self, y2, y3):
        m = reference_twofold()
        y = np.array([0.0, y2, y3, 0.0])

        def balance(lam):
            z = y.copy()
            z[3] = lam
            return m.dh(z) @ m.rhs(0.0, lam, z)

        assert balance(1.0) - balance(0.0) == pytest.approx(y2 + y3, abs=1e-12)

    @pytest.mark.parametrize("y2, y3, expected", [(1.0, 1.0, 0.0), (2.0, 1.0, 1.0 / 3.0), (1.0, -1.0, None), (0.0, 0.0, None), (0.0, 2.0, -1.0)])
    def test_critical_lambda(self, y2, y3, expected):
        got = sc.critical_lambda_twofold(y2, y3)
        if expected is None:
            assert got is None
        else:
            assert got == pytest.approx(expected)

    @given(st.floats(0.01, 3), st.floats(0.01, 3))
    def test_critical_lambda_matches_filippov(self, y2, y3):
        lam = sc.critical_lambda_twofold(y2, y3)
        assert lam == pytest.approx(filippov_sliding_lambda(reference_twofold(), 0.0, np.array([0.0, y2, y3, 0.0])), abs=1e-12)


class TestFastClassification:
    @pytest.mark.parametrize(
        "y2, y3, sigma, l1, kind",
        [(0.5, -1.5, 10, 0.05, sc.FastKind.SADDLE), (1.5, 1.5, 1.0, 0.5, sc.FastKind.NODE), (0.5, 0.5, 10, 0.05, sc.FastKind.FOCUS), (1.5, 1.0, 10, 0.05, sc.FastKind.NODE)],
    )
    def test_examples(self, y2, y3, sigma, l1, kind):
        assert sc.classify_fast_equilibrium(y2, y3, sigma, l1).kind is kind

    @pytest.mark.parametrize("s", [0.0, 2.0, 1e-13, 2.0 + 5e-13])
    def test_degenerate(self, s):
        with pytest.raises(DegenerateClassificationError):
            sc.classify_fast_equilibrium(s / 2, s / 2, 10.0, 0.05)

    def test_precondition(self):
        with pytest.raises(ValueError):
            sc.classify_fast_equilibrium(1.0, 1.0, -1.0, 0.05)

    @given(st.floats(-4, 4).filter(lambda s: abs(s) > 1e-6 and abs(s - 2) > 1e-6), st.floats(-2, 2))
    def test_agrees_with_eigenvalues(self, s, shift):
        cls = sc.classify_fast_equilibrium(s / 2 + shift, s / 2 - shift, 10.0, 0.05)
        ev = np.linalg.eigvals(cls.jacobian)
        assert ev.sum().real == pytest.approx(cls.trace, abs=1e-10)
        assert np.prod(ev).real == pytest.approx(cls.determinant, abs=1e-10)
        assert cls.trace == pytest.approx(-s, abs=1e-12) and cls.determinant == pytest.approx(0.5 * s, abs=1e-12)
        real = np.all(np.abs(ev.imag) < 1e-12)
        if cls.kind is sc.FastKind.SADDLE:
            assert real and ev.real.min() < 0 < ev.real.max()
        elif cls.kind is sc.FastKind.NODE:
            assert real and np.all(ev.real < 0)
        else:
            assert not real and np.all(ev.real < 0)

    def test_boundary_at_two(self):
        below = sc.classify_fast_equilibrium(1.0 - 1e-9, 1.0 - 1e-9, 10.0, 0.05)
        above = sc.classify_fast_equilibrium(1.0 + 1e-9, 1.0 + 1e-9, 10.0, 0.05)
        assert below.kind is sc.FastKind.FOCUS and above.kind is sc.FastKind.NODE


class TestCrossingAngle:
    @pytest.mark.parametrize("phi, expected", [(math.pi / 4, 0.0), (math.pi / 2, 1.0), (0.0, -1.0)])
    def test_values(self, phi, expected):
        assert sc.lambda_crossing_angle(phi) == pytest.approx(expected, abs=1e-15)

    @pytest.mark.parametrize("phi", [3 * math.pi / 4, -math.pi / 4, 7 * math.pi / 4])
    def test_singular(self, phi):
        with pytest.raises(CrossingAngleError):
            sc.lambda_crossing_angle(phi)

    @given(st.floats(0.01, 3.0), st.floats(0.01, 3.0))
    def test_angle_convention(self, y2, y3):
        assert sc.lambda_crossing_angle(math.atan2(y2, y3)) == pytest.approx(sc.critical_lambda_twofold(y2, y3), abs=1e-12)


class TestSlowApproach:
    WEAK_SLOPE = 1.5465  # weak eigendirection y3/y2 of the desingularized flow

    @pytest.mark.parametrize("start", [(2.0, 1.0), (1.0, 2.5), (0.5, 0.6), (3.0, 3.5)])
    def test_force_at_origin(self, start):
        rhs = sc.twofold_slow_rhs(-2.0, -1.1)

        def near(t, y):
            return math.hypot(*y) - 1e-3

        near.terminal = True
        sol = solve_ivp(rhs, (0, 50), start, events=near, rtol=1e-10, atol=1e-13, max_step=0.01)
        assert sol.status == 1
        y_end = sol.y[:, -1]
        lam_end = sc.critical_lambda_twofold(*y_end)
        # observed approach direction: chord of the last stretch of the path
        r = np.hypot(*sol.y)
        i = int(np.argmin(np.abs(r - 1e-2)))
        chord = y_end - sol.y[:, i]
        phi = math.atan2(-chord[0], -chord[1])
        assert lam_end == pytest.approx(sc.lambda_crossing_angle(phi), abs=1e-2)
        weak = (1 - self.WEAK_SLOPE) / (1 + self.WEAK_SLOPE)
        assert lam_end == pytest.approx(weak, abs=1e-2)


class TestTwofoldOscillation:
    @pytest.mark.parametrize("y2, y3, dk", [(1.0, 0.8, 0.05), (0.9, 0.6, -0.05), (0.5, 0.7, 0.1), (0.8, 0.8, 0.05)])
    def test_focus_oscillation_then_exit(self, y2, y3, dk):
        m = reference_twofold()
        lam = sc.critical_lambda_twofold(y2, y3)
        tr = simulate(m, [0.0, y2, y3, lam + dk], "SLIDING", lam, (0.0, 10.0), IntegratorConfig(stop_on_exit=True))
        crit = np.array([sc.critical_lambda_twofold(a, b) for a, b in tr.y[:, 1:3]], dtype=float)
        dev = (tr.lam - crit)[np.isfinite(crit)]
        # a node allows at most one zero of the deviation; a focus gives several
        assert np.count_nonzero(np.diff(np.sign(dev)) != 0) >= 3
        assert abs(tr.lam[-1]) == pytest.approx(1.0, abs=1e-12)


class TestSweep:
    def test_linear_peak_matches_modal_response(self):
        p = sk.StringParams(beta=0.03, gamma_nl=0.0, n_modes=32)
        omegas = [0.97 * math.pi, math.pi, 1.03 * math.pi]
        res = sc.frequency_sweep(p, omegas, amplitude=2.5, model="kappa")
        ref = sc.linear_single_mode_amplitude(p, omegas, 2.5)
        assert np.all(np.abs(res.amplitude / ref - 1) < 0.02)
        assert int(np.argmax(res.amplitude)) == 1

    def test_validation(self):
        p = sk.StringParams()
        with pytest.raises(ValueError):
            sc.frequency_sweep(p, [1.0], direction="sideways")
        with pytest.raises(ValueError):
            sc.frequency_sweep(p, [1.0], model="other")

    def test_no_convergence_raises(self):
        from fwclosure.errors import NoConvergenceError

        p = sk.StringParams(beta=0.001)
        with pytest.raises(NoConvergenceError):
            sc.frequency_sweep(p, [math.pi], max_periods=20)

    def test_sweep_orders_frequencies(self):
        p = sk.StringParams(gamma_nl=2.0)
        res = sc.frequency_sweep(p, [4.0, 3.0], direction="down", max_periods=200)
        assert np.array_equal(res.omega, [3.0, 4.0]) and res.direction == "down"

    def test_hysteresis_at_first_resonance(self):
        p = sk.StringParams(gamma_nl=2.0)
        up, down, bistable = sc.hysteresis_sweep(p, [5.0, 7.0, 8.0, 9.0], workers=2, model="kappa")
        assert bistable[2] and up.amplitude[2] > down.amplitude[2]
