"""Spectral route: orders, eigenfunctions, Green's functions, epsilon cutoff,
residual checker.  Closed-form oracle: the untruncated mode kernel equals
exp(-(z-z0)^2/(2ht)) I_nu(z z0/(ht))/(ht) (scipy.special.ive, independent of
the package's Bessel machinery)."""
import math

import numpy as np
import pytest
from scipy import special as sp

from dipolelab.sde import DipoleParams
from dipolelab.special import build_k_grid
from dipolelab.spectral import (
    AngularMode,
    EpsilonGreen,
    Green2D,
    Green3D,
    SingularModeError,
    boundary_exponent,
    default_grid,
    epsilon_cutoff_ratio,
    exact_solution_field,
    fp_residual,
    green_2d,
    green_spherical,
    op_exact_solution,
    order_nu,
    radial_eigenfunction,
    reflecting_ratio,
    rescale_time,
    solution_from_initial,
    spherical_order,
    spherical_profile,
    zeta,
)
from dipolelab.unitarity import angular_grid, radial_panel_grid


@pytest.fixture(scope="module")
def grid2(params2):
    return default_grid(params2, r_max=3.2)


@pytest.fixture(scope="module")
def grid3(params3):
    return default_grid(params3, r_max=2.8)


class TestOrders:
    def test_spherically_symmetric_values(self):
        assert order_nu(2, 0.0) == pytest.approx(2.0 / 3.0, abs=1e-14)
        assert order_nu(3, 0.0) == pytest.approx(5.0 / 8.0, abs=1e-14)
        assert spherical_order(2) == pytest.approx(2.0 / 3.0, abs=1e-15)

    def test_first_angular_mode_2d(self):
        assert order_nu(2, 1.0) == pytest.approx(math.sqrt(5.0) / 3.0, abs=1e-14)

    def test_l_formula_3d(self):
        for l in range(6):
            assert order_nu(3, l * (l + 1)) == pytest.approx(
                math.sqrt(l * l + l + 25.0) / 8.0, abs=1e-14)

    def test_mode_factory(self):
        m = AngularMode.make(2, 3)
        assert m.b_sq == 9.0 and m.nu == order_nu(2, 9.0)


class TestRadialEigenfunction:
    def test_zero_at_origin(self):
        assert radial_eigenfunction(2, 2 / 3, 3.0, 0.0) == 0.0

    def test_unit_argument(self):
        # D=2, k=3, r=1: zeta = 1 so the value is J_{2/3}(1)
        from dipolelab.special import bessel_j

        assert radial_eigenfunction(2, 2 / 3, 3.0, 1.0) == pytest.approx(
            bessel_j(2 / 3, 1.0), abs=1e-14)

    def test_small_r_power_law(self):
        # r^{1 + D/2 + sqrt((b/(D-1))^2 + (1+D/2)^2)} near the origin
        D, b_sq, k = 2, 4.0, 2.0
        nu = order_nu(D, b_sq)
        expect = 1 + D / 2 + math.sqrt(b_sq / (D - 1) ** 2 + (1 + D / 2) ** 2)
        r1, r2 = 1e-3, 2e-3
        ratio = radial_eigenfunction(D, nu, k, r2) / radial_eigenfunction(D, nu, k, r1)
        assert math.log(ratio) / math.log(r2 / r1) == pytest.approx(expect, rel=1e-5)

    def test_boundary_exponent_dichotomy(self):
        for D in (2, 3):
            assert boundary_exponent(D, 0.0) == pytest.approx(0.0, abs=1e-14)
            for b_sq in (1.0, 2.0, 9.0):
                assert boundary_exponent(D, b_sq) > 0.0


class TestGreenSpherical:
    @pytest.mark.parametrize("D", [2, 3])
    def test_matches_heat_kernel_closed_form(self, D, params2, params3, grid2, grid3):
        params = params2 if D == 2 else params3
        grid = grid2 if D == 2 else grid3
        r = np.linspace(0.4, 2.3, 30)
        t = np.array([2.0 ** -7, 2.0 ** -5])
        prof = spherical_profile(params, grid, r, t)
        z0 = zeta(1.0, D)
        zr = zeta(r, D)[:, None]
        nu = spherical_order(D)
        exact = (r ** (1 + D / 2) / ((D - 1) ** 2 * (D + 1)))[:, None] * \
            np.exp(-(zr - z0) ** 2 / (2 * t[None, :])) * sp.ive(nu, zr * z0 / t[None, :]) / t
        assert np.max(np.abs(prof - exact)) < 3e-4 * np.max(exact)

    def test_sharp_profile_peaks_at_one(self, params2, grid2):
        r = np.linspace(0.5, 1.8, 300)
        prof = spherical_profile(params2, grid2, r, np.array([2.0 ** -9]))[:, 0]
        assert 0.9 <= r[np.argmax(prof)] <= 1.1

    def test_unit_mass_at_small_t(self, params2, params3):
        # resolving t = 2^-12 needs k_max ~ 2/sqrt(h t); use 200
        for params, rmx in ((params2, 2.0), (params3, 1.8)):
            D = params.D
            rate = float(zeta(rmx, D) + zeta(1.0, D))
            grid = build_k_grid(200.0, rate)
            rn, rw = radial_panel_grid(0.0, rmx, panel=0.01)
            mass = (rw * rn ** (D - 1)) @ spherical_profile(params, grid, rn,
                                                            np.array([2.0 ** -12]))[:, 0]
            assert mass == pytest.approx(1.0, abs=0.02)

    def test_probability_gone_by_t_one(self, params3, grid3):
        rn, rw = radial_panel_grid(0.0, 2.8)
        mass = (rw * rn ** 2) @ spherical_profile(params3, grid3, rn, np.array([1.0]))[:, 0]
        assert mass < 0.1

    def test_positivity_relative_band(self, params2, params3, grid2, grid3):
        # truncation ringing undershoots; bounded by 5e-4 of the peak
        r = np.linspace(0.3, 2.5, 200)
        t = np.array([2.0 ** -8, 2.0 ** -6, 2.0 ** -4])
        for params, grid in ((params2, grid2), (params3, grid3)):
            prof = spherical_profile(params, grid, r, t)
            assert prof.min() > -5e-4 * prof.max()

    def test_convergence_gate_rejects_tiny_t(self, params2, grid2):
        from dipolelab.spectral import ConvergenceError

        with pytest.raises(ConvergenceError):
            green_spherical(params2, 1.0, 2.0 ** -14, grid2, check_convergence=True)

    def test_scaling_identity(self, params2):
        # G_{r0}(r, t) = gamma^{-D} G_1(r/gamma, t/gamma^{2D+2}), gamma = r0 = 2
        gamma = 2.0
        rate = float(zeta(3.5, 2) + zeta(2.0, 2))
        grid_l = build_k_grid(60.0, rate)
        grid_s = default_grid(params2, r_max=2.0)
        r = np.linspace(1.0, 3.5, 25)
        t = 0.5
        lhs = spherical_profile(params2, grid_l, r, np.array([t]), r0=2.0)[:, 0]
        rhs = gamma ** -2 * spherical_profile(
            params2, grid_s, r / gamma, np.array([t / gamma ** 6]))[:, 0]
        assert np.max(np.abs(lhs - rhs)) < 1e-4

    def test_rescale_time(self):
        assert rescale_time(1.0, 0.37, 2) == 0.37
        assert rescale_time(2.0, 1.0, 2) == 64.0


class TestAngularGreens:
    def test_theta_symmetry_exact(self, params2, grid2):
        g = Green2D(params2, grid2, n_max=16)
        a = g.field([1.1], [0.7], [2.0 ** -6])
        b = g.field([1.1], [-0.7], [2.0 ** -6])
        assert a == pytest.approx(b, abs=0.0)

    def test_concentration_near_start(self, params2, grid2):
        g = Green2D(params2, grid2, n_max=50)
        r = np.linspace(0.5, 2.0, 60)
        th = np.linspace(-np.pi, np.pi, 61)
        f = g.field(r, th, [2.0 ** -8])[:, :, 0]
        i, j = np.unravel_index(np.argmax(f), f.shape)
        assert abs(r[i] - 1.0) < 0.1 and abs(th[j]) < 0.1

    def test_angular_average_equals_spherical(self, params2, grid2):
        g = Green2D(params2, grid2, n_max=12)
        rn, rw = radial_panel_grid(0.0, 2.5)
        th, tw = angular_grid(2, 64)
        f = g.field(rn, th, [2.0 ** -7])[:, :, 0] @ tw
        prof = spherical_profile(params2, grid2, rn, np.array([2.0 ** -7]))[:, 0]
        assert np.max(np.abs(f - prof)) < 1e-10

    def test_l0_term_is_spherical(self, params3, grid3):
        g = Green3D(params3, grid3, l_max=1)
        th, tw = angular_grid(3, 32)
        rn = np.linspace(0.5, 2.0, 20)
        f = g.field(rn, th, [2.0 ** -6])[:, :, 0] @ tw
        prof = spherical_profile(params3, grid3, rn, np.array([2.0 ** -6]))[:, 0]
        assert np.max(np.abs(f - prof)) < 1e-10

    def test_initial_amplitude_legendre_weights(self, params3, grid3):
        # Y_l0(0) amplitudes make the angular weights (2l+1) P_l(cos theta)
        g = Green3D(params3, grid3, l_max=6)
        w = g._angular_weights(np.array([0.0]))
        assert np.allclose(w[:, 0], 2 * np.arange(7) + 1.0)

    def test_radial_marginal_peak_3d(self, params3, grid3):
        g = Green3D(params3, grid3, l_max=50)
        th, tw = angular_grid(3, 48)
        r = np.linspace(0.5, 1.8, 200)
        marg = g.field(r, th, [2.0 ** -9])[:, :, 0] @ tw
        assert 0.9 <= r[np.argmax(marg)] <= 1.1

    def test_angular_spread_exceeds_radial(self, params2, grid2):
        # anisotropy: angular variance grows faster than radial at t = 2^-6
        from dipolelab.fractal import moments, variations

        g = Green2D(params2, grid2, n_max=24)
        rn, rw = radial_panel_grid(0.0, 2.5)
        th, tw = angular_grid(2, 128)
        m1 = moments(g.field, 2.0 ** -8, params2, rn, rw, th, tw)
        m2 = moments(g.field, 2.0 ** -6, params2, rn, rw, th, tw)
        dr_a, dth_a, _ = variations(m1)
        dr_b, dth_b, _ = variations(m2)
        assert dth_b / dth_a > dr_b / dr_a

    def test_mode_truncation_convergence(self, params2, params3, grid2, grid3):
        r = np.linspace(0.5, 2.2, 40)
        th2 = np.linspace(-np.pi, np.pi, 41)
        a = Green2D(params2, grid2, 50).field(r, th2, [2.0 ** -7])
        b = Green2D(params2, grid2, 60).field(r, th2, [2.0 ** -7])
        assert np.max(np.abs(b - a)) < 1e-3 * np.max(np.abs(a))
        th3 = np.linspace(0.05, np.pi - 0.05, 40)
        c = Green3D(params3, grid3, 50).field(r, th3, [2.0 ** -6])
        d = Green3D(params3, grid3, 60).field(r, th3, [2.0 ** -6])
        assert np.max(np.abs(d - c)) < 1e-3 * np.max(np.abs(c))

    def test_mode_sum_gate(self, params2, grid2):
        # the convergence probe runs without tripping at a resolved time
        val = green_2d(1.1, 0.3, 2.0 ** -6, params2, grid2, n_max=40,
                       check_convergence=True)
        assert np.isfinite(val)


class TestSpectralField:
    def _bump_2d(self, r, theta, r0=1.0, sr=0.02, sth=0.04):
        gr = np.exp(-0.5 * ((r - r0) / sr) ** 2)
        gr /= np.trapezoid(gr * r, r)
        gth = np.exp(-0.5 * (theta / sth) ** 2)
        gth /= np.trapezoid(gth, theta) / (2 * np.pi)
        return gr[:, None] * gth[None, :]

    def test_delta_limit_recovers_paper_coefficients(self, params2):
        # rho_n(k) -> (k/3)^{1/3} J_{nu_n}(k/3) as the bump sharpens
        from dipolelab.special import bessel_j

        grid = build_k_grid(20.0, 5.0, min_nodes=512)
        r = np.linspace(0.8, 1.2, 600)
        th = -np.pi + 2 * np.pi * np.arange(256) / 256
        p0 = self._bump_2d(r, th)
        fld = solution_from_initial(r, th, p0, params2, grid, mode_max=3)
        k = grid.nodes
        for n in (0, 1, 2):
            expect = (k / 3.0) ** (1 / 3) * bessel_j(order_nu(2, n * n), k / 3.0)
            got = np.real(fld.rho[n])
            sel = k < 8.0     # below the bump's smearing scale
            assert np.max(np.abs(got[sel] - expect[sel])) < 0.02 * np.max(np.abs(expect[sel]))

    def test_spherically_symmetric_kills_angular_modes(self, params2):
        grid = build_k_grid(20.0, 5.0, min_nodes=512)
        r = np.linspace(0.6, 1.6, 400)
        th = -np.pi + 2 * np.pi * np.arange(128) / 128
        gr = np.exp(-0.5 * ((r - 1.0) / 0.05) ** 2)
        gr /= np.trapezoid(gr * r, r)
        p0 = np.repeat(gr[:, None], len(th), axis=1)
        fld = solution_from_initial(r, th, p0, params2, grid, mode_max=4)
        amp0 = np.max(np.abs(fld.rho[0]))
        for n in range(1, 5):
            assert np.max(np.abs(fld.rho[n])) < 1e-10 * amp0

    def test_semigroup(self, params2):
        # evolving the t1 field to t2 matches the Green's function at t1 + t2
        grid = default_grid(params2, r_max=2.6, min_nodes=1024)
        green = Green2D(params2, grid, n_max=10)
        t1 = t2 = 2.0 ** -6
        r = np.linspace(1e-3, 2.6, 700)
        th = -np.pi + 2 * np.pi * np.arange(128) / 128
        p1 = green.field(r, th, [t1])[:, :, 0]
        fld = solution_from_initial(r, th, p1, params2, grid, mode_max=10)
        r_c = np.linspace(0.6, 1.6, 9)
        th_c = np.linspace(-1.2, 1.2, 7)
        evolved = fld.field(r_c, th_c, [t2])[:, :, 0]
        direct = green.field(r_c, th_c, [t1 + t2])[:, :, 0]
        assert np.max(np.abs(evolved - direct)) < 1e-3 * np.max(np.abs(direct))

    def test_initial_moment_match(self, params2):
        grid = build_k_grid(30.0, 6.0, min_nodes=1024)
        r = np.linspace(0.5, 1.7, 500)
        th = -np.pi + 2 * np.pi * np.arange(128) / 128
        p0 = self._bump_2d(r, th, sr=0.05, sth=0.1)
        fld = solution_from_initial(r, th, p0, params2, grid, mode_max=6)
        rn, rw = radial_panel_grid(0.4, 1.8, panel=0.02)
        tn, tw = angular_grid(2, 128)
        vals = fld.field(rn, tn, [1e-4])[:, :, 0]
        wr = rw * rn
        m0 = wr @ vals @ tw
        m1 = (wr * rn) @ vals @ tw / m0
        mc = (wr * rn) @ vals @ (tw * np.cos(tn)) / m0
        # the bump was normalized with unit moments at (r, theta) = (1, 0)
        assert m0 == pytest.approx(1.0, abs=0.01)
        assert m1 == pytest.approx(1.0, abs=0.01)
        assert mc == pytest.approx(1.0, abs=0.02)


class TestExactSolution:
    @pytest.mark.parametrize("D", [2, 3])
    def test_unit_mass_all_times(self, D):
        params = DipoleParams(D, 1.0, 1.0)
        rn, rw = radial_panel_grid(0.0, 6.0, panel=0.02)
        for t in (0.25, 0.5, 1.0):
            mass = (rw * rn ** (D - 1)) @ op_exact_solution(params, rn, t)
            assert mass == pytest.approx(1.0, abs=1e-4)

    @pytest.mark.parametrize("D", [2, 3])
    def test_fp_residual_small(self, D):
        params = DipoleParams(D, 1.0, 1.0)
        res = fp_residual(exact_solution_field(params), params,
                          np.linspace(0.5, 1.8, 8), None, np.linspace(0.3, 1.0, 5),
                          dr=3e-4, dt_rel=3e-4)
        assert res < 1e-5

    def test_monotone_in_r(self, params3):
        r = np.linspace(0.01, 3.0, 200)
        v = op_exact_solution(params3, r, 0.5)
        assert np.all(np.diff(v) <= 0)


class TestFpResidual:
    def test_green_spherical(self, params2, grid2):
        def field(r, theta, times):
            out = spherical_profile(params2, grid2, r, times)
            return out[:, None, :].repeat(len(np.atleast_1d(theta)), axis=1)

        res = fp_residual(field, params2, np.linspace(0.6, 1.8, 7), None,
                          np.array([2.0 ** -7, 2.0 ** -6, 2.0 ** -5]))
        assert res < 1e-3

    def test_negative_control_not_vacuous(self, params2, grid2):
        frozen = spherical_profile(params2, grid2, np.linspace(0.55, 1.9, 32),
                                   np.array([2.0 ** -6]))[:, 0]

        def static_field(r, theta, times):
            vals = np.interp(r, np.linspace(0.55, 1.9, 32), frozen)
            return np.repeat(np.repeat(vals[:, None], len(np.atleast_1d(theta)), 1)
                             [:, :, None], len(np.atleast_1d(times)), axis=2)

        res = fp_residual(static_field, params2, np.linspace(0.8, 1.4, 5), None,
                          np.array([0.01, 0.02]))
        assert res > 1.0     # dP/dt = 0 but the spatial operator is not


class TestEpsilonCutoff:
    def test_singular_modes_raise(self):
        with pytest.raises(SingularModeError):
            epsilon_cutoff_ratio(2, AngularMode.make(2, 0), 1.0, 0.5)
        with pytest.raises(SingularModeError):
            epsilon_cutoff_ratio(3, AngularMode.make(3, 0), 1.0, 0.5)

    def test_leading_coefficient_matches_shooting_oracle(self):
        # reflecting-boundary shooting oracle built from scipy Bessel functions
        D, n, eps = 2, 1, 0.5
        mode = AngularMode.make(D, n)
        for k in (0.5, 1.0, 2.0):
            x = k * eps ** (D + 1) / (D * D - 1)
            num = (1 + D / 2) * sp.jv(mode.nu, x) + (D + 1) * x * sp.jvp(mode.nu, x)
            den = (1 + D / 2) * sp.jv(-mode.nu, x) + (D + 1) * x * sp.jvp(-mode.nu, x)
            shooting = -num / den
            lead = epsilon_cutoff_ratio(D, mode, k, eps)
            # leading order differs from the exact ratio by O(x^2)
            assert lead == pytest.approx(shooting, rel=5e-3 + 5 * x * x)

    def test_3d_leading_coefficient(self):
        D, l, eps = 3, 1, 0.3
        mode = AngularMode.make(D, l)
        k = 0.5
        x = k * eps ** (D + 1) / (D * D - 1)
        num = (1 + D / 2) * sp.jv(mode.nu, x) + (D + 1) * x * sp.jvp(mode.nu, x)
        den = (1 + D / 2) * sp.jv(-mode.nu, x) + (D + 1) * x * sp.jvp(-mode.nu, x)
        assert epsilon_cutoff_ratio(D, mode, k, eps) == pytest.approx(
            -num / den, rel=1e-3 + 5 * x * x)

    def test_exact_ratio_matches_scipy_route(self, params2):
        k = np.array([0.5, 3.0, 20.0, 55.0])
        eps = 0.5
        nu = order_nu(2, 1.0)
        mine = reflecting_ratio(2, nu, k, eps)
        x = k * zeta(eps, 2)
        num = 2.0 * sp.jv(nu, x) + 3.0 * x * sp.jvp(nu, x)
        den = 2.0 * sp.jv(-nu, x) + 3.0 * x * sp.jvp(-nu, x)
        assert np.allclose(mine, -num / den, rtol=1e-9)

    def test_reflecting_flux_vanishes(self):
        # r^{-D-1} d/dr of the mixed radial mode vanishes at r = eps
        D, eps = 2, 0.5
        for n in (0, 1, 3):
            nu = order_nu(D, float(n * n))
            for k in (2.0, 10.0, 40.0):
                rho = float(reflecting_ratio(D, nu, np.array([k]), eps)[0])

                def mode_fn(r):
                    r = np.asarray(r, float)
                    x = k * zeta(r, D)
                    return r ** (1 + D / 2) * (sp.jv(nu, x) + rho * sp.jv(-nu, x))

                h = 1e-6
                flux = (mode_fn(eps + h) - mode_fn(eps - h)) / (2 * h) * eps ** (-D - 1)
                scale = max(1.0, abs(mode_fn(eps)))
                assert abs(flux) < 1e-6 * scale * k     # FD noise grows with k

    def test_epsilon_to_zero_recovers_free_green(self, params2, grid2):
        val_free = green_2d(1.2, 0.4, 2.0 ** -6, params2, grid2, n_max=12)
        graded = default_grid(params2, r_max=3.2, graded_origin=True)
        g_eps = EpsilonGreen(params2, graded, 12, epsilon=1e-3)
        assert g_eps.value(1.2, 0.4, 2.0 ** -6) == pytest.approx(val_free, abs=1e-3)

    def test_reflecting_wall_conserves_probability(self, params2):
        graded = default_grid(params2, r_max=3.2, graded_origin=True)
        g = EpsilonGreen(params2, graded, 12, epsilon=0.5)
        rn, rw = radial_panel_grid(0.5, 3.2)
        th, tw = angular_grid(2, 64)
        for t in (2.0 ** -8, 2.0 ** -5):
            mass = (rw * rn) @ g.field(rn, th, [t])[:, :, 0] @ tw
            assert mass == pytest.approx(1.0, abs=5e-3)

    def test_initial_condition_clean(self, params3):
        graded = default_grid(params3, r_max=2.6, graded_origin=True)
        g = EpsilonGreen(params3, graded, 8, epsilon=0.5)
        rn, rw = radial_panel_grid(0.5, 2.6)
        th, tw = angular_grid(3, 48)
        vals = g.field(rn, th, [2.0 ** -12])[:, :, 0]
        wr = rw * rn ** 2
        m0 = wr @ vals @ tw
        m1 = (wr * rn) @ vals @ tw / m0
        assert m0 == pytest.approx(1.0, abs=0.01)
        assert m1 == pytest.approx(1.0, abs=0.02)

    def test_exclude_policy_recorded(self, params2, grid2):
        g = EpsilonGreen(params2, grid2, 6, epsilon=0.5, sym_policy="exclude")
        assert g.metadata["excluded_modes"] == [0]
