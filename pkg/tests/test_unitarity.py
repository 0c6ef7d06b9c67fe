"""Probability bookkeeping and the reset-recovery renormalization."""
import numpy as np
import pytest

from dipolelab.sde import DipoleParams
from dipolelab.spectral import Green2D, default_grid, spherical_profile
from dipolelab.unitarity import (
    ProbabilitySeries,
    angular_grid,
    modified_density,
    modified_field,
    modify_series,
    probability_series,
    probability_series_from_field,
    radial_panel_grid,
    series_to_csv,
    total_probability,
)


@pytest.fixture(scope="module")
def sph2(params2):
    grid = default_grid(params2, r_max=3.2)

    def field(r, theta, times):
        out = spherical_profile(params2, grid, r, np.atleast_1d(times))
        return out[:, None, :].repeat(len(np.atleast_1d(theta)), axis=1)

    return field


@pytest.fixture(scope="module")
def prob2(sph2, params2):
    rn, rw = radial_panel_grid(0.0, 3.2)
    dt = 2.0 ** -12
    times = dt * np.arange(1, 129)
    return probability_series(sph2, times, params2, rn, rw)


class TestTotalProbability:
    def test_exact_solution_is_conservative(self, params2):
        from dipolelab.spectral import exact_solution_field

        rn, rw = radial_panel_grid(0.0, 6.0, panel=0.02)
        for t in (0.3, 0.7, 1.0):
            n = total_probability(exact_solution_field(params2), t, params2, rn, rw)
            assert n == pytest.approx(1.0, abs=1e-4)

    def test_d3_decays_fast(self, params3):
        grid = default_grid(params3, r_max=2.8)

        def field(r, theta, times):
            out = spherical_profile(params3, grid, r, np.atleast_1d(times))
            return out[:, None, :]

        rn, rw = radial_panel_grid(0.0, 2.8)
        assert total_probability(field, 1.0, params3, rn, rw) < 0.1

    def test_d2_slower_than_d3(self, params2, params3):
        g2 = default_grid(params2, r_max=3.4)
        g3 = default_grid(params3, r_max=2.8)
        rn2, rw2 = radial_panel_grid(0.0, 3.4)
        rn3, rw3 = radial_panel_grid(0.0, 2.8)
        for t in (2.0 ** -7, 2.0 ** -5, 2.0 ** -3, 0.25):
            n2 = (rw2 * rn2) @ spherical_profile(params2, g2, rn2, np.array([t]))[:, 0]
            n3 = (rw3 * rn3 ** 2) @ spherical_profile(params3, g3, rn3, np.array([t]))[:, 0]
            assert n2 > n3


class TestProbabilitySeries:
    def test_anchored_at_unity(self, prob2):
        assert prob2.times[0] == 0.0 and prob2.N[0] == 1.0

    def test_decay_window_2d(self, prob2):
        # decay concentrated beyond t ~ 2^-7: nearly flat before
        early = prob2.N[(prob2.times > 0) & (prob2.times <= 2.0 ** -8)]
        assert np.all(early > 0.995)
        assert prob2.N[-1] < 0.95

    def test_ndot_integral_identity(self, prob2):
        total = np.trapezoid(prob2.Ndot, prob2.times)
        assert total == pytest.approx(prob2.N[-1] - prob2.N[0], abs=1e-6)

    def test_validation(self):
        with pytest.raises(ValueError):
            ProbabilitySeries(np.array([0.0, 1.0]), np.array([1.0, 1.5]),
                              np.array([0.0, 0.0]))
        with pytest.raises(ValueError):
            ProbabilitySeries(np.array([0.0, 0.0]), np.array([1.0, 1.0]),
                              np.array([0.0, 0.0]))

    def test_flux_formula_sanity(self, params2):
        # boundary-flux reading of Ndot at a safe small radius agrees with the
        # finite-difference derivative of the mass above that radius
        grid = default_grid(params2, r_max=3.2)
        r_c = 0.18
        t = np.array([2.0 ** -5])
        h = 1e-3
        pr = spherical_profile(params2, grid, np.array([r_c - h, r_c + h]), t)[:, 0]
        flux = -0.5 * params2.h * (params2.D - 1) ** 2 * r_c ** (-params2.D - 1) * \
            (pr[1] - pr[0]) / (2 * h)
        rn, rw = radial_panel_grid(r_c, 3.2)
        dtt = 1e-4
        masses = [(rw * rn) @ spherical_profile(params2, grid, rn, np.array([tv]))[:, 0]
                  for tv in (t[0] - dtt, t[0] + dtt)]
        ndot_fd = (masses[1] - masses[0]) / (2 * dtt)
        assert flux == pytest.approx(ndot_fd, rel=0.2)


class TestModifySeries:
    def test_conservative_input_unchanged(self):
        times = np.linspace(0.0, 1.0, 65)
        prob = ProbabilitySeries(times, np.ones_like(times), np.zeros_like(times))
        vals = np.sin(1.0 + times)
        for order in (1, 2, "exact"):
            assert np.allclose(modify_series(vals, prob, order), vals, atol=1e-14)

    def test_exact_solve_restores_unity(self, prob2):
        n_til = modify_series(prob2.N, prob2, "exact")
        assert np.max(np.abs(n_til - 1.0)) < 0.02

    def test_truncated_restores_unity_2d(self, prob2):
        n_til = modify_series(prob2.N, prob2, 2)
        sel = prob2.times <= 2.0 ** -5
        assert np.max(np.abs(n_til[sel] - 1.0)) < 0.05

    def test_monotone_repair(self, prob2):
        n_til = modify_series(prob2.N, prob2, 2)
        assert np.all(n_til >= prob2.N - 1e-12)
        late = prob2.N < 0.99
        assert np.all(n_til[late] > prob2.N[late])

    def test_neumann_consistency(self, prob2):
        # substituting the order-2 solution into the renewal right side
        # reproduces it within 1.5x the third-order term estimate
        p2 = modify_series(prob2.N, prob2, 2)
        dt = prob2.dt
        rhs = np.empty_like(p2)
        rhs[0] = prob2.N[0]
        for i in range(1, len(p2)):
            w = np.ones(i + 1)
            w[0] = 0.5
            w[i] = 0.5
            rhs[i] = prob2.N[i] - dt * np.sum(w * prob2.Ndot[: i + 1] * p2[i::-1])
        p1 = modify_series(prob2.N, prob2, 1)
        third = np.max(np.abs(p2 - p1)) * np.max(np.abs(1.0 - prob2.N))
        assert np.max(np.abs(rhs - p2)) < max(1.5 * third, 1e-6)

    def test_second_vs_first_order_small_2d(self, prob2):
        p1 = modify_series(prob2.N, prob2, 1)
        p2 = modify_series(prob2.N, prob2, 2)
        sel = (prob2.times > 0) & (prob2.times <= 2.0 ** -5)
        first_corr = np.max(np.abs(p1 - prob2.N)[sel])
        assert np.max(np.abs(p2 - p1)[sel]) < 0.05 * first_corr


class TestModifiedDensity:
    @pytest.fixture(scope="class")
    def green_and_prob(self, params2):
        grid = default_grid(params2, r_max=3.2)
        green = Green2D(params2, grid, n_max=12)
        rn, rw = radial_panel_grid(0.0, 3.2)
        th, tw = angular_grid(2, 64)
        dt = 2.0 ** -12
        times = dt * np.arange(1, 129)
        prob = probability_series(green.field, times, params2, rn, rw, th, tw)
        return green, prob, (rn, rw, th, tw)

    def test_pointwise_matches_field_grid(self, green_and_prob, params2):
        green, prob, _ = green_and_prob
        t = prob.times[96]
        _, mod = modified_field(green.field, prob, [1.1], [0.4])
        assert modified_density(green.field, prob, t, (1.1, 0.4)) == pytest.approx(
            float(mod[0, 0, 96]), rel=1e-12)

    def test_mass_restored(self, green_and_prob, params2):
        green, prob, (rn, rw, th, tw) = green_and_prob
        _, mod = modified_field(green.field, prob, rn, th)
        wr = rw * rn
        sel = (prob.times > 0) & (prob.times <= 2.0 ** -5)
        masses = np.einsum("i,ijt,j->t", wr, mod, tw)[sel]
        assert np.max(np.abs(masses - 1.0)) < 0.02

    def test_sharp_peak_survives(self, green_and_prob):
        green, prob, _ = green_and_prob
        i = len(prob.times) - 1
        t = prob.times[i]
        peak_mod = modified_density(green.field, prob, t, (1.0, 0.0))
        away_mod = modified_density(green.field, prob, t, (1.6, 1.3))
        assert peak_mod > 5 * away_mod

    def test_positivity_band(self, green_and_prob):
        green, prob, (rn, rw, th, tw) = green_and_prob
        r = np.linspace(0.5, 2.0, 30)
        thc = np.linspace(-2.5, 2.5, 21)
        _, mod = modified_field(green.field, prob, r, thc)
        sel = prob.times >= 2.0 ** -7
        window = mod[:, :, sel]
        assert window.min() > -1e-3 * window.max()

    def test_range_error(self, green_and_prob):
        green, prob, _ = green_and_prob
        with pytest.raises(ValueError):
            modified_density(green.field, prob, prob.times[-1] + 1.0, (1.0, 0.0))


class TestCsv:
    def test_schema(self, prob2, tmp_path):
        path = tmp_path / "n.csv"
        series_to_csv(prob2, path, {"D": 2})
        lines = path.read_text().splitlines()
        assert lines[0] == "t,N,Ndot"
        assert len(lines) == len(prob2.times) + 1
        assert (tmp_path / "n.csv.meta").exists()
