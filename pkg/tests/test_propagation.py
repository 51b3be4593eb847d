import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from bayesbss.propagation import (BallPrior, coupling_lower_bound, compare_histogram, distance_prior_pdf, l1_tolerance,
                                  mixing_element_prior_cdf, mixing_element_prior_const, mixing_element_prior_pdf,
                                  mixing_element_prior_ppf, monte_carlo_mixing_samples, rescale_distance_prior,
                                  sample_ball)


class TestDistancePrior:
    @pytest.mark.parametrize("R", [0.01, 1.0, 2.5, 300.0])
    def test_boundary_value(self, R):
        assert distance_prior_pdf(R, R) == pytest.approx(3.0 / R, rel=1e-15)

    def test_vanishes_at_origin(self):
        assert distance_prior_pdf(0.0, 1.0) == 0.0

    @pytest.mark.parametrize("R", [1e-3, 1.0, 7.0, 1e3])
    def test_normalizes(self, R):
        total, _ = integrate.quad(distance_prior_pdf, 0.0, R, args=(R,), epsabs=1e-13, epsrel=1e-13)
        assert total == pytest.approx(1.0, abs=1e-10)

    def test_shell_normalizes(self):
        total, _ = integrate.quad(distance_prior_pdf, 0.3, 2.0, args=(2.0, 0.3), epsabs=1e-13, epsrel=1e-13)
        assert total == pytest.approx(1.0, abs=1e-10)

    def test_zero_beyond_radius(self):
        assert distance_prior_pdf(1.5, 1.0) == 0.0

    def test_negative_distance_rejected(self):
        with pytest.raises(ValueError):
            distance_prior_pdf(-0.1, 1.0)

    def test_bad_radius(self):
        with pytest.raises(ValueError):
            distance_prior_pdf(0.5, 0.0)


class TestCouplingPrior:
    def test_zero_just_below_support(self):
        a0 = coupling_lower_bound(1.0)
        assert mixing_element_prior_pdf(a0 * (1 - 1e-12), 1.0) == 0.0
        assert mixing_element_prior_pdf(a0, 1.0) > 0

    @pytest.mark.parametrize("a", [0.0, -1.0])
    def test_nonpositive_outside_support(self, a):
        assert mixing_element_prior_pdf(a, 1.0) == 0.0

    @pytest.mark.parametrize("R", [1e-3, 0.5, 1.0, 2.5, 1e3])
    def test_normalizes(self, R):
        a0 = coupling_lower_bound(R)
        # substitute a = a0 / u**2 to map [a0, inf) onto (0, 1]; the integrand becomes smooth
        f = lambda u: mixing_element_prior_pdf(a0 / u**2, R) * 2 * a0 / u**3
        total, _ = integrate.quad(f, 0.0, 1.0, epsabs=1e-13, epsrel=1e-13)
        assert total == pytest.approx(1.0, abs=1e-8)

    def test_normalizes_direct_quadrature(self):
        a0 = coupling_lower_bound(1.0)
        total, _ = integrate.quad(mixing_element_prior_pdf, a0, np.inf, args=(1.0,), limit=500)
        assert total == pytest.approx(1.0, abs=1e-8)

    def test_analytic_integral_is_exactly_one(self):
        for R in (0.1, 1.0, 9.0):
            c = mixing_element_prior_const(R)
            assert c * (2 / 3) * coupling_lower_bound(R) ** -1.5 == pytest.approx(1.0, abs=1e-14)

    def test_change_of_variables_oracle(self):
        # p(a) = p_r(r(a)) |dr/da| with r(a) = (4 pi a)^(-1/2)
        R = 1.7
        a = np.geomspace(coupling_lower_bound(R) * 1.001, 100.0, 50)
        r = (4 * np.pi * a) ** -0.5
        dr_da = 0.5 * (4 * np.pi) ** -0.5 * a**-1.5
        np.testing.assert_allclose(mixing_element_prior_pdf(a, R), distance_prior_pdf(r, R) * dr_da, rtol=1e-12)

    def test_cdf_from_distance_oracle(self):
        # P(A <= a) = P(r >= r(a)) = 1 - (r(a)/R)^3
        R = 2.0
        a = np.geomspace(coupling_lower_bound(R), 50.0, 30)
        r = (4 * np.pi * a) ** -0.5
        np.testing.assert_allclose(mixing_element_prior_cdf(a, R), 1 - (r / R) ** 3, atol=1e-14)

    def test_ppf_inverts_cdf(self):
        p = np.linspace(0, 0.999, 50)
        np.testing.assert_allclose(mixing_element_prior_cdf(mixing_element_prior_ppf(p, 1.3), 1.3), p, atol=1e-12)

    def test_ppf_top(self):
        assert mixing_element_prior_ppf(1.0, 1.0) == np.inf
        assert mixing_element_prior_ppf(1.0, 1.0, r_min=0.1) == pytest.approx(1 / (4 * np.pi * 0.01))

    def test_shell_caps_coupling(self):
        R, r_min = 1.0, 0.2
        a_hi = BallPrior(R, r_min).a_max
        assert mixing_element_prior_pdf(a_hi * 1.01, R, r_min) == 0.0
        total, _ = integrate.quad(mixing_element_prior_pdf, coupling_lower_bound(R), a_hi, args=(R, r_min), limit=200)
        assert total == pytest.approx(1.0, abs=1e-8)


class TestMonteCarlo:
    def test_samples_respect_lower_bound(self):
        a = monte_carlo_mixing_samples(1.0, 100_000, seed=1)
        assert np.all(a >= coupling_lower_bound(1.0))

    def test_ball_samples_inside(self):
        pts = sample_ball(2.0, 10_000, seed=3)
        assert np.all(np.linalg.norm(pts, axis=1) <= 2.0)

    def test_ball_is_uniform_in_radius(self):
        r = np.linalg.norm(sample_ball(1.0, 200_000, seed=5), axis=1)
        # P(r <= 1/2) = 1/8 for a uniform ball
        assert np.mean(r <= 0.5) == pytest.approx(1 / 8, abs=4 * np.sqrt(0.125 * 0.875 / 200_000))

    def test_empirical_cdf_at_median(self):
        n = 200_000
        a = monte_carlo_mixing_samples(1.0, n, seed=9)
        med = mixing_element_prior_ppf(0.5, 1.0)
        assert abs(np.mean(a <= med) - 0.5) < 3 / np.sqrt(n)

    def test_doubling_radius_quarters_samples(self):
        a1 = monte_carlo_mixing_samples(1.0, 50_000, seed=4)
        a2 = monte_carlo_mixing_samples(2.0, 50_000, seed=4)
        q = [0.1, 0.25, 0.5, 0.75, 0.9]
        np.testing.assert_allclose(np.quantile(a2, q) / np.quantile(a1, q), 0.25, rtol=1e-12)

    def test_doubling_radius_quarters_in_distribution(self):
        a1 = monte_carlo_mixing_samples(1.0, 200_000, seed=4)
        a2 = monte_carlo_mixing_samples(2.0, 200_000, seed=5)
        q = np.array([0.1, 0.25, 0.5, 0.75, 0.9])
        assert np.all(np.abs(np.quantile(a2, q) / np.quantile(a1, q) - 0.25) < 0.01)

    @pytest.mark.parametrize("R", [1.0, 2.5])
    def test_histogram_l1_at_one_million(self, R):
        cmp = compare_histogram(monte_carlo_mixing_samples(R, 1_000_000, seed=0), R)
        assert cmp.l1 < 0.02
        assert cmp.passed

    def test_histogram_small_n_rule(self):
        cmp = compare_histogram(monte_carlo_mixing_samples(1.0, 10_000, seed=0), 1.0)
        assert cmp.tolerance == pytest.approx(0.1)
        assert cmp.passed

    def test_tolerance_rule(self):
        assert l1_tolerance(1e6) == 0.02
        assert l1_tolerance(1e4) == pytest.approx(0.1)
        assert l1_tolerance(1e5) == pytest.approx(0.1 / np.sqrt(10))

    def test_wrong_radius_fails(self):
        cmp = compare_histogram(monte_carlo_mixing_samples(1.0, 100_000, seed=0), 1.3)
        assert not cmp.passed

    def test_bins_are_equal_probability(self):
        cmp = compare_histogram(monte_carlo_mixing_samples(1.0, 10_000, seed=0), 1.0, bins=20)
        np.testing.assert_allclose(np.diff(mixing_element_prior_cdf(cmp.edges, 1.0)), 0.05, atol=1e-12)


class TestRescaling:
    def test_hand_value(self):
        # 3 r^2 / R^3 at r = 0.5, R = 1 is 0.75; scaled side 2 * p(1 | 2) = 2 * 3 / 8
        assert distance_prior_pdf(0.5, 1.0) == pytest.approx(0.75)
        assert 2 * distance_prior_pdf(1.0, 2.0) == pytest.approx(0.75)

    def test_identity_scale(self):
        rep = rescale_distance_prior(3.0, 1.0)
        assert rep.distance_error == 0.0
        assert rep.coupling_error == 0.0

    @pytest.mark.parametrize("a", [1e-3, 0.5, 2.0, 1e3])
    def test_invariance(self, a):
        rep = rescale_distance_prior(1.0, a)
        assert rep.distance_error < 1e-12
        assert rep.coupling_error < 1e-12
        assert rep.passed

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.05, 20.0), st.floats(0.01, 100.0))
    def test_invariance_property(self, R, a):
        rep = rescale_distance_prior(R, a, n_grid=101)
        # peak values: 3/R for the distance prior, 6 pi R^2 for the coupling prior at its lower edge
        scale = max(3.0 / R, 6 * np.pi * R**2)
        assert rep.distance_error <= 1e-12 * scale
        assert rep.coupling_error <= 1e-12 * scale

    def test_bad_scale(self):
        with pytest.raises(ValueError):
            rescale_distance_prior(1.0, 0.0)
