import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from bayesbss.densities import GaussianDensity, LaplacianDensity, LogisticDensity, MatrixPrior, sinusoid_matched
from bayesbss.metrics import amari_index
from bayesbss.separation import (ModelError, SeparationConfig, SingularMatrixError, gradient_step, log_posterior_A,
                                 log_posterior_W, objective, objective_gradient, separate)
from bayesbss.signalgen import SourceSpec, gen_sources, mix, random_mixing


def _fd_gradient(f, W, h=1e-6):
    g = np.zeros_like(W)
    for idx in np.ndindex(W.shape):
        E = np.zeros_like(W)
        E[idx] = h
        g[idx] = (f(W + E) - f(W - E)) / (2 * h)
    return g


def _laplacian_mixture(N, T, seed):
    S = gen_sources([SourceSpec("laplacian", {}, seed * 10 + j) for j in range(N)], T)
    A = random_mixing(N, 1000 + seed)
    return A, mix(A, S).values


def _log_normal_pdf(x, cov):
    # log N(x; 0, cov) written out without any matrix inverse of A
    N = len(x)
    sign, logdet = np.linalg.slogdet(cov)
    return -0.5 * x @ np.linalg.solve(cov, x) - 0.5 * logdet - 0.5 * N * np.log(2 * np.pi)


class TestLogPosteriorA:
    def test_one_dimensional_formula(self):
        x = np.array([[0.3, -1.2, 2.0, 0.7, -0.1]])
        a = 1.7
        cfg = SeparationConfig(densities=GaussianDensity(), matrix_prior=MatrixPrior.uniform_box(-5, 5))
        T = x.shape[1]
        expected = -np.log(10.0) - T * np.log(a) - np.sum(x**2) / (2 * a**2) - T * 0.5 * np.log(2 * np.pi)
        assert log_posterior_A([[a]], x, cfg) == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("N", [2, 3, 4])
    def test_column_permutation_and_sign_symmetry(self, N):
        rng = np.random.default_rng(N)
        A = random_mixing(N, N)
        X = rng.normal(size=(N, 50))
        cfg = SeparationConfig(densities=LogisticDensity())
        base = log_posterior_A(A, X, cfg)
        for perm in itertools.permutations(range(N)):
            P = np.eye(N)[:, perm]
            D = np.diag(rng.choice([-1.0, 1.0], size=N))
            assert log_posterior_A(A @ P @ D, X, cfg) == pytest.approx(base, abs=1e-9)

    def test_scaling_changes_value(self):
        A = random_mixing(2, 0)
        X = np.random.default_rng(0).normal(size=(2, 40))
        cfg = SeparationConfig()
        assert log_posterior_A(A @ np.diag([2.0, 1.0]), X, cfg) != pytest.approx(log_posterior_A(A, X, cfg))

    @pytest.mark.parametrize("T", [1, 2])
    def test_delta_marginalization_gaussian_covariance_oracle(self, T):
        # with unit-normal sources, p(x | A) = N(x; 0, A A^T) per time step
        rng = np.random.default_rng(T)
        A = random_mixing(2, 7)
        X = rng.normal(size=(2, T))
        cfg = SeparationConfig(densities=GaussianDensity())
        expected = sum(_log_normal_pdf(X[:, t], A @ A.T) for t in range(T))
        assert log_posterior_A(A, X, cfg) == pytest.approx(expected, abs=1e-10)

    @pytest.mark.parametrize("T", [1, 2])
    def test_delta_marginalization_cramer_oracle(self, T):
        # collapse the delta by hand: s = adj(A) x / det(A), one 1/|det A| per time step
        rng = np.random.default_rng(10 + T)
        A = random_mixing(2, 3)
        X = rng.normal(size=(2, T))
        q = LogisticDensity()
        (a, b), (c, d) = A
        det = a * d - b * c
        total = 0.0
        for t in range(T):
            x1, x2 = X[:, t]
            s1 = (d * x1 - b * x2) / det
            s2 = (-c * x1 + a * x2) / det
            total += q.log_density(s1) + q.log_density(s2) - np.log(abs(det))
        assert log_posterior_A(A, X, SeparationConfig(densities=q)) == pytest.approx(total, abs=1e-10)

    def test_delta_marginalization_smoothed_quadrature(self):
        # replace the delta by a narrow Gaussian and integrate over both sources numerically
        A = np.array([[1.0, 0.4], [-0.3, 0.8]])
        x = np.array([0.5, -0.2])
        q = LogisticDensity()
        eps = 1e-3
        s_star = np.linalg.solve(A, x)  # only used to centre the integration window
        w = 12 * eps * np.abs(np.linalg.inv(A)).sum(axis=1)

        def integrand(s2, s1):
            r = x - A @ np.array([s1, s2])
            kernel = np.exp(-0.5 * r @ r / eps**2) / (2 * np.pi * eps**2)
            return kernel * np.exp(q.log_density(s1) + q.log_density(s2))

        val, _ = integrate.dblquad(integrand, s_star[0] - w[0], s_star[0] + w[0],
                                   s_star[1] - w[1], s_star[1] + w[1], epsabs=1e-12, epsrel=1e-10)
        got = np.exp(log_posterior_A(A, x[:, None], SeparationConfig(densities=q)))
        # the smoothing error is O(eps^2)
        assert val == pytest.approx(got, rel=1e-5)

    def test_singular_matrix(self):
        with pytest.raises(SingularMatrixError):
            log_posterior_A([[1.0, 2.0], [2.0, 4.0]], np.ones((2, 3)), SeparationConfig())

    def test_shape_mismatch(self):
        with pytest.raises(ModelError):
            log_posterior_A(np.eye(3), np.ones((2, 3)), SeparationConfig())

    def test_inverse_square_prior_adds_elementwise_terms(self):
        R = 2.0
        A = np.array([[0.3, 0.05], [0.1, 0.6]])
        X = np.random.default_rng(0).normal(size=(2, 30))
        flat = SeparationConfig()
        informed = SeparationConfig(matrix_prior=MatrixPrior.inverse_square(R))
        c = 3 / (16 * np.pi**1.5 * R**3)
        diff = log_posterior_A(A, X, informed) - log_posterior_A(A, X, flat)
        assert diff == pytest.approx(np.sum(np.log(c) - 2.5 * np.log(A)), abs=1e-10)

    def test_outside_box_is_minus_infinity(self):
        cfg = SeparationConfig(matrix_prior=MatrixPrior.uniform_box(-1, 1))
        assert log_posterior_A([[2.0, 0.0], [0.0, 0.5]], np.ones((2, 3)), cfg) == -np.inf


class TestGradient:
    @pytest.mark.parametrize("N", [1, 2, 3, 4])
    @pytest.mark.parametrize("obj", ["posterior-A", "jacobian-W"])
    @pytest.mark.parametrize("density", [LogisticDensity(), GaussianDensity(), sinusoid_matched()],
                             ids=["logistic", "gaussian", "bimodal"])
    def test_matches_finite_differences(self, N, obj, density):
        rng = np.random.default_rng(N)
        X = rng.normal(size=(N, 60))
        W = np.linalg.inv(random_mixing(N, 40 + N)) if N > 1 else np.array([[0.8]])
        cfg = SeparationConfig(densities=density, objective=obj)
        g = objective_gradient(W, X, cfg)
        fd = _fd_gradient(lambda V: objective(V, X, cfg), W)
        assert np.max(np.abs(g - fd)) / np.max(np.abs(g)) < 1e-5

    @pytest.mark.parametrize("N", [2, 3])
    def test_inverse_square_prior_gradient(self, N):
        rng = np.random.default_rng(N)
        A = rng.uniform(0.2, 1.0, size=(N, N)) + np.eye(N)
        W = np.linalg.inv(A)
        X = rng.normal(size=(N, 40))
        cfg = SeparationConfig(matrix_prior=MatrixPrior.inverse_square(2.0))
        g = objective_gradient(W, X, cfg)
        fd = _fd_gradient(lambda V: objective(V, X, cfg), W)
        assert np.max(np.abs(g - fd)) / np.max(np.abs(g)) < 1e-5

    def test_laplacian_gradient_away_from_kinks(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(2, 30))
        W = np.array([[1.0, 0.3], [-0.2, 0.9]])
        cfg = SeparationConfig(densities=LaplacianDensity())
        g = objective_gradient(W, X, cfg)
        fd = _fd_gradient(lambda V: objective(V, X, cfg), W, h=1e-8)
        assert np.max(np.abs(g - fd)) / np.max(np.abs(g)) < 1e-5

    def test_objective_equals_log_posterior_A_at_inverse(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(3, 25))
        W = np.linalg.inv(random_mixing(3, 1))
        cfg = SeparationConfig()
        assert objective(W, X, cfg) == pytest.approx(log_posterior_A(np.linalg.inv(W), X, cfg), abs=1e-9)

    def test_objective_equals_log_posterior_W(self):
        rng = np.random.default_rng(4)
        X = rng.normal(size=(2, 25))
        W = np.linalg.inv(random_mixing(2, 2))
        cfg = SeparationConfig(objective="jacobian-W")
        assert objective(W, X, cfg) == pytest.approx(log_posterior_W(W, X, cfg), abs=1e-9)

    def test_stationary_point_one_dimensional(self):
        x = np.random.default_rng(2).normal(size=(1, 50)) * 1.7
        a = np.sqrt(np.mean(x**2))
        cfg = SeparationConfig(densities=GaussianDensity())
        assert abs(objective_gradient([[1 / a]], x, cfg)[0, 0]) < 1e-8

    def test_zero_score_data_leaves_determinant_term(self):
        X = np.zeros((2, 10))
        W = np.array([[1.0, 0.5], [0.2, 2.0]])
        g = objective_gradient(W, X, SeparationConfig(densities=LogisticDensity()))
        np.testing.assert_allclose(g, 10 * np.linalg.inv(W).T, rtol=1e-14)


class TestJacobian:
    def test_one_dimensional_change_of_variables(self):
        x = np.random.default_rng(0).normal(size=(1, 20))
        cfg = SeparationConfig(densities=GaussianDensity())
        for w in (0.3, 1.0, -2.2):
            assert log_posterior_W([[w]], x, cfg) == pytest.approx(
                log_posterior_A([[1 / w]], x, cfg) - 2 * np.log(abs(w)), abs=1e-12)
            h = 1e-6
            dadw = (1 / (w + h) - 1 / (w - h)) / (2 * h)
            assert abs(dadw) == pytest.approx(w**-2, rel=1e-8)

    def test_inversion_jacobian_determinant(self):
        W = np.array([[1.2, -0.4], [0.3, 0.9]])
        h = 1e-6
        J = np.zeros((4, 4))
        for k in range(4):
            E = np.zeros(4)
            E[k] = h
            J[:, k] = (np.linalg.inv(W + E.reshape(2, 2)) - np.linalg.inv(W - E.reshape(2, 2))).ravel() / (2 * h)
        assert abs(np.linalg.det(J)) == pytest.approx(abs(np.linalg.det(W)) ** -4, rel=1e-6)

    def test_modes_differ(self):
        rng = np.random.default_rng(5)
        T = 10
        x = rng.normal(size=(1, T))
        m = np.mean(x**2)
        cfg = SeparationConfig(densities=GaussianDensity(), matrix_prior=MatrixPrior.uniform_box(0.05, 20.0))
        grid = np.arange(0.1, 5.0, 1e-3)
        a_hat = grid[np.argmax([log_posterior_A([[a]], x, cfg) for a in grid])]
        w_hat = grid[np.argmax([log_posterior_W([[w]], x, cfg) for w in grid])]
        assert a_hat == pytest.approx(np.sqrt(m), abs=1e-3)
        assert w_hat == pytest.approx(np.sqrt((T - 2) / (T * m)), abs=1e-3)
        assert abs(w_hat - 1 / a_hat) > 3e-3


class TestSeparate:
    @pytest.mark.parametrize("N", [2, 3])
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_laplacian_recovery(self, N, seed):
        A, X = _laplacian_mixture(N, 5000, seed)
        res = separate(X, SeparationConfig(step=0.2, tol=1e-10), A_true=A)
        assert res.amari_index < 0.05
        assert res.converged

    def test_trace_is_monotone(self):
        A, X = _laplacian_mixture(3, 2000, 4)
        res = separate(X, SeparationConfig(step=0.5, mode="vanilla", max_iter=300))
        assert np.all(np.diff(res.log_posterior_trace) > 0)

    def test_modes_agree(self):
        A, X = _laplacian_mixture(2, 3000, 1)
        nat = separate(X, SeparationConfig(step=0.2, tol=1e-12, max_iter=5000))
        van = separate(X, SeparationConfig(step=0.2, tol=1e-12, max_iter=20000, mode="vanilla"))
        assert nat.log_posterior_trace[-1] == pytest.approx(van.log_posterior_trace[-1], rel=1e-6)

    def test_sinusoids_fail_with_logistic(self):
        S = gen_sources([SourceSpec("sinusoid", {"freq": 0.0123, "phase": 0.3}),
                         SourceSpec("sinusoid", {"freq": 0.0371, "phase": 1.1})], 5000)
        A = random_mixing(2, 1000)
        res = separate(mix(A, S).values, SeparationConfig(whiten=True, step=0.2, tol=1e-10), A_true=A)
        assert res.amari_index >= 0.3

    def test_sinusoids_succeed_with_bimodal(self):
        S = gen_sources([SourceSpec("sinusoid", {"freq": 0.0123, "phase": 0.3}),
                         SourceSpec("sinusoid", {"freq": 0.0371, "phase": 1.1})], 5000)
        A = random_mixing(2, 1000)
        cfg = SeparationConfig(densities=sinusoid_matched(), whiten=True, step=0.2, tol=1e-10)
        assert separate(mix(A, S).values, cfg, A_true=A).amari_index < 0.1

    def test_random_orthogonal_init_is_seeded(self):
        A, X = _laplacian_mixture(2, 1000, 0)
        cfg = SeparationConfig(init="random-orthogonal", seed=3, max_iter=5)
        np.testing.assert_array_equal(separate(X, cfg).W, separate(X, cfg).W)

    def test_density_count_mismatch(self):
        with pytest.raises(ModelError):
            separate(np.random.default_rng(0).normal(size=(2, 50)),
                     SeparationConfig(densities=[LogisticDensity()] * 3))

    def test_start_outside_prior_support(self):
        X = np.random.default_rng(0).normal(size=(2, 50))
        with pytest.raises(ModelError):
            separate(X, SeparationConfig(matrix_prior=MatrixPrior.uniform_box(0.5, 2.0)))

    def test_step_rejected_when_no_improvement(self):
        # at the exact optimum of the N=1 Gaussian case no step can improve
        x = np.random.default_rng(2).normal(size=(1, 50))
        w = 1 / np.sqrt(np.mean(x**2))
        res = gradient_step(np.array([[w]]), x, SeparationConfig(densities=GaussianDensity()))
        assert not res.accepted
        assert res.W[0, 0] == w

    @pytest.mark.parametrize("kwargs", [{"step": 0}, {"tol": -1}, {"mode": "newton"}, {"objective": "x"},
                                        {"init": "zeros"}])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ValueError):
            SeparationConfig(**kwargs)


class TestAmari:
    def test_perfect(self):
        A = random_mixing(3, 0)
        assert amari_index(np.linalg.inv(A), A) == pytest.approx(0.0, abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 6), st.integers(0, 1000), st.data())
    def test_scaled_permutation_invariance(self, N, seed, data):
        A = random_mixing(N, seed)
        perm = data.draw(st.permutations(range(N)))
        d = data.draw(st.lists(st.floats(0.1, 10) | st.floats(-10, -0.1), min_size=N, max_size=N))
        W = np.diag(d) @ np.eye(N)[list(perm)] @ np.linalg.inv(A)
        assert amari_index(W, A) == pytest.approx(0.0, abs=1e-9)

    def test_perturbation_positive(self):
        A = random_mixing(2, 1)
        assert amari_index(np.linalg.inv(A) + np.ones((2, 2)), A) > 0

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 5), st.integers(0, 1000))
    def test_bounded(self, N, seed):
        rng = np.random.default_rng(seed)
        v = amari_index(rng.normal(size=(N, N)), rng.normal(size=(N, N)))
        assert 0 <= v <= 1 + 1e-12

    def test_uniform_magnitudes_give_one(self):
        assert amari_index(np.ones((3, 3)), np.eye(3)) == pytest.approx(1.0)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            amari_index(np.eye(2), np.eye(3))
