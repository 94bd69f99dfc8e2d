import numpy as np
import pytest
from scipy.optimize import approx_fprime

from oracles import gp_posterior_dense
from optifab.optimizer.gp import (
    GP,
    NOISE_FLOOR,
    GPParams,
    _pack,
    fit_gp,
    neg_log_marginal_likelihood,
    predict,
)


def params(dim, noise=1e-10, ls=0.3, sv=1.3, mean=0.1):
    return GPParams(mean, sv, np.full(dim, ls), noise)


class TestPosterior:
    def test_prior_without_data(self):
        p = params(3)
        mean, var = predict(GP(p), [0.2, 0.4, 0.6])
        assert (mean, var) == (p.mean, p.signal_variance)

    def test_interpolates_training_inputs(self):
        rng = np.random.default_rng(0)
        x = rng.random((6, 2))
        y = rng.standard_normal(6)
        gp = GP(params(2, ls=0.4), x, y)
        mean, var = gp.predict(x)
        np.testing.assert_allclose(mean, y, atol=1e-6)
        assert np.all(var <= 1e-5)

    def test_single_point_at_noise_floor(self):
        gp = GP(params(1, noise=NOISE_FLOOR), [[0.4]], [0.7])
        mean, _ = predict(gp, [0.4])
        assert mean == pytest.approx(0.7, abs=1e-5)

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(5)
        x = rng.random((5, 3))
        y = rng.standard_normal(5)
        p = GPParams(0.2, 0.9, np.array([0.3, 0.7, 1.1]), 1e-4)
        probe = rng.random((4, 3))
        mean, var = GP(p, x, y).predict(probe)
        mu_o, var_o = gp_posterior_dense(x, y, probe, p.mean, p.signal_variance, p.lengthscales, p.noise_variance)
        np.testing.assert_allclose(mean, mu_o, atol=1e-8)
        np.testing.assert_allclose(var, var_o, atol=1e-8)

    def test_variance_never_negative(self):
        rng = np.random.default_rng(1)
        x = rng.random((30, 2))
        gp = GP(params(2, ls=2.0), x, rng.standard_normal(30))
        _, var = gp.predict(rng.random((500, 2)))
        assert np.all(var >= 0)

    def test_permutation_symmetry(self):
        rng = np.random.default_rng(2)
        x = rng.random((8, 2))
        y = rng.standard_normal(8)
        perm = rng.permutation(8)
        p = params(2, noise=1e-4)
        probe = rng.random((10, 2))
        a = GP(p, x, y).predict(probe)
        b = GP(p, x[perm], y[perm]).predict(probe)
        np.testing.assert_allclose(a[0], b[0], atol=1e-10)
        np.testing.assert_allclose(a[1], b[1], atol=1e-10)


class TestFit:
    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        x = rng.random((7, 2))
        y = rng.standard_normal(7)
        theta = _pack(GPParams(0.1, 1.2, np.array([0.4, 0.8]), 1e-3))
        _, grad = neg_log_marginal_likelihood(theta, x, y)
        numeric = approx_fprime(theta, lambda t: neg_log_marginal_likelihood(t, x, y)[0], 1e-6)
        np.testing.assert_allclose(grad, numeric, rtol=1e-4, atol=1e-4)

    def test_fit_improves_on_default(self):
        rng = np.random.default_rng(4)
        x = rng.random((15, 2))
        y = np.sin(6 * x[:, 0]) + 0.1 * x[:, 1]
        y = (y - y.mean()) / y.std()
        fitted = fit_gp(x, y, restarts=8, rng=np.random.default_rng(0))
        nll_fit = neg_log_marginal_likelihood(_pack(fitted), x, y)[0]
        nll_default = neg_log_marginal_likelihood(_pack(GPParams.default(2)), x, y)[0]
        assert nll_fit <= nll_default
        assert fitted.noise_variance >= NOISE_FLOOR
        assert np.all(fitted.lengthscales > 0) and fitted.signal_variance > 0

    def test_three_collinear_points_linear_targets(self):
        x = np.array([[0.1], [0.5], [0.9]])
        y = np.array([-1.0, 0.0, 1.0])
        fitted = fit_gp(x, y, restarts=16, rng=np.random.default_rng(0))
        gp = GP(fitted, x, y)
        probe = np.array([[0.3], [0.7]])
        mean, _ = gp.predict(probe)
        oracle, _ = gp_posterior_dense(x, y, probe, fitted.mean, fitted.signal_variance, fitted.lengthscales,
                                       fitted.noise_variance)
        np.testing.assert_allclose(mean, oracle, atol=1e-9)
        np.testing.assert_allclose(mean, [-0.5, 0.5], atol=1e-3)

    def test_conflicting_duplicates_do_not_raise(self):
        x = np.array([[0.5, 0.5], [0.5, 0.5], [0.1, 0.9]])
        y = np.array([1.0, -1.0, 0.0])
        fitted = fit_gp(x, y, restarts=4, rng=np.random.default_rng(0))
        mean, var = GP(fitted, x, y).predict([[0.5, 0.5]])
        assert np.isfinite(mean).all() and var[0] >= 0

    def test_short_circuit_below_two_points(self):
        assert fit_gp(np.array([[0.2]]), np.array([0.4])).mean == 0.4

    def test_deterministic_given_rng(self):
        rng = np.random.default_rng(9)
        x = rng.random((10, 3))
        y = rng.standard_normal(10)
        a = fit_gp(x, y, 6, np.random.default_rng(1))
        b = fit_gp(x, y, 6, np.random.default_rng(1))
        assert a.to_dict() == b.to_dict()

    def test_params_round_trip(self):
        p = GPParams(0.3, 1.5, np.array([0.2, 0.4]), 1e-5)
        q = GPParams.from_dict(p.to_dict())
        assert q.to_dict() == p.to_dict()
