import warnings

import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.stats import multivariate_normal

from mitram.bases import TransformationBasis
from mitram.fit import FitOptions, FitWarning, _invert_information, fit, initial_params, maximize, observed_information
from mitram.likelihood import ClusterData, LikelihoodModel, ModelSpec, ParameterVector
from mitram.links import LOGIT, PROBIT
from mitram.simulate import Covariate, SimulationDesign, simulate

LINEAR = TransformationBasis("linear")


def lmm_data(seed=3, n_clusters=100, size=4, alpha=2.0, beta=0.7, tau=1.2, sigma=0.8):
    rng = np.random.default_rng(seed)
    clusters = []
    for i in range(n_clusters):
        X = rng.normal(size=(size, 1))
        y = alpha + beta * X[:, 0] + tau * rng.normal() + sigma * rng.normal(size=size)
        clusters.append(ClusterData.from_exact(f"{i:03d}", y, X, np.ones((size, 1))))
    return clusters


def lmm_oracle(clusters):
    """Direct ML of the random-intercept LMM with dense MVN densities."""

    def nll(p):
        a, b, ls, lt = p
        total = 0.0
        for c in clusters:
            cov = np.exp(2 * ls) * np.eye(c.size) + np.exp(2 * lt)
            total -= multivariate_normal(a + b * c.X[:, 0], cov).logpdf(c.y_lower)
        return total

    o = minimize(nll, [1.0, 0.0, 0.0, 0.0], method="BFGS", options={"gtol": 1e-9})
    a, b, ls, lt = o.x
    return -o.fun, a, b, np.exp(ls), np.exp(lt)


@pytest.fixture(scope="module")
def lmm_fit():
    clusters = lmm_data()
    return clusters, fit(ModelSpec(LINEAR, PROBIT), clusters)


def test_lmm_matches_direct_ml(lmm_fit):
    clusters, res = lmm_fit
    ll, a, b, s, t = lmm_oracle(clusters)
    assert res.converged
    assert abs(res.loglik - ll) < 1e-4
    th, be, ga = res.params.theta, res.params.beta, res.params.gamma
    # theta = (1/sigma, alpha/sigma), beta = beta_tilde/sigma, gamma = tau/sigma
    np.testing.assert_allclose([1 / th[0], th[1] / th[0], be[0] / th[0], ga[0] / th[0]], [s, a, b, t], atol=1e-3)
    assert abs(be[0] / th[0] - 0.7) < 3 * res.se[2] / th[0] + 0.05


def test_stationary_at_optimum(lmm_fit):
    clusters, res = lmm_fit
    model = LikelihoodModel(res.spec, clusters)
    g = model.score(res.estimates)
    assert np.linalg.norm(g) < 1e-6 * (1 + abs(res.loglik)) * 10
    again = maximize(res.spec, clusters, res.params, FitOptions(compute_se=False))
    assert again.inner_iterations <= 2
    assert abs(again.loglik - res.loglik) < 1e-8


def test_covariance_is_symmetric_psd(lmm_fit):
    _, res = lmm_fit
    np.testing.assert_array_equal(res.cov, res.cov.T)
    assert np.min(np.linalg.eigvalsh(res.cov)) >= -1e-14
    np.testing.assert_allclose(res.se, np.sqrt(np.diag(res.cov)))
    assert res.names() == ["theta1", "theta2", "beta:x1", "gamma1"]


def test_scale_equivariance(lmm_fit):
    clusters, res = lmm_fit
    c = 3.5
    scaled = [ClusterData.from_exact(k.cluster_id, c * k.y_lower, k.X, k.U) for k in clusters]
    res2 = fit(ModelSpec(LINEAR, PROBIT), scaled, FitOptions(compute_se=False))
    assert abs(res2.params.theta[0] - res.params.theta[0] / c) < 1e-4
    assert abs(res2.params.theta[1] - res.params.theta[1]) < 1e-4
    np.testing.assert_allclose(res2.params.beta, res.params.beta, atol=1e-4)
    np.testing.assert_allclose(res2.params.gamma, res.params.gamma, atol=1e-4)


def test_initial_params_moment_matching():
    rng = np.random.default_rng(0)
    y = rng.normal(3.0, 2.0, 200)
    clusters = [ClusterData.from_exact(str(i), y[2 * i : 2 * i + 2], np.zeros((2, 0)), np.ones((2, 1))) for i in range(100)]
    p = initial_params(ModelSpec(LINEAR, PROBIT), clusters)
    sd = y.std()
    np.testing.assert_allclose(p.theta, [1 / sd, y.mean() / sd], rtol=1e-4)
    assert p.gamma[0] == 0.1


def test_initial_params_ordinal_thresholds():
    rng = np.random.default_rng(1)
    k = rng.integers(1, 6, 500)
    clusters = [ClusterData(str(i), [-np.inf if v == 1 else v - 1.0], [np.inf if v == 5 else float(v)],
                            np.zeros((1, 0)), np.ones((1, 1))) for i, v in enumerate(k)]
    spec = ModelSpec(TransformationBasis("ordinal", 4), LOGIT)
    p = initial_params(spec, clusters)
    cum = np.cumsum(np.bincount(k, minlength=6)[1:])[:4] / k.size
    np.testing.assert_allclose(p.theta, np.log(cum / (1 - cum)), atol=1e-4)
    K, k0 = spec.constraints()
    assert np.all(K @ p.theta >= k0)


def test_constant_response_rejected():
    clusters = [ClusterData.from_exact(str(i), [1.0, 1.0], np.zeros((2, 0)), np.ones((2, 1))) for i in range(5)]
    with pytest.raises(ValueError):
        initial_params(ModelSpec(LINEAR, PROBIT), clusters)


def test_rank_deficient_design_rejected():
    clusters = [ClusterData.from_exact(str(i), [0.0, float(i)], np.ones((2, 2)), np.ones((2, 1))) for i in range(5)]
    with pytest.raises(ValueError, match="rank"):
        fit(ModelSpec(LINEAR, PROBIT), clusters)


def test_zero_variance_truth_hits_bound():
    spec = ModelSpec(LINEAR, PROBIT)
    ds = simulate(SimulationDesign(spec, ParameterVector([1.0, 0.5], [0.8], [0.0]), 150, 3, (Covariate("x"),), seed=12))
    res = fit(spec, ds)
    indep = fit(spec, ds, FitOptions(fix_gamma=0.0))
    assert res.params.gamma[0] < 0.2
    if res.params.gamma[0] < 1e-6:
        assert res.active[-1]
    np.testing.assert_allclose(res.params.beta, indep.params.beta, atol=0.02)
    assert res.loglik >= indep.loglik - 1e-8


def test_observed_information_toy():
    # independence normal model: loglik = n log t1 - sum (t1 y - t2)^2 / 2 + const
    y = np.array([0.3, -1.0, 2.2, 0.7, 1.1])
    c = [ClusterData.from_exact(str(i), [v], np.zeros((1, 0)), np.ones((1, 1))) for i, v in enumerate(y)]
    spec = ModelSpec(LINEAR, PROBIT)
    x = np.array([0.9, 0.4, 0.0])
    info = observed_information(spec, c, x, free=np.array([True, True, False]))
    n = y.size
    ref = np.array([[n / x[0] ** 2 + np.sum(y**2), -np.sum(y)], [-np.sum(y), n]])
    np.testing.assert_allclose(info, ref, rtol=1e-4)


def test_observed_information_symmetric_off_optimum():
    ds = lmm_data(n_clusters=10)
    spec = ModelSpec(LINEAR, LOGIT, "M2")
    info = observed_information(spec, ds, np.array([1.3, 0.2, 0.1, 0.7]))
    np.testing.assert_array_equal(info, info.T)


def test_singular_information_warns():
    with pytest.warns(FitWarning):
        cov = _invert_information(np.array([[1.0, 1.0], [1.0, 1.0]]))
    np.testing.assert_allclose(cov, np.full((2, 2), 0.25))


def test_bernstein_constraints_hold():
    spec = ModelSpec(TransformationBasis("bernstein", 4, (0.0, 1.0)), LOGIT, "M1")
    truth = ParameterVector([-9.0, -3.0, 0.0, 3.0, 9.0], [0.5], [0.6])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ds = simulate(SimulationDesign(spec, truth, 100, 4, (Covariate("x"),), seed=2))
    res = fit(spec, ds, FitOptions(compute_se=False))
    K, k0 = spec.constraints()
    assert np.all(K @ res.params.theta >= k0 - 1e-8)
    assert res.max_violation <= 1e-8
