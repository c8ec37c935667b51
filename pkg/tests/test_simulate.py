import warnings

import numpy as np
import pytest

from mitram.bases import TransformationBasis
from mitram.likelihood import ModelSpec, ParameterVector
from mitram.links import CLOGLOG, LOGIT, PROBIT
from mitram.marginal import MarginalQuery, marginal_cdf
from mitram.simulate import Covariate, SimulationDesign, SimulationWarning, mvn_prob_oracle, simulate
from oracles import orthant_bivariate

LINEAR = TransformationBasis("linear")


def test_oracle_examples():
    p, half = mvn_prob_oracle([-np.inf] * 2, [0, 0], np.eye(2), 1_000_000, seed=1)
    assert abs(p - 0.25) <= half
    S = np.array([[1, 0.5], [0.5, 1]])
    p, half = mvn_prob_oracle([-np.inf] * 2, [0, 0], S, 1_000_000, seed=2)
    assert abs(p - orthant_bivariate(0.5)) <= half
    with pytest.raises(ValueError):
        mvn_prob_oracle(np.zeros(7), np.ones(7), np.eye(7))


def test_linear_probit_is_lmm():
    # theta = (1/sigma, alpha/sigma), beta = beta_tilde/sigma
    sigma, alpha, bt, g = 2.0, 1.0, 0.6, 0.8
    spec = ModelSpec(LINEAR, PROBIT)
    params = ParameterVector([1 / sigma, alpha / sigma], [bt / sigma], [g])
    ds = simulate(SimulationDesign(spec, params, 4000, 3, (Covariate("x"),), seed=3))
    y = np.concatenate([c.y_lower for c in ds.clusters])
    x = np.concatenate([c.X[:, 0] for c in ds.clusters])
    coef = np.polyfit(x, y, 1)
    assert abs(coef[0] - bt) < 0.05 and abs(coef[1] - alpha) < 0.1
    resid = y - np.polyval(coef, x)
    assert abs(resid.var() - sigma**2 * (g**2 + 1)) < 0.15 * sigma**2 * (g**2 + 1)


def test_intraclass_correlation():
    g = 2.0
    spec = ModelSpec(LINEAR, PROBIT)
    ds = simulate(SimulationDesign(spec, ParameterVector([1.0, 0.0], [], [g]), 5000, 2, seed=4))
    z = np.array([c.y_lower for c in ds.clusters])
    r = np.corrcoef(z[:, 0], z[:, 1])[0, 1]
    assert abs(r - g**2 / (g**2 + 1)) < 0.02


@pytest.mark.parametrize("scheme", ["M1", "M2"])
def test_binary_frequencies_match_marginal(scheme):
    spec = ModelSpec(TransformationBasis("ordinal", 1), LOGIT, scheme)
    params = ParameterVector([0.3], [], [1.5])
    ds = simulate(SimulationDesign(spec, params, 20000, 2, seed=5))
    freq = np.mean([np.isneginf(c.y_lower) for c in ds.clusters])
    p = marginal_cdf(spec, params, MarginalQuery([], [1.0], [1]))[0]
    assert abs(freq - p) < 4 * np.sqrt(p * (1 - p) / 40000) * 1.5


def test_empirical_marginal_cdf_converges():
    basis = TransformationBasis("loglinear")
    spec = ModelSpec(basis, CLOGLOG, "M2")
    params = ParameterVector([0.5, 1.5], [0.7], [1.0])
    ds = simulate(SimulationDesign(spec, params, 25000, 4, (Covariate("x", "binary", cluster=True),), seed=6))
    y = np.concatenate([c.y_lower[c.X[:, 0] == 1] for c in ds.clusters])
    grid = np.quantile(y, np.linspace(0.01, 0.99, 99))
    cdf = marginal_cdf(spec, params, MarginalQuery([1.0], [1.0], grid))
    emp = np.searchsorted(np.sort(y), grid, side="right") / y.size
    assert np.max(np.abs(emp - cdf)) < 0.02


def test_deterministic_and_boundary_warning():
    spec = ModelSpec(TransformationBasis("bernstein", 2, (0.0, 1.0)), PROBIT)
    params = ParameterVector([-1.0, 0.0, 1.0], [], [0.5])
    with pytest.warns(SimulationWarning):
        a = simulate(SimulationDesign(spec, params, 50, 3, seed=9))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        b = simulate(SimulationDesign(spec, params, 50, 3, seed=9))
    assert all(np.array_equal(x.y_lower, y.y_lower) for x, y in zip(a.clusters, b.clusters))
    y = np.concatenate([c.y_lower for c in a.clusters])
    assert y.min() >= 0.0 and y.max() <= 1.0


def test_design_validation():
    spec = ModelSpec(LINEAR, PROBIT)
    with pytest.raises(ValueError):
        SimulationDesign(spec, ParameterVector([-1.0, 0.0], [], [0.5]), 10)
    with pytest.raises(ValueError):
        SimulationDesign(spec, ParameterVector([1.0, 0.0], [1.0], [0.5]), 10)
    with pytest.raises(ValueError):
        Covariate("x", "poisson")


def test_rounded_responses_are_intervals():
    spec = ModelSpec(TransformationBasis("loglinear"), CLOGLOG, "M2")
    ds = simulate(SimulationDesign(spec, ParameterVector([0.0, 1.0], [], [0.3]), 20, (2, 5), seed=1, round_to=0.5))
    assert not ds.exact
    for c in ds.clusters:
        assert 2 <= c.size <= 5
        np.testing.assert_allclose(c.y_upper - c.y_lower, 0.5)
