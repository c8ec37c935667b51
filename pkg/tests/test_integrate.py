import numpy as np
import pytest
from scipy.special import ndtr, ndtri

from mitram.integrate import CubatureRule, integrate_unit_cube, normal_nodes, unit_nodes
from oracles import mc_rectangle


RULES = [CubatureRule(), CubatureRule("sparse")]


@pytest.mark.parametrize("rule", RULES, ids=["qmc", "sparse"])
@pytest.mark.parametrize("R", range(1, 7))
def test_constant(rule, R):
    est, _ = integrate_unit_cube(lambda q: np.ones(len(q)), R, rule)
    assert abs(est - 1.0) < 1e-12


def test_dimension_limit():
    with pytest.raises(ValueError):
        integrate_unit_cube(lambda q: np.ones(len(q)), 7)
    with pytest.raises(ValueError):
        CubatureRule("adaptive")


@pytest.mark.parametrize("rule", RULES, ids=["qmc", "sparse"])
def test_second_moment(rule):
    est, err = integrate_unit_cube(lambda q: ndtri(q[:, 0]) ** 2, 1, rule)
    tol = 2e-4 if rule.kind == "qmc" else 1e-10
    assert abs(est - 1.0) < tol


def test_second_moment_qmc_large():
    est, _ = integrate_unit_cube(lambda q: ndtri(q[:, 0]) ** 2, 1, CubatureRule(nodes=2**15))
    assert abs(est - 1.0) < 1e-4


@pytest.mark.parametrize("R", [1, 3, 6])
def test_nodes_strictly_inside(R):
    q, w = unit_nodes(CubatureRule(), R)
    assert np.all((q > 0) & (q < 1))
    assert abs(w.sum() - 1) < 1e-12
    x, _ = normal_nodes(CubatureRule(), R)
    assert np.all(np.isfinite(x))


def test_deterministic():
    f = lambda q: np.exp(np.sum(q, axis=1))
    a = integrate_unit_cube(f, 3)
    b = integrate_unit_cube(f, 3)
    assert a == b


@pytest.mark.parametrize("rule", RULES, ids=["qmc", "sparse"])
def test_doubling_within_error_indicator(rule):
    f = lambda q: np.prod(1 + 0.3 * np.cos(2 * np.pi * q), axis=1) * np.exp(-np.sum((q - 0.5) ** 2, axis=1))
    for R in (2, 3):
        est, err = integrate_unit_cube(f, R, rule)
        est2, _ = integrate_unit_cube(f, R, rule.refined(R))
        assert abs(est2 - est) < 10 * max(err, 1e-15)


def test_symmetric_integrand_permutation():
    f = lambda q: np.exp(-np.sum(ndtri(q) ** 2, axis=1) / 4)
    g = lambda q: f(q[:, ::-1])
    for rule in RULES:
        a, _ = integrate_unit_cube(f, 3, rule)
        b, _ = integrate_unit_cube(g, 3, rule)
        assert abs(a - b) < 1e-4
    # exact value: (1 / sqrt(1.5))^3
    a, _ = integrate_unit_cube(f, 3, CubatureRule("sparse"))
    assert abs(a - 1.5**-1.5) < 1e-6


def test_mvn_integrand_against_monte_carlo():
    # P(Z <= b) for Z = v w + e, w ~ N(0, 1): Appendix-style integrand with R = 1, N = 3
    v = np.array([0.8, -0.5, 1.2])
    b = np.array([0.3, 1.0, -0.2])
    est, _ = integrate_unit_cube(lambda q: np.prod(ndtr(b - np.outer(ndtri(q[:, 0]), v)), axis=1), 1)
    sigma = np.outer(v, v) + np.eye(3)
    p, half = mc_rectangle(np.full(3, -np.inf), b, sigma, n_draws=10_000_000, seed=5)
    assert abs(est - p) <= half


def test_sparse_node_merge():
    x, w = normal_nodes(CubatureRule("sparse", 10), 2)
    assert len(np.unique(np.round(x, 12), axis=0)) == len(x)
    np.testing.assert_allclose(w @ x[:, 0] ** 2, 1.0, atol=1e-12)


@pytest.mark.parametrize("level", [200, 1000])
def test_large_one_dimensional_rule(level):
    # E[Phi(a - b W)] = Phi(a / sqrt(1 + b^2)) for W ~ N(0, 1)
    W, w = normal_nodes(CubatureRule("sparse", level, adaptive=False), 1)
    # nodes whose weights underflow are dropped
    assert np.all(np.isfinite(w)) and np.all(w > 0) and 0 < W.shape[0] <= level
    a, b = 0.7, 3.0
    assert abs(w @ ndtr(a - b * W[:, 0]) - ndtr(a / np.sqrt(1 + b * b))) < 1e-13
