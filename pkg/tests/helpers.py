"""Random problem generators shared by the tests."""

from __future__ import annotations

import numpy as np

from mitram.bases import TransformationBasis
from mitram.covariance import diag_positions, n_gamma
from mitram.likelihood import ClusterData, ModelSpec, ParameterVector


def random_gamma(rng, R, scale=1.0):
    g = rng.normal(size=n_gamma(R)) * scale
    d = diag_positions(R)
    g[d] = np.abs(g[d]) + 0.05
    return g


def increasing_theta(rng, p, start=-2.0, lo=0.3, hi=1.5):
    return start + np.concatenate([[0.0], np.cumsum(rng.uniform(lo, hi, p - 1))])


def random_exact_problem(rng, kind="linear", R=1, n=3, Q=2, link="probit", scheme="M1", order=4):
    """One exact-data cluster with admissible random parameters."""
    from mitram.links import get_link

    if kind == "linear":
        basis = TransformationBasis("linear")
        theta = np.array([rng.uniform(0.5, 2.0), rng.normal()])
        y = rng.normal(size=n)
    else:
        basis = TransformationBasis("bernstein", order, (0.0, 1.0))
        theta = increasing_theta(rng, order + 1)
        y = rng.uniform(0.05, 0.95, n)
    spec = ModelSpec(basis, get_link(link), scheme, R)
    X = rng.normal(size=(n, Q))
    U = np.column_stack([np.ones(n)] + [rng.normal(size=n) for _ in range(R - 1)])
    params = ParameterVector(theta, rng.normal(size=Q) * 0.5, random_gamma(rng, R))
    return spec, params, ClusterData.from_exact("c", y, X, U)
