"""Marginal predictive distributions and marginal effects.

Integrating the random effects out of the model for a single observation
with covariates ``x`` and random-effects design ``u`` gives, with
``s = sqrt(u^T Lambda Lambda^T u + 1)``,

* ``M1``: ``P(Y <= y) = Phi(Phi^-1(F(h(y) - x^T beta)) / s)``
* ``M2``: ``P(Y <= y) = F((h(y) - x^T beta) / s)``

so under ``M2`` the marginal effects are ``beta / s`` on the scale of ``F``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .bases import BasisKind, eval_basis
from .covariance import marginal_variance
from .likelihood import Marginalization, ModelSpec, ParameterVector


@dataclass(frozen=True)
class MarginalQuery:
    """One covariate configuration and a response grid.

    Args:
        x: fixed-effects covariates (length ``Q``).
        u: random-effects design row (length ``R``).
        y: strictly increasing response values; category indices
            ``1..K`` for ordinal models.
        stratum: zero-based stratum of the transformation function.
    """

    x: np.ndarray
    u: np.ndarray
    y: np.ndarray
    stratum: int = 0

    def __post_init__(self):
        for name in ("x", "u", "y"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        if np.any(np.diff(self.y) <= 0):
            raise ValueError("response grid must be strictly increasing")


def marginal_effect_scale(params: ParameterVector, u, R: int | None = None) -> float:
    """``sqrt(u^T Lambda Lambda^T u + 1)``, the factor by which effects shrink."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    R = u.size if R is None else R
    lam = params.lam(R)
    return float(np.sqrt(marginal_variance(lam, u)))


def marginal_linear_predictor(spec: ModelSpec, params: ParameterVector, query: MarginalQuery) -> np.ndarray:
    """``h(y) - x^T beta`` on the query grid; ``inf`` above the last ordinal category."""
    basis = spec.basis
    p = basis.dim
    theta = params.theta[query.stratum * p : (query.stratum + 1) * p]
    y = query.y
    h = np.empty(y.size)
    if basis.kind is BasisKind.ORDINAL:
        top = y >= basis.n_categories
        h[top] = np.inf
        if (~top).any():
            h[~top] = eval_basis(basis, y[~top]) @ theta
    else:
        h[:] = eval_basis(basis, y) @ theta
    return h - query.x @ params.beta


def marginal_cdf(spec: ModelSpec, params: ParameterVector, query: MarginalQuery) -> np.ndarray:
    """Marginal distribution function ``P(Y <= y | x, u)`` on the query grid."""
    if query.x.size != params.beta.size or query.u.size != spec.R:
        raise ValueError("query dimensions do not match the model")
    e = marginal_linear_predictor(spec, params, query)
    s = marginal_effect_scale(params, query.u, spec.R)
    if spec.marginalization is Marginalization.M2:
        return spec.link.cdf(e / s)
    return ndtr(spec.link.to_probit(e) / s)


def effect_ci(estimate, cov, transform, draws: int = 100_000, seed: int = 0, level: float = 0.95):
    """Percentile interval of ``transform`` under ``N(estimate, cov)`` draws.

    Args:
        estimate: point estimates of the parameters entering ``transform``.
        cov: their covariance matrix.
        transform: maps a ``(draws, k)`` array to ``draws`` values.
        draws: number of simulated parameter vectors.
        seed: random seed.
        level: coverage of the equal-tailed interval.

    Returns:
        ``(point, lower, upper)`` with ``point`` the transform at ``estimate``.
    """
    est = np.atleast_1d(np.asarray(estimate, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.shape != (est.size, est.size):
        raise ValueError("covariance does not match the estimates")
    if not np.allclose(cov, cov.T, rtol=1e-10, atol=1e-14):
        raise ValueError("covariance is not symmetric")
    vals, vecs = np.linalg.eigh(cov)
    if np.min(vals, initial=0.0) < -1e-10 * max(np.max(np.abs(vals), initial=0.0), 1e-300):
        raise ValueError("covariance is not positive semidefinite")
    root = vecs * np.sqrt(np.maximum(vals, 0.0))
    rng = np.random.default_rng(seed)
    sample = est + rng.standard_normal((draws, est.size)) @ root.T
    values = np.asarray(transform(sample), dtype=float)
    point = float(np.asarray(transform(est[None, :]), dtype=float).ravel()[0])
    alpha = 0.5 * (1.0 - level)
    lo, hi = np.quantile(values, [alpha, 1.0 - alpha])
    return point, float(lo), float(hi)


def effect_ci_simulate(fit, transform, names, draws: int = 100_000, seed: int = 0, level: float = 0.95):
    """Simulation interval for a transformed effect of a fitted model.

    Draws from the joint normal distribution of the named estimates (the
    corresponding sub-block of the estimated covariance) and returns the
    transform at the MLE with equal-tailed percentile limits.

    Example: ``transform=lambda d: np.exp(d[:, 0] / np.sqrt(d[:, 1] ** 2 + 1))``
    with ``names=("beta:trt", "gamma1")`` is the marginal hazard ratio of a
    random-intercept model under ``M2``.
    """
    all_names = fit.names()
    idx = [all_names.index(n) for n in names]
    est = fit.estimates[idx]
    cov = fit.cov[np.ix_(idx, idx)]
    if not np.all(np.isfinite(cov)):
        raise ValueError("fit has no covariance of estimates")
    return effect_ci(est, cov, transform, draws, seed, level)
