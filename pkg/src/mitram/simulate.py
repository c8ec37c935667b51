"""Forward simulation from the model and a Monte Carlo rectangle-probability oracle."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .bases import BasisKind, invert_basis
from .data import INTERCEPT, Dataset, RoleMap
from .likelihood import ClusterData, Marginalization, ModelSpec, ParameterVector

log = logging.getLogger(__name__)

COVARIATE_KINDS = ("normal", "binary", "uniform")


class SimulationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Covariate:
    """Covariate generator: ``normal`` (N(0, 1)), ``binary`` (Bernoulli 1/2) or ``uniform`` (U(0, 1)).

    ``cluster`` level covariates are constant within a cluster.
    """

    name: str
    kind: str = "normal"
    cluster: bool = False

    def __post_init__(self):
        if self.kind not in COVARIATE_KINDS:
            raise ValueError(f"unknown covariate kind {self.kind!r}; expected one of {COVARIATE_KINDS}")

    def draw(self, rng, n: int) -> np.ndarray:
        size = 1 if self.cluster else n
        if self.kind == "normal":
            v = rng.standard_normal(size)
        elif self.kind == "binary":
            v = (rng.random(size) < 0.5).astype(float)
        else:
            v = rng.random(size)
        return np.broadcast_to(v, (n,)).copy()


@dataclass(frozen=True)
class SimulationDesign:
    """Design of a simulation study.

    Args:
        spec: model; Bernstein bases need a resolved support.
        params: true parameters.
        n_clusters: number of clusters.
        cluster_size: fixed size, or ``(min, max)`` drawn uniformly.
        covariates: fixed-effects generators (``Q`` entries).
        seed: random seed.
        slope_times: for ``R > 1`` the random-effects design is
            ``(1, t, t^2, ...)`` with ``t`` equally spaced on this interval.
        round_to: report continuous responses as intervals
            ``(k w, (k + 1) w]`` of this width.
        stratified: draw a stratum per cluster when the model has strata.
    """

    spec: ModelSpec
    params: ParameterVector
    n_clusters: int
    cluster_size: int | tuple[int, int] = 4
    covariates: tuple[Covariate, ...] = ()
    seed: int = 1
    slope_times: tuple[float, float] = (0.0, 1.0)
    round_to: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if len(self.covariates) != self.params.beta.size:
            raise ValueError("one covariate generator per fixed effect is required")
        if self.params.theta.size != self.spec.P or self.params.gamma.size != self.spec.M:
            raise ValueError("true parameters do not match the model")
        if not self.params.is_admissible(self.spec):
            raise ValueError("true parameters violate the model constraints")
        if self.n_clusters < 1:
            raise ValueError("need at least one cluster")


def _sizes(design: SimulationDesign, rng) -> np.ndarray:
    cs = design.cluster_size
    if isinstance(cs, (tuple, list)):
        return rng.integers(cs[0], cs[1] + 1, size=design.n_clusters)
    return np.full(design.n_clusters, int(cs))


def _random_design(R: int, n: int, times) -> np.ndarray:
    t = np.linspace(times[0], times[1], n) if n > 1 else np.full(1, times[0])
    return np.column_stack([t**k for k in range(R)])


def simulate(design: SimulationDesign) -> Dataset:
    """Draw a dataset from the model.

    Latent vectors ``z ~ N(0, Sigma_i)`` are mapped back through
    ``h(y) = D F^-1(Phi(D^-1 z)) + x^T beta``.  Ordinal responses are binned
    by the thresholds; continuous responses invert ``h`` on the basis
    support, values beyond the range of ``h`` are set to the boundary with a
    warning.
    """
    spec, params = design.spec, design.params
    rng = np.random.default_rng(design.seed)
    R = spec.R
    lam = params.lam(R)
    basis = spec.basis
    p = basis.dim
    sizes = _sizes(design, rng)
    ordinal = basis.kind is BasisKind.ORDINAL
    clusters = []
    n_outside = 0
    for i, n in enumerate(sizes):
        X = np.column_stack([c.draw(rng, n) for c in design.covariates]) if design.covariates else np.zeros((n, 0))
        U = _random_design(R, n, design.slope_times)
        s = int(rng.integers(spec.n_strata)) if spec.n_strata > 1 else 0
        V = U @ lam
        z = V @ rng.standard_normal(R) + rng.standard_normal(n)
        if spec.marginalization is Marginalization.M2:
            d = np.sqrt(1.0 + np.sum(V * V, axis=1))
            target = d * spec.link.from_probit(z / d)
        else:
            target = spec.link.from_probit(z)
        target = target + X @ params.beta
        theta = params.theta[s * p : (s + 1) * p]
        strata = np.full(n, s) if spec.n_strata > 1 else None
        if ordinal:
            k = np.searchsorted(theta, target, side="left") + 1
            lo = np.where(k == 1, -np.inf, k - 1.0)
            up = np.where(k == basis.n_categories, np.inf, k.astype(float))
            clusters.append(ClusterData(f"c{i + 1}", lo, up, X, U, strata))
            continue
        y, outside = invert_basis(basis, theta, target)
        n_outside += int(outside.sum())
        if design.round_to:
            w = design.round_to
            lo = np.floor(y / w) * w
            clusters.append(ClusterData(f"c{i + 1}", lo, lo + w, X, U, strata))
        else:
            clusters.append(ClusterData.from_exact(f"c{i + 1}", y, X, U, strata))
    if n_outside:
        warnings.warn(
            f"{n_outside} latent values beyond the range of h were set to the support boundary",
            SimulationWarning,
            stacklevel=2,
        )
    random_names = (INTERCEPT,) + tuple(f"t{k}" if k > 1 else "t" for k in range(1, R))
    fixed_names = tuple(c.name for c in design.covariates)
    if ordinal:
        roles = RoleMap(y="y", fixed=fixed_names, random=random_names, categories=basis.n_categories,
                        strata="stratum" if spec.n_strata > 1 else None)
    elif design.round_to:
        roles = RoleMap(y=None, y_lower="y_lower", y_upper="y_upper", fixed=fixed_names, random=random_names,
                        strata="stratum" if spec.n_strata > 1 else None)
    else:
        roles = RoleMap(y="y", fixed=fixed_names, random=random_names,
                        strata="stratum" if spec.n_strata > 1 else None)
    levels = tuple(str(s + 1) for s in range(spec.n_strata)) if spec.n_strata > 1 else ()
    return Dataset(clusters, roles, levels, ordinal=ordinal)


def mvn_prob_oracle(lower, upper, sigma, n_draws: int = 10_000_000, seed: int = 0, batch: int = 1_000_000):
    """Plain Monte Carlo estimate of ``P(lower < Z <= upper)``, ``Z ~ N(0, sigma)``.

    Returns:
        ``(probability, half_width)`` where ``half_width`` is that of the
        99% normal-approximation confidence interval.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    n = lower.size
    if n > 6:
        raise ValueError("the oracle is meant for at most 6 dimensions")
    L = np.linalg.cholesky(sigma)
    rng = np.random.default_rng(seed)
    hits = 0
    done = 0
    while done < n_draws:
        m = min(batch, n_draws - done)
        z = rng.standard_normal((m, n)) @ L.T
        hits += int(np.count_nonzero(np.all((z > lower) & (z <= upper), axis=1)))
        done += m
    prob = hits / n_draws
    z99 = -ndtri(0.005)
    # Wilson-type floor keeps the interval non-degenerate for tiny probabilities
    var = max(prob * (1 - prob), 1.0 / n_draws) / n_draws
    return prob, float(z99 * np.sqrt(var))
