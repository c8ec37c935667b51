"""Constrained maximum-likelihood estimation and observed information.

Constraints on single parameters (diagonal of ``Lambda``, slopes of linear
and log-linear bases) are box constraints of the inner quasi-Newton solver
(L-BFGS-B).  Monotonicity rows that couple several coefficients (Bernstein
and ordinal differences) are handled by a Powell-Hestenes-Rockafellar
augmented Lagrangian outer loop.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import lsq_linear, minimize
from scipy.stats import rankdata

from .bases import BasisKind, monotone_reparam, project_monotone
from .covariance import diag_positions
from .integrate import CubatureRule
from .likelihood import LikelihoodModel, ModelSpec, ParameterVector, _basis_rows

log = logging.getLogger(__name__)


class FitWarning(UserWarning):
    pass


@dataclass(frozen=True)
class FitOptions:
    """Optimiser settings.

    Args:
        tol: relative stationarity tolerance; converged when the projected
            gradient norm is below ``tol * (1 + |loglik|)``.
        max_outer: augmented-Lagrangian outer iterations.
        max_inner: quasi-Newton iterations per outer iteration.
        feas_tol: allowed violation of the coupled monotonicity rows.
        rule: integration rule used during optimisation (interval data).
        fix_gamma: hold every variance parameter at this value.
        refine: re-evaluate loglik and SEs with a refined integration rule.
        compute_se: compute the observed information at the solution.
    """

    tol: float = 1e-6
    max_outer: int = 20
    max_inner: int = 1000
    feas_tol: float = 1e-8
    rule: CubatureRule = field(default_factory=CubatureRule)
    fix_gamma: float | None = None
    refine: bool = True
    compute_se: bool = True


@dataclass(frozen=True)
class FitResult:
    spec: ModelSpec
    params: ParameterVector
    loglik: float
    cov: np.ndarray
    se: np.ndarray
    free: np.ndarray
    active: np.ndarray
    converged: bool
    outer_iterations: int
    inner_iterations: int
    grad_norm: float
    max_violation: float
    rule: CubatureRule
    rule_final: CubatureRule
    loglik_optim: float
    n_clusters: int
    n_obs: int
    fixed_names: tuple = ()
    warnings: tuple = ()

    @property
    def estimates(self) -> np.ndarray:
        return self.params.to_array()

    def names(self) -> list[str]:
        from .likelihood import parameter_names

        return parameter_names(self.spec, self.fixed_names)

    def index(self, name: str) -> int:
        return self.names().index(name)


def _clusters(dataset):
    return list(getattr(dataset, "clusters", dataset))


def _check_rank(clusters, Q):
    if Q == 0:
        return
    X = np.concatenate([c.X for c in clusters])
    if np.linalg.matrix_rank(X) < Q:
        raise ValueError("fixed-effects design does not have full column rank")


# ---------------------------------------------------------------------------
# starting values
# ---------------------------------------------------------------------------


def _representative(c):
    lo, up = c.y_lower, c.y_upper
    mid = np.where(np.isfinite(lo) & np.isfinite(up), 0.5 * (lo + up), np.where(np.isfinite(lo), lo, up))
    return mid


def _ecdf_start(spec: ModelSpec, clusters) -> tuple[np.ndarray, np.ndarray]:
    basis = spec.basis
    Q = clusters[0].X.shape[1]
    X = np.concatenate([c.X for c in clusters])
    strata = np.concatenate([c.strata if c.strata is not None else np.zeros(c.size, int) for c in clusters])
    if basis.kind is BasisKind.ORDINAL:
        # categories from upper bound indices; the last category has upper = inf
        K = basis.n_categories
        cat = np.concatenate([np.where(np.isfinite(c.y_upper), c.y_upper, K) for c in clusters]).astype(int)
        n = cat.size
        theta = []
        for s in range(spec.n_strata):
            cs = cat[strata == s]
            m = max(cs.size, 1)
            cum = np.array([(cs <= k).sum() for k in range(1, K)]) / m
            cum = np.clip(cum, 0.5 / m, 1 - 0.5 / m)
            theta.append(project_monotone(basis, spec.link.quantile(cum)))
        if n == 0:
            raise ValueError("empty dataset")
        return np.concatenate(theta), np.zeros(Q)
    y = np.concatenate([_representative(c) for c in clusters])
    if np.ptp(y) == 0:
        raise ValueError("response is constant; the transformation is not identifiable")
    target = spec.link.quantile((rankdata(y) - 0.5) / y.size)
    A = _basis_rows(spec, y, strata)
    T, lower = monotone_reparam(basis)
    p = basis.dim
    Tbig = np.kron(np.eye(spec.n_strata), T)
    lb = np.concatenate([np.tile(lower, spec.n_strata), np.full(Q, -np.inf)])
    M = np.hstack([A @ Tbig, -X])
    # bounds need a strictly feasible box: lower < upper
    res = lsq_linear(M, target, bounds=(lb, np.full(lb.size, np.inf)))
    eta, beta = res.x[: spec.P], res.x[spec.P :]
    theta = Tbig @ eta
    theta = np.concatenate([project_monotone(basis, theta[s * p : (s + 1) * p]) for s in range(spec.n_strata)])
    return theta, beta


def initial_params(spec: ModelSpec, dataset, options: FitOptions | None = None) -> ParameterVector:
    """Starting values: ECDF regression, then the independence-model fit.

    ``(theta, beta)`` come from a constrained least-squares fit of the
    link-transformed empirical CDF on the basis, refined by maximising the
    likelihood with ``Lambda = 0``; ``gamma`` is 0.1 on the diagonal of
    ``Lambda`` and 0 elsewhere.
    """
    clusters = _clusters(dataset)
    if not clusters:
        raise ValueError("empty dataset")
    theta, beta = _ecdf_start(spec, clusters)
    gamma0 = np.zeros(spec.M)
    start = ParameterVector(theta, beta, gamma0)
    options = options or FitOptions()
    indep = replace(options, fix_gamma=0.0, compute_se=False, refine=False)
    try:
        res = maximize(spec, clusters, start, indep)
        if np.all(np.isfinite(res.estimates)):
            theta, beta = res.params.theta, res.params.beta
    except (ValueError, np.linalg.LinAlgError) as exc:  # keep the ECDF values
        log.debug("independence fit failed: %s", exc)
    gamma = np.zeros(spec.M)
    if options.fix_gamma is not None:
        gamma[:] = options.fix_gamma
    else:
        gamma[diag_positions(spec.R)] = 0.1
    return ParameterVector(theta, beta, gamma)


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


def _split_constraints(spec: ModelSpec, Q: int):
    """Bounds for single-variable rows and the remaining coupled rows."""
    n = spec.P + Q + spec.M
    lower = np.full(n, -np.inf)
    K, k0 = spec.constraints()
    coupled = []
    for row, b in zip(K, k0):
        nz = np.flatnonzero(row)
        if nz.size == 1 and row[nz[0]] > 0:
            lower[nz[0]] = max(lower[nz[0]], b / row[nz[0]])
        else:
            coupled.append((row, b))
    lower[spec.P + Q + diag_positions(spec.R)] = 0.0
    if coupled:
        G = np.zeros((len(coupled), n))
        G[:, : spec.P] = np.array([r for r, _ in coupled])
        g0 = np.array([b for _, b in coupled])
    else:
        G, g0 = np.zeros((0, n)), np.zeros(0)
    return lower, G, g0


def _projected_grad(x, g, lower):
    """Projected gradient of a minimisation problem with lower bounds."""
    pg = g.copy()
    at = (x <= lower + 1e-12) & (g > 0)
    pg[at] = 0.0
    return pg


def maximize(spec: ModelSpec, dataset, init: ParameterVector | None = None, options: FitOptions | None = None) -> FitResult:
    """Maximise the log-likelihood subject to the monotonicity and variance constraints.

    Args:
        spec: model definition.
        dataset: :class:`~mitram.data.Dataset` or a list of clusters.
        init: admissible starting values (default :func:`initial_params`).
        options: optimiser settings.

    Returns:
        A :class:`FitResult`; ``converged`` is False when the tolerances were
        not reached within ``max_outer`` outer iterations.
    """
    options = options or FitOptions()
    clusters = _clusters(dataset)
    fixed_names = tuple(getattr(dataset, "fixed_names", ()))
    model = LikelihoodModel(spec, clusters, options.rule)
    Q = model.Q
    if len(fixed_names) != Q:
        fixed_names = tuple(f"x{j + 1}" for j in range(Q))
    _check_rank(clusters, Q)
    if init is None:
        init = initial_params(spec, clusters, options)
    x0 = init.to_array().copy()
    n = x0.size
    if n != model.n_params:
        raise ValueError(f"initial values have {n} entries, the model needs {model.n_params}")
    lower, G, g0 = _split_constraints(spec, Q)
    free = np.ones(n, bool)
    if options.fix_gamma is not None:
        free[spec.P + Q :] = False
        x0[spec.P + Q :] = options.fix_gamma
    x0 = np.maximum(x0, lower)
    notes: list[str] = []

    fidx = np.flatnonzero(free)
    lower_f = lower[fidx]
    G_f = G[:, fidx]

    def full(xf):
        x = x0.copy()
        x[fidx] = xf
        return x

    def negll(xf):
        return -model.loglik(full(xf), strict=False)

    lam_mult = np.zeros(G.shape[0])
    rho = 10.0
    xf = x0[fidx].copy()
    viol_prev = np.inf
    inner_total = 0
    outer = 0
    converged = False
    grad_norm = np.inf
    viol = 0.0
    ll = -negll(xf)

    for outer in range(1, options.max_outer + 1):

        def al(v, lam_mult=lam_mult, rho=rho):
            ll_v, g_v = model.loglik_and_score(full(v), strict=False)
            f, g = -ll_v, -g_v[fidx]
            if G_f.shape[0]:
                c = G_f @ v - g0
                m = np.maximum(0.0, lam_mult - rho * c)
                f += (m @ m - lam_mult @ lam_mult) / (2.0 * rho)
                g = g - G_f.T @ m
            return f, g

        gtol = options.tol * (1.0 + abs(ll))
        res = minimize(
            al,
            xf,
            jac=True,
            method="L-BFGS-B",
            bounds=[(lo if np.isfinite(lo) else None, None) for lo in lower_f],
            options={"maxiter": options.max_inner, "gtol": 0.1 * gtol, "ftol": 1e-15, "maxcor": 20},
        )
        inner_total += int(res.nit)
        xf = res.x
        ll = -negll(xf)
        f_al, g_al = al(xf)
        grad_norm = float(np.max(np.abs(_projected_grad(xf, g_al, lower_f)))) if xf.size else 0.0
        if G_f.shape[0]:
            c = G_f @ xf - g0
            viol = float(np.max(np.maximum(0.0, -c)))
            lam_mult = np.maximum(0.0, lam_mult - rho * c)
        else:
            viol = 0.0
        log.debug("outer %d: loglik=%.10g pg=%.3g viol=%.3g rho=%g", outer, ll, grad_norm, viol, rho)
        gtol = options.tol * (1.0 + abs(ll))
        if viol <= options.feas_tol and grad_norm <= gtol:
            converged = True
            break
        if viol > 0.25 * viol_prev:
            rho *= 10.0
        viol_prev = viol

    x = full(xf)
    # repair the tiny residual infeasibility left by the multiplier method
    p = spec.basis.dim
    x[: spec.P] = np.concatenate(
        [project_monotone(spec.basis, x[s * p : (s + 1) * p]) for s in range(spec.n_strata)]
    )
    x = np.maximum(x, lower)
    if not converged:
        notes.append(f"not converged after {outer} outer iterations (pg={grad_norm:.3g}, violation={viol:.3g})")

    model.clamp_count = 0
    ll_opt = model.loglik(x)
    if model.clamp_count:
        converged = False
        notes.append(f"integrated probability floored for {model.clamp_count} clusters at the solution")

    final_model, rule_final = model, options.rule
    ll_final = ll_opt
    if options.refine and not model.exact:
        rule_final = options.rule.refined(spec.R)
        final_model = model.with_rule(rule_final)
        ll_final = final_model.loglik(x)
        if abs(ll_final - ll_opt) > 0.01:
            notes.append(
                f"loglik changed by {ll_final - ll_opt:.4g} under refined integration ({rule_final.describe(spec.R)})"
            )

    cov = np.full((n, n), np.nan)
    se = np.full(n, np.nan)
    if options.compute_se:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", FitWarning)
            sub = observed_information(spec, final_model, x, free=free)
            cov_f = _invert_information(sub)
        notes.extend(str(w.message) for w in caught)
        cov = np.zeros((n, n))
        cov[np.ix_(fidx, fidx)] = cov_f
        se = np.where(free, np.sqrt(np.diag(cov)), 0.0)

    active = _active_set(x, lower, G, g0, free)
    for msg in notes:
        warnings.warn(msg, FitWarning, stacklevel=2)
    return FitResult(
        spec=spec,
        params=model.unpack(x),
        loglik=float(ll_final),
        cov=cov,
        se=se,
        free=free,
        active=active,
        converged=converged,
        outer_iterations=outer,
        inner_iterations=inner_total,
        grad_norm=grad_norm,
        max_violation=viol,
        rule=options.rule,
        rule_final=rule_final,
        loglik_optim=float(ll_opt),
        n_clusters=model.n_clusters,
        n_obs=model.n_obs,
        fixed_names=fixed_names,
        warnings=tuple(notes),
    )


def fit(spec: ModelSpec, dataset, options: FitOptions | None = None) -> FitResult:
    """:func:`initial_params` followed by :func:`maximize`."""
    options = options or FitOptions()
    return maximize(spec, dataset, initial_params(spec, dataset, options), options)


def _active_set(x, lower, G, g0, free, tol=1e-6):
    active = free & np.isfinite(lower) & (x - lower <= tol * np.maximum(1.0, np.abs(lower)))
    if G.shape[0]:
        rows = (G @ x - g0) <= tol
        active |= np.any(G[rows] != 0, axis=0) & free
    return active


# ---------------------------------------------------------------------------
# observed information
# ---------------------------------------------------------------------------


def observed_information(spec: ModelSpec, dataset, params, free=None) -> np.ndarray:
    """Negative Hessian of the log-likelihood at ``params``.

    Central differences of the analytic score where it exists (step
    ``1e-5 * max(1, |x|)``), otherwise a four-point second difference of the
    log-likelihood (step ``1e-4 * max(1, |x|)``).  The result is symmetrised.

    Args:
        spec: model definition.
        dataset: Dataset, cluster list, or a prepared :class:`LikelihoodModel`.
        params: :class:`ParameterVector` or flat array.
        free: optional mask; only the free block is returned.
    """
    model = dataset if isinstance(dataset, LikelihoodModel) else LikelihoodModel(spec, _clusters(dataset))
    x = params.to_array() if isinstance(params, ParameterVector) else np.asarray(params, dtype=float)
    idx = np.arange(x.size) if free is None else np.flatnonzero(free)
    k = idx.size
    H = np.zeros((k, k))
    if model.has_analytic_score:
        for a, j in enumerate(idx):
            h = 1e-5 * max(1.0, abs(x[j]))
            xp, xm = x.copy(), x.copy()
            xp[j] += h
            xm[j] -= h
            H[:, a] = (model.score(xp, strict=False)[idx] - model.score(xm, strict=False)[idx]) / (2 * h)
    else:
        steps = 1e-4 * np.maximum(1.0, np.abs(x[idx]))

        def f(d):
            xx = x.copy()
            xx[idx] += d
            return model.loglik(xx, strict=False)

        for a in range(k):
            for b in range(a, k):
                ea = np.zeros(k)
                eb = np.zeros(k)
                ea[a] = steps[a]
                eb[b] = steps[b]
                val = (f(ea + eb) - f(ea - eb) - f(-ea + eb) + f(-ea - eb)) / (4 * steps[a] * steps[b])
                H[a, b] = H[b, a] = val
    H = 0.5 * (H + H.T)
    return -H


def _invert_information(info: np.ndarray) -> np.ndarray:
    """Inverse information with eigenvalues floored at zero."""
    if info.size == 0:
        return info.copy()
    vals, vecs = np.linalg.eigh(info)
    scale = max(np.max(np.abs(vals)), 1e-300)
    if np.min(vals) <= 1e-10 * scale:
        warnings.warn("observed information is singular or indefinite; using a pseudo-inverse", FitWarning, stacklevel=3)
    keep = vals > 1e-10 * scale
    inv = np.zeros_like(vals)
    inv[keep] = 1.0 / vals[keep]
    cov = (vecs * inv) @ vecs.T
    cov = 0.5 * (cov + cov.T)
    ev, evec = np.linalg.eigh(cov)
    cov = (evec * np.maximum(ev, 0.0)) @ evec.T
    return np.triu(cov) + np.triu(cov, 1).T
