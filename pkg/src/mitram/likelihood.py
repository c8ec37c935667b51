"""Exact log-likelihood of clustered transformation models.

For cluster ``i`` the latent vector

    z = D Phi^-1(F(D^-1 (A(y) theta - X beta)))

is ``N(0, Sigma_i)`` with ``Sigma_i = U Lambda Lambda^T U^T + I``.  ``D`` is the
identity (scheme ``M1``) or ``diag(Sigma_i)^1/2`` (scheme ``M2``).

Exact observations contribute the log-density of ``y``; interval
observations ``(lower, upper]`` contribute the log-probability of the
corresponding latent rectangle, reduced to an ``R``-dimensional integral
against the random-effects distribution.

Clusters are processed in batches of equal size.  The determinant and the
quadratic form of ``Sigma_i`` come from the Cholesky factor of the ``R x R``
capacitance matrix ``I + V^T V`` with ``V = U Lambda``; neither ``Sigma_i``
nor its inverse is formed.
"""

from __future__ import annotations

import logging
import math
from typing import NamedTuple
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import log_ndtr, logsumexp, ndtr

from .bases import BasisError, BasisKind, TransformationBasis, constraint_system, eval_basis, eval_basis_deriv
from .covariance import build_lambda, diag_positions, lower_indices, n_gamma
from .integrate import CubatureRule, normal_nodes
from .links import LOG_2PI, LinkFamily

log = logging.getLogger(__name__)

#: integrated probabilities are floored here before taking logs
PROB_FLOOR = 1e-300
#: elements of the (clusters x observations x nodes) work array per chunk
_CHUNK = 2_000_000
#: minimal latent interval width used at infeasible parameters
_EMPTY_WIDTH = 1e-9
#: Jacobian terms below this are extended quadratically off the feasible set
_JAC_FLOOR = 1e-12


class InvalidParameterError(ValueError):
    """Parameters outside the admissible set (e.g. a non-positive Jacobian)."""


class DegenerateIntervalError(ValueError):
    """An interval probability evaluated to zero."""


class UnsupportedLinkError(NotImplementedError):
    pass


class Marginalization(str, Enum):
    M1 = "M1"
    M2 = "M2"


@dataclass
class ClusterData:
    """Observations of one cluster.

    Exact observations have ``y_lower == y_upper``; interval observations
    ``y_lower < y_upper`` with ``-inf``/``inf`` for open ends.  A cluster is
    either entirely exact or entirely interval-valued.

    Ordinal responses are stored as category-index bounds ``(k - 1, k]``,
    where index ``0`` is ``-inf`` and index ``K`` is ``inf``.
    """

    cluster_id: str
    y_lower: np.ndarray
    y_upper: np.ndarray
    X: np.ndarray
    U: np.ndarray
    strata: np.ndarray | None = None

    def __post_init__(self):
        self.cluster_id = str(self.cluster_id)
        self.y_lower = np.asarray(self.y_lower, dtype=float).ravel()
        self.y_upper = np.asarray(self.y_upper, dtype=float).ravel()
        n = self.y_lower.size
        self.X = np.asarray(self.X, dtype=float).reshape(n, -1)
        self.U = np.asarray(self.U, dtype=float).reshape(n, -1)
        if self.y_upper.size != n or n == 0:
            raise ValueError(f"cluster {self.cluster_id}: bounds must be non-empty and of equal length")
        if self.strata is not None:
            self.strata = np.asarray(self.strata, dtype=int).ravel()
            if self.strata.size != n:
                raise ValueError(f"cluster {self.cluster_id}: strata length mismatch")
        if np.any(np.isnan(self.y_lower)) or np.any(np.isnan(self.y_upper)):
            raise ValueError(f"cluster {self.cluster_id}: missing response")
        if np.any(self.y_lower > self.y_upper):
            raise ValueError(f"cluster {self.cluster_id}: lower bound exceeds upper bound")
        equal = self.y_lower == self.y_upper
        if equal.any() and not equal.all():
            raise ValueError(
                f"cluster {self.cluster_id}: mixes exact and interval observations, which is not supported"
            )
        if equal.all() and not np.all(np.isfinite(self.y_lower)):
            raise ValueError(f"cluster {self.cluster_id}: exact observations must be finite")

    @classmethod
    def from_exact(cls, cluster_id, y, X, U, strata=None) -> "ClusterData":
        y = np.asarray(y, dtype=float)
        return cls(cluster_id, y, y.copy(), X, U, strata)

    @property
    def size(self) -> int:
        return self.y_lower.size

    @property
    def exact(self) -> bool:
        return bool(self.y_lower[0] == self.y_upper[0])

    def permuted(self, order) -> "ClusterData":
        """Copy with rows reordered consistently."""
        order = np.asarray(order)
        strata = None if self.strata is None else self.strata[order]
        return ClusterData(self.cluster_id, self.y_lower[order], self.y_upper[order], self.X[order], self.U[order], strata)


@dataclass(frozen=True)
class ModelSpec:
    """Model definition: basis, inverse link, marginalisation scheme, random-effects dimension.

    With ``n_strata > 1`` every stratum gets its own block of ``theta``.
    """

    basis: TransformationBasis
    link: LinkFamily
    marginalization: Marginalization = Marginalization.M1
    R: int = 1
    n_strata: int = 1

    def __post_init__(self):
        object.__setattr__(self, "marginalization", Marginalization(self.marginalization))
        if self.R < 1:
            raise ValueError("at least one random-effects column is required")
        if self.n_strata < 1:
            raise ValueError("n_strata must be positive")

    @property
    def P(self) -> int:
        return self.basis.dim * self.n_strata

    @property
    def M(self) -> int:
        return n_gamma(self.R)

    def constraints(self) -> tuple[np.ndarray, np.ndarray]:
        """Block-diagonal monotonicity system over the stacked ``theta``."""
        K, k0 = constraint_system(self.basis)
        p = self.basis.dim
        big = np.zeros((K.shape[0] * self.n_strata, self.P))
        for s in range(self.n_strata):
            big[s * K.shape[0] : (s + 1) * K.shape[0], s * p : (s + 1) * p] = K
        return big, np.tile(k0, self.n_strata)

    def with_basis(self, basis: TransformationBasis) -> "ModelSpec":
        return ModelSpec(basis, self.link, self.marginalization, self.R, self.n_strata)


@dataclass(frozen=True)
class ParameterVector:
    """Concatenated ``(theta, beta, gamma)`` with offsets ``0, P, P + Q``."""

    theta: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        for name in ("theta", "beta", "gamma"):
            arr = np.array(getattr(self, name), dtype=float).ravel()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def layout(self) -> tuple[int, int, int]:
        return self.theta.size, self.beta.size, self.gamma.size

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.theta, self.beta, self.gamma])

    @classmethod
    def from_array(cls, x, P: int, Q: int, M: int) -> "ParameterVector":
        x = np.asarray(x, dtype=float).ravel()
        if x.size != P + Q + M:
            raise ValueError(f"expected {P + Q + M} parameters, got {x.size}")
        return cls(x[:P], x[P : P + Q], x[P + Q :])

    def lam(self, R: int, strict: bool = True) -> np.ndarray:
        return build_lambda(self.gamma, R, strict=strict)

    def is_admissible(self, spec: ModelSpec, tol: float = 0.0) -> bool:
        K, k0 = spec.constraints()
        ok_theta = np.all(K @ self.theta >= k0 - tol) if K.size else True
        ok_gamma = np.all(self.gamma[diag_positions(spec.R)] >= -tol)
        return bool(ok_theta and ok_gamma)


def parameter_names(spec: ModelSpec, fixed_names) -> list[str]:
    p = spec.basis.dim
    theta = []
    for s in range(spec.n_strata):
        for j in range(p):
            theta.append(f"theta{j + 1}" if spec.n_strata == 1 else f"theta{j + 1}[{s + 1}]")
    gamma = [f"gamma{m + 1}" for m in range(spec.M)]
    return theta + [f"beta:{n}" for n in fixed_names] + gamma


# ---------------------------------------------------------------------------
# design arrays
# ---------------------------------------------------------------------------


def _basis_rows(spec: ModelSpec, y: np.ndarray, strata: np.ndarray | None, deriv: bool = False) -> np.ndarray:
    """Stacked-theta design rows for finite ``y`` (rows for infinite ``y`` are zero)."""
    basis = spec.basis
    n = y.size
    out = np.zeros((n, spec.P))
    finite = np.isfinite(y)
    if basis.kind is BasisKind.LOGLINEAR and not deriv:
        # a lower bound at or below zero carries no information
        finite &= y > 0
    if finite.any():
        rows = eval_basis_deriv(basis, y[finite]) if deriv else eval_basis(basis, y[finite])
        p = basis.dim
        s = np.zeros(n, dtype=int) if strata is None else strata
        if np.any((s < 0) | (s >= spec.n_strata)):
            raise ValueError("stratum index out of range")
        fidx = np.flatnonzero(finite)
        for k in range(p):
            out[fidx, s[fidx] * p + k] = rows[:, k]
    return out


@dataclass
class _Group:
    ids: list
    n: int
    X: np.ndarray
    U: np.ndarray
    A_lo: np.ndarray
    A_up: np.ndarray
    A_d: np.ndarray | None
    lo_inf: np.ndarray
    up_inf: np.ndarray


def _build_groups(spec: ModelSpec, clusters) -> list[_Group]:
    by_size: dict[int, list[ClusterData]] = {}
    for c in sorted(clusters, key=lambda c: c.cluster_id):
        if c.U.shape[1] != spec.R:
            raise ValueError(f"cluster {c.cluster_id}: expected {spec.R} random-effects columns, got {c.U.shape[1]}")
        by_size.setdefault(c.size, []).append(c)
    groups = []
    for n in sorted(by_size):
        cs = by_size[n]
        exact = cs[0].exact
        lo_inf = np.array([np.isneginf(c.y_lower) for c in cs])
        up_inf = np.array([np.isposinf(c.y_upper) for c in cs])
        if spec.basis.kind is BasisKind.LOGLINEAR:
            lo_inf |= np.array([c.y_lower <= 0 for c in cs])
        A_lo = np.array([_basis_rows(spec, c.y_lower, c.strata) for c in cs])
        A_up = A_lo if exact else np.array([_basis_rows(spec, c.y_upper, c.strata) for c in cs])
        A_d = np.array([_basis_rows(spec, c.y_lower, c.strata, deriv=True) for c in cs]) if exact else None
        groups.append(
            _Group(
                ids=[c.cluster_id for c in cs],
                n=n,
                X=np.array([c.X for c in cs]),
                U=np.array([c.U for c in cs]),
                A_lo=A_lo,
                A_up=A_up,
                A_d=A_d,
                lo_inf=lo_inf,
                up_inf=up_inf,
            )
        )
    return groups


# ---------------------------------------------------------------------------
# numerics
# ---------------------------------------------------------------------------


def _log_ndtr(x):
    """``log Phi(x)``; the plain form away from the lower tail is twice as fast."""
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore"):
        out = np.log(ndtr(x))
    tail = x < -30.0
    if np.any(tail):
        out[tail] = log_ndtr(x[tail])
    return out


def log_interval_prob(a, b):
    """``log(Phi(b) - Phi(a))`` for ``a <= b`` without cancellation in the tails."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    flip = a > 0
    lo = np.where(flip, -b, a)
    hi = np.where(flip, -a, b)
    # direct difference unless it cancels or underflows
    pb = ndtr(hi)
    d = pb - ndtr(lo)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(d)
    width = hi - lo
    mid = 0.5 * (hi + lo)
    narrow = width * (1.0 + np.abs(mid)) < 1e-3
    slow = ((d <= 0.01 * pb) | (pb < 1e-250)) & ~narrow
    if np.any(narrow):
        # midpoint expansion of the integral of phi; relative error O(w^4)
        m, w = mid[narrow], width[narrow]
        with np.errstate(divide="ignore"):
            out[narrow] = -0.5 * (m * m + LOG_2PI) + np.log(w) + np.log1p((m * m - 1.0) * w * w / 24.0)
    if np.any(slow):
        ls, hs = lo[slow], hi[slow]
        la = log_ndtr(ls)
        lb = log_ndtr(hs)
        with np.errstate(divide="ignore", invalid="ignore"):
            out[slow] = np.where(ls == hs, -np.inf, lb + np.log(-np.expm1(la - lb)))
    return out


def _log_jacobian(hd: np.ndarray, strict: bool):
    """Sum of ``log(h'(y))`` and its derivative in ``h'``.

    Off the feasible set (``strict=False``) values below the floor are
    continued by a quadratic Taylor polynomial of ``log``.
    """
    if np.all(hd > _JAC_FLOOR):
        return np.log(hd), 1.0 / hd
    if strict:
        raise InvalidParameterError("transformation is not increasing at an observation (a'(y) theta <= 0)")
    t = hd / _JAC_FLOOR - 1.0
    low = hd <= _JAC_FLOOR
    safe = np.where(low, 1.0, hd)
    val = np.where(low, np.log(_JAC_FLOOR) + t - 0.5 * t * t, np.log(safe))
    der = np.where(low, (1.0 - t) / _JAC_FLOOR, 1.0 / safe)
    return val, der


def _capacitance(V: np.ndarray):
    """Batched ``I + V^T V`` and its log-determinant."""
    R = V.shape[-1]
    K = np.eye(R) + np.einsum("cnr,cns->crs", V, V)
    L = np.linalg.cholesky(K)
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    return K, logdet


class LikelihoodModel:
    """Log-likelihood and score over a fixed set of clusters.

    Basis evaluations are precomputed; parameters are passed as flat arrays
    in ``(theta, beta, gamma)`` order.

    Args:
        spec: model definition.
        clusters: iterable of :class:`ClusterData`, all exact or all interval.
        rule: integration rule for interval data.
    """

    def __init__(self, spec: ModelSpec, clusters, rule: CubatureRule | None = None):
        clusters = list(clusters)
        if not clusters:
            raise ValueError("no clusters")
        kinds = {c.exact for c in clusters}
        if len(kinds) != 1:
            raise ValueError("all clusters must be of the same type (exact or interval)")
        self.spec = spec
        self.exact = kinds.pop()
        if self.exact and spec.basis.kind is BasisKind.ORDINAL:
            raise BasisError("ordinal responses are interval-valued")
        Qs = {c.X.shape[1] for c in clusters}
        if len(Qs) != 1:
            raise ValueError("clusters disagree on the number of fixed effects")
        self.Q = Qs.pop()
        self.rule = rule or CubatureRule()
        self.groups = _build_groups(spec, clusters)
        self.cluster_ids = [cid for g in self.groups for cid in g.ids]
        self.n_clusters = len(self.cluster_ids)
        self.n_obs = sum(g.n * len(g.ids) for g in self.groups)
        self.clamp_count = 0

    @property
    def n_params(self) -> int:
        return self.spec.P + self.Q + self.spec.M

    @property
    def has_analytic_score(self) -> bool:
        """Probit models for exact data and every model for interval data."""
        return not self.exact or self.spec.link.is_probit

    def unpack(self, x) -> ParameterVector:
        return ParameterVector.from_array(x, self.spec.P, self.Q, self.spec.M)

    def with_rule(self, rule: CubatureRule) -> "LikelihoodModel":
        clone = object.__new__(LikelihoodModel)
        clone.__dict__.update(self.__dict__)
        clone.rule = rule
        clone.clamp_count = 0
        return clone

    # -- evaluation ---------------------------------------------------------

    def contributions(self, x, strict: bool = True) -> np.ndarray:
        """Per-cluster log-likelihood in :attr:`cluster_ids` order."""
        p = self.unpack(x)
        lam = p.lam(self.spec.R, strict=strict)
        parts = []
        for g in self.groups:
            if self.exact:
                parts.append(self._exact_group(g, p, lam, strict)[0])
            else:
                parts.append(self._interval_group(g, p, lam, strict))
        return np.concatenate(parts)

    def loglik(self, x, strict: bool = True) -> float:
        # exactly rounded sum: independent of cluster order
        return math.fsum(self.contributions(x, strict))

    def score(self, x, strict: bool = True) -> np.ndarray:
        if self.has_analytic_score:
            return self.analytic_score(x, strict)
        return self.numeric_score(x, strict)

    def loglik_and_score(self, x, strict: bool = True) -> tuple[float, np.ndarray]:
        """Log-likelihood and score; one pass over the data when the score is analytic."""
        if self.has_analytic_score:
            return self._analytic(x, strict)
        return self.loglik(x, strict), self.numeric_score(x, strict)

    def numeric_score(self, x, strict: bool = True) -> np.ndarray:
        """Central differences with step ``1e-6 * max(1, |x_j|)``."""
        x = np.asarray(x, dtype=float)
        g = np.empty_like(x)
        for j in range(x.size):
            h = 1e-6 * max(1.0, abs(x[j]))
            xp, xm = x.copy(), x.copy()
            xp[j] += h
            xm[j] -= h
            g[j] = (self.loglik(xp, strict) - self.loglik(xm, strict)) / (2.0 * h)
        return g

    def analytic_score(self, x, strict: bool = True) -> np.ndarray:
        return self._analytic(x, strict)[1]

    def _analytic(self, x, strict: bool) -> tuple[float, np.ndarray]:
        if not self.has_analytic_score:
            raise UnsupportedLinkError("analytic scores for exact data are available under the probit link only")
        p = self.unpack(x)
        R = self.spec.R
        lam = p.lam(R, strict=strict)
        g_theta = np.zeros(self.spec.P)
        g_beta = np.zeros(self.Q)
        g_lam = np.zeros((R, R))
        vals = []
        for g in self.groups:
            if self.exact:
                val, parts = self._exact_group(g, p, lam, strict, want_score=True)
            else:
                val, parts = self._interval_group(g, p, lam, strict, want_score=True)
            vals.append(val)
            g_theta += parts[0]
            g_beta += parts[1]
            g_lam += parts[2]
        ll = math.fsum(np.concatenate(vals)) if vals else 0.0
        return ll, np.concatenate([g_theta, g_beta, g_lam[lower_indices(R)]])

    def _exact_group(self, g: _Group, p: ParameterVector, lam, strict, want_score=False):
        link = self.spec.link
        e = g.A_lo @ p.theta - g.X @ p.beta
        hd = g.A_d @ p.theta
        V = g.U @ lam
        if self.spec.marginalization is Marginalization.M2:
            dg = np.sqrt(1.0 + np.sum(V * V, axis=-1))
            arg = e / dg
        else:
            dg = None
            arg = e
        w = link.to_probit(arg)
        z = w if dg is None else dg * w
        K, logdet = _capacitance(V)
        b = np.einsum("cnr,cn->cr", V, z)
        Kinv_b = np.linalg.solve(K, b[..., None])[..., 0]
        quad = np.sum(z * z, axis=1) - np.sum(b * Kinv_b, axis=1)
        logjac, djac = _log_jacobian(hd, strict)
        ll = (
            -0.5 * logdet
            - 0.5 * quad
            + 0.5 * np.sum(w * w, axis=1)
            + np.sum(link.logpdf(arg), axis=1)
            + np.sum(logjac, axis=1)
        )
        if not want_score:
            return ll, None
        # probit: z = e and the log-likelihood is -1/2 log|S| - 1/2 e'S^-1 e + sum log h' + const
        r = z - np.einsum("cnr,cr->cn", V, Kinv_b)
        g_theta = -np.einsum("cnp,cn->p", g.A_lo, r) + np.einsum("cnp,cn->p", g.A_d, djac)
        g_beta = np.einsum("cnq,cn->q", g.X, r)
        UtU = np.einsum("cnr,cns->crs", g.U, g.U)
        UtV = np.einsum("cnr,cns->crs", g.U, V)
        UtSU = UtU - UtV @ np.linalg.solve(K, np.swapaxes(UtV, -1, -2))
        s = np.einsum("cnr,cn->cr", g.U, r)
        G = -np.sum(UtSU, axis=0) @ lam + np.einsum("cr,cs->rs", s, s) @ lam
        return ll, (g_theta, g_beta, G)

    def _latent(self, e, dg, want_grad=False):
        """``z`` from ``e`` and, optionally, ``dz/de`` and ``dz/dD`` (zero at infinite ``e``)."""
        link = self.spec.link
        arg = e if dg is None else e / dg
        w = link.to_probit(arg)
        z = w if dg is None else dg * w
        if not want_grad:
            return z, None, None
        finite = np.isfinite(e)
        if link.is_probit:
            rho = np.where(finite, 1.0, 0.0)
        else:
            safe_arg = np.where(finite, arg, 0.0)
            safe_w = np.where(finite, w, 0.0)
            rho = np.where(finite, np.exp(link.logpdf(safe_arg) + 0.5 * (safe_w * safe_w + LOG_2PI)), 0.0)
        dd = None
        if dg is not None:
            dd = np.where(finite, np.where(finite, w, 0.0) - np.where(finite, arg, 0.0) * rho, 0.0)
        return z, rho, dd

    def bounds_z(self, g: _Group, p: ParameterVector, lam, want_grad=False):
        """Latent bounds ``(z_lower, z_upper)`` for one group, shape ``(C, n)``.

        With ``want_grad`` also returns the derivatives of each bound with
        respect to its linear predictor and to ``D``, and ``D`` itself.
        """
        xb = g.X @ p.beta
        e_lo = np.where(g.lo_inf, -np.inf, g.A_lo @ p.theta - xb)
        e_up = np.where(g.up_inf, np.inf, g.A_up @ p.theta - xb)
        dg = None
        if self.spec.marginalization is Marginalization.M2:
            V = g.U @ lam
            dg = np.sqrt(1.0 + np.sum(V * V, axis=-1))
        z_lo, r_lo, d_lo = self._latent(e_lo, dg, want_grad)
        z_up, r_up, d_up = self._latent(e_up, dg, want_grad)
        if want_grad:
            return z_lo, z_up, (r_lo, d_lo, r_up, d_up, dg)
        return z_lo, z_up

    def _interval_group(self, g: _Group, p: ParameterVector, lam, strict: bool = True, want_score=False):
        out = self.bounds_z(g, p, lam, want_score)
        z_lo, z_up = out[0], out[1]
        if not strict:
            # off the feasible set an empty latent interval is widened minimally
            finite = np.isfinite(z_lo) & np.isfinite(z_up)
            z_up = np.where(finite, np.maximum(z_up, z_lo + _EMPTY_WIDTH * (1.0 + np.abs(np.where(finite, z_lo, 0.0)))), z_up)
        if np.any(z_lo >= z_up):
            bad = np.argwhere(z_lo >= z_up)[0]
            raise DegenerateIntervalError(f"cluster {g.ids[bad[0]]}: empty latent interval at parameters given")
        V = g.U @ lam
        C, n = z_lo.shape
        R = self.spec.R
        val = np.empty(C)
        g_up = np.zeros((C, n))
        g_lo = np.zeros((C, n))
        g_v = np.zeros((C, n, R))
        if not np.any(V):
            # independence: one node; the first derivative in Lambda vanishes by symmetry
            lp = _log_rect_terms(z_lo[..., None], z_up[..., None], g.lo_inf, g.up_inf)[..., 0]
            val[:] = np.sum(lp, axis=1)
            if want_score:
                g_up = _mills(z_up, lp, g.up_inf)
                g_lo = -_mills(z_lo, lp, g.lo_inf)
        else:
            W, wts = normal_nodes(self.rule, R)
            log_w = np.log(np.abs(wts))
            sign_w = np.sign(wts)
            uniform = bool(np.all(wts == wts[0]))
            adaptive = self.rule.adaptive
            if adaptive:
                fr = _posterior_frame(V, z_lo, z_up, g.lo_inf, g.up_inf, laplace=self.rule.kind == "sparse")
                mu, Lc, logdet = fr.mu, fr.L, fr.logdet
                half_t = 0.5 * np.sum(W * W, axis=1)
                if want_score:
                    a_mu = np.zeros((C, R))
                    B_L = np.zeros((C, R, R))
            step = max(1, _CHUNK // (n * W.shape[0]))
            for c0 in range(0, C, step):
                sl = slice(c0, c0 + step)
                if adaptive:
                    # w = mu + L t; the weight gains |L| phi(w) / phi(t)
                    Wc = mu[sl][:, None, :] + W @ np.swapaxes(Lc[sl], 1, 2)
                    S = V[sl] @ np.swapaxes(Wc, 1, 2)
                    shift = logdet[sl][:, None] - 0.5 * np.sum(Wc * Wc, axis=2) + half_t
                else:
                    S = V[sl] @ W.T
                    shift = 0.0
                lo = z_lo[sl][..., None] - S
                up = z_up[sl][..., None] - S
                terms = _log_rect_terms(lo, up, g.lo_inf[sl], g.up_inf[sl])
                T = np.sum(terms, axis=1) + shift
                if uniform:
                    v = logsumexp(T, axis=1) + log_w[0]
                    sgn = np.ones(T.shape[0])
                else:
                    v, sgn = logsumexp(T + log_w, axis=1, b=sign_w, return_sign=True)
                bad = (sgn <= 0) | ~np.isfinite(v) | (v < np.log(PROB_FLOOR))
                if np.any(bad):
                    self.clamp_count += int(bad.sum())
                    log.debug("integrated probability floored for %d clusters", int(bad.sum()))
                    v = np.where(bad, np.log(PROB_FLOOR), v)
                val[sl] = v
                if want_score:
                    # posterior node weights; clamped clusters contribute no gradient
                    with np.errstate(over="ignore", invalid="ignore"):
                        post = np.where(bad[:, None], 0.0, sign_w * np.exp(T + log_w - v[:, None]))
                    m_up = _mills(up, terms, g.up_inf[sl])
                    m_lo = _mills(lo, terms, g.lo_inf[sl])
                    g_up[sl] = (m_up @ post[..., None])[..., 0]
                    g_lo[sl] = -(m_lo @ post[..., None])[..., 0]
                    weighted = (m_lo - m_up) * post[:, None, :]
                    DW = weighted @ W
                    if not adaptive:
                        g_v[sl] = DW
                        continue
                    Dpi = weighted.sum(axis=2)
                    g_v[sl] = Dpi[..., None] * mu[sl][:, None, :] + DW @ np.swapaxes(Lc[sl], 1, 2)
                    # log-derivatives of the estimate in mu and L from the node
                    # scores s_k = sum_j v_j D_jk - w_k
                    pw = np.einsum("ck,ckr->cr", post, Wc)
                    pwt = np.einsum("ck,ckr,ks->crs", post, Wc, W)
                    a_mu[sl] = np.einsum("cn,cnr->cr", Dpi, V[sl]) - pw
                    B_L[sl] = (np.einsum("cnr,cns->crs", V[sl], DW) - pwt
                               + np.where(bad[:, None, None], 0.0, fr.M[sl]))
            if want_score and adaptive:
                c_lo, c_up, c_v = _frame_correction(fr, V, a_mu, B_L)
                g_lo += c_lo
                g_up += c_up
                g_v += c_v
        if not want_score:
            return val
        r_lo, d_lo, r_up, d_up, dg = out[2]
        ge_up = g_up * r_up
        ge_lo = g_lo * r_lo
        gt = np.einsum("cnp,cn->p", g.A_up, ge_up) + np.einsum("cnp,cn->p", g.A_lo, ge_lo)
        gb = -np.einsum("cnq,cn->q", g.X, ge_up + ge_lo)
        if dg is not None:
            g_v = g_v + ((g_up * d_up + g_lo * d_lo) / dg)[..., None] * V
        G = np.einsum("cnr,cns->rs", g.U, g_v)
        return val, (gt, gb, G)


class _Frame(NamedTuple):
    """Adaptive frame of one batch of clusters and the local terms at the mode."""

    mu: np.ndarray  # C x R mode
    L: np.ndarray  # C x R x R, L L^T = N^-1
    M: np.ndarray  # C x R x R Cholesky factor of N
    logdet: np.ndarray  # log|L|
    curv: np.ndarray  # C x n rows entering N
    d1: np.ndarray  # first derivative of psi per row at the mode
    d2: np.ndarray  # second derivative
    d1_a: np.ndarray  # partials of d1 and d2 in the lower and upper bound
    d1_b: np.ndarray
    d2_a: np.ndarray
    d2_b: np.ndarray


def _rect_derivatives(a, b, lp, lo_inf, up_inf):
    """Derivatives of ``psi(s) = log(Phi(b - s) - Phi(a - s))`` in ``s`` and in the bounds.

    Returns ``psi'``, ``psi''`` and the partials of both in ``a`` and ``b``.
    Infinite bounds contribute nothing.
    """
    with np.errstate(invalid="ignore", over="ignore"):
        ma = _mills(a, lp, lo_inf)
        mb = _mills(b, lp, up_inf)
        aa = np.where(lo_inf, 0.0, a)
        bb = np.where(up_inf, 0.0, b)
        d1 = ma - mb
        d2 = np.minimum(aa * ma - bb * mb - d1 * d1, 0.0)
        d1_a = ma * (d1 - aa)
        d1_b = mb * (bb - d1)
        d2_a = ma + aa * ma * (ma - aa) - bb * ma * mb - 2.0 * d1 * d1_a
        d2_b = -mb - aa * ma * mb + bb * mb * (bb + mb) - 2.0 * d1 * d1_b
    return tuple(np.nan_to_num(x, nan=0.0, posinf=0.0, neginf=0.0) for x in (d1, d2, d1_a, d1_b, d2_a, d2_b))


def _posterior_frame(V, z_lo, z_up, lo_inf, up_inf, laplace: bool = True, max_iter: int = 60) -> _Frame:
    """Mode and inverse-curvature factor of ``w -> log P(z | w) - |w|^2 / 2``.

    ``P(z | w) = prod_j [Phi(z_up_j - v_j w) - Phi(z_lo_j - v_j w)]`` is
    log-concave in ``w``, so damped Newton from ``w = 0`` converges to the
    unique mode ``mu``.  ``L`` is the transposed inverse Cholesky factor of
    the curvature ``N = I - sum_j psi''_j v_j v_j^T`` at the mode.

    With ``laplace=False`` one-sided (censored) terms are left out of the
    curvature.  Such a term is flat on its open side, so the Laplace scale
    is lighter-tailed than the integrand and the importance ratio grows
    like ``exp(c t^2)``; without those terms the ratio stays bounded, which
    is what equal-weight QMC needs.  Gauss-Hermite rules instead need the
    scale to match the posterior and use the full curvature.
    """
    C, n, R = V.shape
    eye = np.eye(R)

    def evaluate(w):
        s = np.einsum("cnr,cr->cn", V, w)
        a = z_lo - s
        b = z_up - s
        lp = _log_rect_terms(a[..., None], b[..., None], lo_inf, up_inf)[..., 0]
        return a, b, lp, np.sum(lp, axis=1) - 0.5 * np.sum(w * w, axis=1)

    w = np.zeros((C, R))
    a, b, lp, obj = evaluate(w)
    for _ in range(max_iter):
        d1, d2 = _rect_derivatives(a, b, lp, lo_inf, up_inf)[:2]
        grad = np.einsum("cn,cnr->cr", d1, V) - w
        neg_h = eye - np.einsum("cn,cnr,cns->crs", d2, V, V)
        step = np.linalg.solve(neg_h, grad[..., None])[..., 0]
        t = np.ones(C)
        for _ in range(50):
            w_new = w + t[:, None] * step
            a_n, b_n, lp_n, obj_n = evaluate(w_new)
            worse = ~(obj_n >= obj - 1e-13 * np.abs(obj)) & np.isfinite(obj)
            if not worse.any():
                break
            t = np.where(worse, 0.5 * t, t)
        else:
            keep = worse
            w_new[keep] = w[keep]
            a_n[keep], b_n[keep], lp_n[keep], obj_n[keep] = a[keep], b[keep], lp[keep], obj[keep]
        moved = np.max(np.abs(w_new - w))
        w, a, b, lp, obj = w_new, a_n, b_n, lp_n, obj_n
        if moved < 1e-10:
            break
    d1, d2, d1_a, d1_b, d2_a, d2_b = _rect_derivatives(a, b, lp, lo_inf, up_inf)
    curv = np.broadcast_to(np.ones((C, n), dtype=bool) if laplace else ~(lo_inf ^ up_inf), (C, n))
    neg_h = eye - np.einsum("cn,cnr,cns->crs", np.where(curv, d2, 0.0), V, V)
    M = np.linalg.cholesky(neg_h)
    # L = M^-T so that L L^T = (M M^T)^-1
    L = np.swapaxes(np.linalg.inv(M), -1, -2)
    logdet = -np.sum(np.log(np.diagonal(M, axis1=-2, axis2=-1)), axis=-1)
    return _Frame(w, L, M, logdet, curv, d1, d2, d1_a, d1_b, d2_a, d2_b)


def _frame_correction(fr: _Frame, V, a_mu, B_L):
    """Derivative of the rule estimate through the frame.

    The estimate depends on the parameters also through ``mu`` and ``L``;
    ``a_mu`` and ``B_L`` are its log-derivatives in these (per cluster).
    ``L`` follows the curvature ``N`` (Cholesky derivative) and ``mu`` follows
    the parameters by the implicit function theorem, applied in adjoint
    form.  Returns the extra derivatives in ``z_lo``, ``z_up`` and ``V``.
    """
    L, M = fr.L, fr.M
    Lt = np.swapaxes(L, 1, 2)
    # B : dL = <dN, E> with E = -L Phi(M^T L B^T L) L^T, Phi = lower part, half diagonal
    Y = np.swapaxes(M, 1, 2) @ L @ np.swapaxes(B_L, 1, 2) @ L
    half = np.tril(Y, -1) + 0.5 * np.einsum("crr->cr", Y)[..., None] * np.eye(Y.shape[-1])
    E = -L @ half @ Lt
    E = 0.5 * (E + np.swapaxes(E, 1, 2))
    c = fr.curv
    Ev = np.einsum("crs,cns->cnr", E, V)
    q = np.where(c, np.einsum("cnr,cnr->cn", V, Ev), 0.0)
    d3 = -(fr.d2_a + fr.d2_b)  # third derivative of psi in s
    # total derivative in mu, including the curvature's dependence on it
    a_tot = a_mu - np.einsum("cn,cnr->cr", q * d3, V)
    n_full = np.eye(V.shape[-1]) - np.einsum("cn,cnr,cns->crs", fr.d2, V, V)
    lam = np.linalg.solve(n_full, a_tot[..., None])[..., 0]
    lv = np.einsum("cr,cnr->cn", lam, V)
    g_lo = lv * fr.d1_a - q * fr.d2_a
    g_up = lv * fr.d1_b - q * fr.d2_b
    g_v = (lam[:, None, :] * fr.d1[..., None]
           + (lv * fr.d2 - q * d3)[..., None] * fr.mu[:, None, :]
           - 2.0 * np.where(c, fr.d2, 0.0)[..., None] * Ev)
    return g_lo, g_up, g_v


def _mills(x, logp, inf_mask):
    """``phi(x) / P`` from ``log P``; zero where the bound is infinite.

    ``inf_mask`` broadcasts against ``x`` over the leading axes.
    """
    fin = ~np.broadcast_to(inf_mask, x.shape[: np.ndim(inf_mask)])
    out = np.zeros(x.shape)
    if fin.all():
        xs, lp = x, logp
    else:
        xs, lp = x[fin], logp[fin]
    with np.errstate(over="ignore"):
        val = np.exp(-0.5 * (xs * xs + LOG_2PI) - lp)
    if fin.all():
        return val
    out[fin] = val
    return out


def _log_rect_terms(lo, up, lo_inf, up_inf):
    """``log(Phi(up) - Phi(lo))`` with one-sided rows using a single ``log_ndtr``."""
    C, n, K = lo.shape
    out = np.zeros((C, n, K))
    one_up = lo_inf & ~up_inf
    one_lo = up_inf & ~lo_inf
    both = ~lo_inf & ~up_inf
    if one_up.any():
        out[one_up] = _log_ndtr(up[one_up])
    if one_lo.any():
        out[one_lo] = _log_ndtr(-lo[one_lo])
    if both.any():
        out[both] = log_interval_prob(lo[both], up[both])
    return out


# ---------------------------------------------------------------------------
# per-cluster operations
# ---------------------------------------------------------------------------


def z_transform(spec: ModelSpec, params: ParameterVector, cluster: ClusterData, bound: str = "lower") -> np.ndarray:
    """Latent values ``z(y)`` of one cluster at its lower or upper bounds."""
    if bound not in ("lower", "upper"):
        raise ValueError("bound must be 'lower' or 'upper'")
    model = LikelihoodModel(spec, [cluster])
    g = model.groups[0]
    lam = params.lam(spec.R, strict=False)
    z_lo, z_up = model.bounds_z(g, params, lam)
    z = (z_lo if bound == "lower" else z_up)[0]
    if np.any(np.isnan(z)):
        raise InvalidParameterError("non-finite latent value")
    return z


def loglik_continuous(spec: ModelSpec, params: ParameterVector, cluster: ClusterData) -> float:
    if not cluster.exact:
        raise ValueError("loglik_continuous needs exact observations")
    return LikelihoodModel(spec, [cluster]).loglik(params.to_array())


def score_continuous(spec: ModelSpec, params: ParameterVector, cluster: ClusterData) -> np.ndarray:
    if not cluster.exact:
        raise ValueError("score_continuous needs exact observations")
    if not spec.link.is_probit:
        raise UnsupportedLinkError("analytic scores exist for the probit link only; use finite differences")
    return LikelihoodModel(spec, [cluster]).analytic_score(params.to_array())


def loglik_censored(spec: ModelSpec, params: ParameterVector, cluster: ClusterData, rule: CubatureRule | None = None) -> float:
    if cluster.exact:
        raise ValueError("loglik_censored needs interval observations")
    model = LikelihoodModel(spec, [cluster], rule)
    val = model.loglik(params.to_array())
    if model.clamp_count:
        raise DegenerateIntervalError(f"cluster {cluster.cluster_id}: integrated probability is not positive")
    return val


def total_loglik(spec: ModelSpec, params: ParameterVector, dataset, rule: CubatureRule | None = None) -> float:
    """Sum of cluster contributions; ``dataset`` is a Dataset or iterable of clusters."""
    clusters = getattr(dataset, "clusters", dataset)
    return LikelihoodModel(spec, clusters, rule).loglik(params.to_array())
