"""Parametric bases for monotone transformation functions.

A transformation function is written as ``h(y) = a(y) @ theta`` where
``a`` maps a response value to a ``P``-vector of basis functions.  Each
basis knows its derivative in ``y`` and the linear inequality system
``K @ theta >= k0`` that keeps ``h`` non-decreasing.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import comb

#: slack on monotonicity constraints; keeps log(a'(y) @ theta) finite
MONOTONE_EPS = 1e-8


class BasisError(ValueError):
    """Raised for responses outside the domain of a basis."""


class BasisKind(str, Enum):
    LINEAR = "linear"
    LOGLINEAR = "loglinear"
    BERNSTEIN = "bernstein"
    ORDINAL = "ordinal"


@dataclass(frozen=True)
class TransformationBasis:
    """Basis ``a(y)`` of a transformation function ``h(y) = a(y) @ theta``.

    Args:
        kind: one of :class:`BasisKind`.
        order: polynomial degree for Bernstein bases, number of
            thresholds (categories - 1) for ordinal bases; ignored otherwise.
        support: ``(lo, hi)`` interval of a Bernstein basis.  ``None``
            until resolved from data (see :func:`with_data_support`).
        clamp: evaluate Bernstein bases outside the support at the
            nearest boundary instead of raising.
    """

    kind: BasisKind
    order: int = 1
    support: tuple[float, float] | None = None
    clamp: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kind", BasisKind(self.kind))
        if self.order < 1:
            raise BasisError(f"basis order must be >= 1, got {self.order}")
        if self.support is not None:
            lo, hi = map(float, self.support)
            if not hi > lo:
                raise BasisError(f"empty support [{lo}, {hi}]")
            object.__setattr__(self, "support", (lo, hi))

    @property
    def dim(self) -> int:
        if self.kind in (BasisKind.LINEAR, BasisKind.LOGLINEAR):
            return 2
        if self.kind is BasisKind.BERNSTEIN:
            return self.order + 1
        return self.order

    @property
    def n_categories(self) -> int:
        if self.kind is not BasisKind.ORDINAL:
            raise BasisError("only ordinal bases have categories")
        return self.order + 1

    def _unit(self, y):
        if self.support is None:
            raise BasisError("Bernstein support is unresolved; call with_data_support first")
        lo, hi = self.support
        t = (y - lo) / (hi - lo)
        outside = (t < 0.0) | (t > 1.0)
        if np.any(outside):
            if not self.clamp:
                raise BasisError(f"response outside Bernstein support [{lo}, {hi}]")
            t = np.clip(t, 0.0, 1.0)
        return t, outside

    def __call__(self, y):
        return eval_basis(self, y)


def _bernstein(t, p):
    k = np.arange(p + 1)
    t = t[..., None]
    # 0**0 == 1 in numpy, which is what the endpoint rows need
    return comb(p, k) * t**k * (1.0 - t) ** (p - k)


def eval_basis(basis: TransformationBasis, y) -> np.ndarray:
    """Evaluate ``a(y)``; scalar ``y`` gives a ``(P,)`` vector, arrays ``(n, P)``."""
    y_arr = np.asarray(y, dtype=float)
    scalar = y_arr.ndim == 0
    y_arr = np.atleast_1d(y_arr)
    kind = basis.kind
    if kind is BasisKind.LINEAR:
        out = np.column_stack([y_arr, -np.ones_like(y_arr)])
    elif kind is BasisKind.LOGLINEAR:
        if np.any(y_arr <= 0):
            raise BasisError("log-linear basis requires y > 0")
        out = np.column_stack([np.ones_like(y_arr), np.log(y_arr)])
    elif kind is BasisKind.BERNSTEIN:
        t, _ = basis._unit(y_arr)
        out = _bernstein(t, basis.order)
    else:
        idx = np.rint(y_arr).astype(int)
        if np.any(idx != y_arr) or np.any(idx < 1) or np.any(idx > basis.order):
            raise BasisError(
                f"ordinal thresholds are indexed 1..{basis.order}, got {y_arr[(idx != y_arr) | (idx < 1) | (idx > basis.order)][:3]}"
            )
        out = np.zeros((y_arr.size, basis.order))
        out[np.arange(y_arr.size), idx - 1] = 1.0
    return out[0] if scalar else out


def eval_basis_deriv(basis: TransformationBasis, y) -> np.ndarray:
    """Evaluate ``a'(y)``, the derivative of the basis with respect to ``y``."""
    y_arr = np.asarray(y, dtype=float)
    scalar = y_arr.ndim == 0
    y_arr = np.atleast_1d(y_arr)
    kind = basis.kind
    if kind is BasisKind.LINEAR:
        out = np.column_stack([np.ones_like(y_arr), np.zeros_like(y_arr)])
    elif kind is BasisKind.LOGLINEAR:
        if np.any(y_arr <= 0):
            raise BasisError("log-linear basis requires y > 0")
        out = np.column_stack([np.zeros_like(y_arr), 1.0 / y_arr])
    elif kind is BasisKind.BERNSTEIN:
        t, outside = basis._unit(y_arr)
        p = basis.order
        lo, hi = basis.support
        low = _bernstein(t, p - 1)
        out = np.zeros((y_arr.size, p + 1))
        out[:, 1:] += low
        out[:, :-1] -= low
        out *= p / (hi - lo)
        # constant extension outside the support
        out[outside] = 0.0
    else:
        raise NotImplementedError("ordinal bases have no derivative; discrete responses use the interval likelihood")
    return out[0] if scalar else out


def constraint_system(basis: TransformationBasis) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(K, k0)`` such that ``K @ theta >= k0`` makes ``h`` monotone."""
    P = basis.dim
    if basis.kind is BasisKind.LINEAR:
        K = np.array([[1.0, 0.0]])
    elif basis.kind is BasisKind.LOGLINEAR:
        K = np.array([[0.0, 1.0]])
    else:
        K = np.diff(np.eye(P), axis=0)
    return K, np.full(K.shape[0], MONOTONE_EPS)


def monotone_reparam(basis: TransformationBasis) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(T, lower)`` with ``theta = T @ eta`` and admissible set ``eta >= lower``.

    Used to compute constrained least-squares starting values.
    """
    P = basis.dim
    lower = np.full(P, -np.inf)
    if basis.kind is BasisKind.LINEAR:
        T = np.eye(P)
        lower[0] = MONOTONE_EPS
    elif basis.kind is BasisKind.LOGLINEAR:
        T = np.eye(P)
        lower[1] = MONOTONE_EPS
    else:
        T = np.tril(np.ones((P, P)))
        lower[1:] = MONOTONE_EPS
    return T, lower


def project_monotone(basis: TransformationBasis, theta: np.ndarray) -> np.ndarray:
    """Smallest-change repair of ``theta`` onto the constraint set."""
    theta = np.array(theta, dtype=float)
    if basis.kind is BasisKind.LINEAR:
        theta[0] = max(theta[0], MONOTONE_EPS)
    elif basis.kind is BasisKind.LOGLINEAR:
        theta[1] = max(theta[1], MONOTONE_EPS)
    else:
        for j in range(1, theta.size):
            theta[j] = max(theta[j], theta[j - 1] + MONOTONE_EPS)
    return theta


def with_data_support(basis: TransformationBasis, values) -> TransformationBasis:
    """Resolve a missing Bernstein support to ``[min, max]`` of finite ``values``."""
    if basis.kind is not BasisKind.BERNSTEIN or basis.support is not None:
        return basis
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0 or v.max() <= v.min():
        raise BasisError("cannot derive Bernstein support from constant or empty responses")
    return TransformationBasis(basis.kind, basis.order, (float(v.min()), float(v.max())), basis.clamp)


def invert_basis(basis: TransformationBasis, theta: np.ndarray, target, tol: float = 1e-12):
    """Solve ``a(y) @ theta = target`` for ``y`` elementwise.

    Returns ``(y, outside)`` where ``outside`` flags targets beyond the
    range of ``h`` on its support; those are set to the nearest boundary.
    """
    target = np.atleast_1d(np.asarray(target, dtype=float))
    theta = np.asarray(theta, dtype=float)
    kind = basis.kind
    if kind is BasisKind.LINEAR:
        return (target + theta[1]) / theta[0], np.zeros(target.shape, bool)
    if kind is BasisKind.LOGLINEAR:
        return np.exp((target - theta[0]) / theta[1]), np.zeros(target.shape, bool)
    if kind is not BasisKind.BERNSTEIN:
        raise BasisError("ordinal responses are binned, not inverted")
    lo, hi = basis.support
    # bracketing by the coefficient range: h(lo) = theta[0], h(hi) = theta[-1]
    below = target <= theta[0]
    above = target >= theta[-1]
    a = np.full(target.shape, lo)
    b = np.full(target.shape, hi)
    for _ in range(200):
        mid = 0.5 * (a + b)
        hm = eval_basis(basis, mid) @ theta
        left = hm < target
        a = np.where(left, mid, a)
        b = np.where(left, b, mid)
        if np.max(b - a) <= tol * (hi - lo):
            break
    y = 0.5 * (a + b)
    y[below] = lo
    y[above] = hi
    return y, below | above
