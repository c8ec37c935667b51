"""Deterministic integration over the unit cube ``[0, 1]^R``.

Two rules are available:

* ``qmc``: scrambled Sobol points with a fixed seed.  The error indicator
  is the difference between the estimates from the first half and from
  all of the points.
* ``sparse``: Smolyak sparse grid built from Gauss-Hermite rules (nodes
  mapped to the cube by ``Phi``).  The error indicator is the difference
  to the next lower level.

Both rules are also exposed on the standard normal scale through
:func:`normal_nodes`, which the censored likelihood uses directly.  There
the rule is by default *adaptive*: per cluster the nodes are shifted to the
mode and scaled by the curvature of the integrand (as in adaptive
Gauss-Hermite quadrature), so the same node set serves clusters whose
random effects sit far in the tail or are sharply determined.  The sparse
rule uses the full Laplace curvature.  The QMC rule leaves censored
(one-sided) observations out of the scale so that the importance ratio
stays bounded in the open tail.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from functools import lru_cache
from math import comb

import numpy as np
from scipy.special import ndtr, ndtri, roots_hermitenorm
from scipy.stats import qmc

MAX_DIM = 6
DEFAULT_SEED = 29
#: default sparse-grid level by dimension; node counts grow quickly with R
DEFAULT_SPARSE_LEVEL = {1: 24, 2: 20, 3: 14, 4: 10, 5: 9, 6: 8}
_SOBOL_BITS = 30


def default_qmc_nodes(R: int) -> int:
    return 2**13 if R <= 3 else 2**15


@dataclass(frozen=True)
class CubatureRule:
    """Integration rule over ``[0, 1]^R``.

    Args:
        kind: ``"qmc"`` or ``"sparse"``.
        nodes: QMC node count, or the sparse-grid level; ``None`` picks
            the default for the dimension.
        seed: scrambling seed of the Sobol sequence.
        adaptive: centre and scale the nodes per cluster in the censored
            likelihood; ``False`` integrates against ``N(0, I)`` directly.
    """

    kind: str = "qmc"
    nodes: int | None = None
    seed: int = DEFAULT_SEED
    adaptive: bool = True

    def __post_init__(self):
        if self.kind not in ("qmc", "sparse"):
            raise ValueError(f"unknown cubature {self.kind!r}; expected 'qmc' or 'sparse'")
        if self.nodes is not None and self.nodes < 1:
            raise ValueError("node count / level must be positive")

    def size(self, R: int) -> int:
        """Resolved node count (QMC) or level (sparse) for dimension ``R``."""
        if self.nodes is not None:
            return int(self.nodes)
        return default_qmc_nodes(R) if self.kind == "qmc" else DEFAULT_SPARSE_LEVEL[R]

    def refined(self, R: int) -> "CubatureRule":
        """Rule with doubled node count (QMC) or a level raised by 4 (sparse)."""
        if self.kind == "qmc":
            return replace(self, nodes=2 * self.size(R))
        return replace(self, nodes=self.size(R) + 4)

    def describe(self, R: int) -> str:
        unit = "nodes" if self.kind == "qmc" else "level"
        return f"{self.kind}:{unit}={self.size(R)}" + (":adaptive" if self.adaptive else "")


def _check_dim(R: int):
    if not 1 <= R <= MAX_DIM:
        raise ValueError(f"unit-cube integration supports 1 <= R <= {MAX_DIM}, got R={R}")


@lru_cache(maxsize=32)
def _sobol(R: int, n: int, seed: int) -> np.ndarray:
    engine = qmc.Sobol(d=R, scramble=True, seed=seed, bits=_SOBOL_BITS)
    with warnings.catch_warnings():
        # balance properties only hold for powers of two; other sizes are allowed
        warnings.simplefilter("ignore", UserWarning)
        q = engine.random(n)
    # points are multiples of 2^-30; a half step keeps them strictly inside
    q = q + 2.0 ** -(_SOBOL_BITS + 1)
    q.setflags(write=False)
    return q


@lru_cache(maxsize=64)
def _gauss_hermite(n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = roots_hermitenorm(n)
    return x, w / w.sum()


@lru_cache(maxsize=32)
def _smolyak(R: int, level: int) -> tuple[np.ndarray, np.ndarray]:
    """Smolyak combination of Gauss-Hermite rules with ``l`` nodes at level ``l``."""
    level = max(level, R)
    pts, wts = [], []
    for total in range(max(R, level - R + 1), level + 1):
        coef = (-1) ** (level - total) * comb(R - 1, level - total)
        for parts in _compositions(total, R):
            rules = [_gauss_hermite(l) for l in parts]
            grids = np.meshgrid(*(r[0] for r in rules), indexing="ij")
            wgrid = np.meshgrid(*(r[1] for r in rules), indexing="ij")
            pts.append(np.column_stack([g.ravel() for g in grids]))
            wts.append(coef * np.prod([g.ravel() for g in wgrid], axis=0))
    pts = np.concatenate(pts)
    wts = np.concatenate(wts)
    # merge coincident nodes of the non-nested rules
    keys, first, inverse = np.unique(np.round(pts, 12), axis=0, return_index=True, return_inverse=True)
    merged = np.zeros(len(keys))
    np.add.at(merged, inverse.ravel(), wts)
    pts, wts = pts[first], merged
    keep = np.abs(wts) > 1e-300
    pts, wts = pts[keep], wts[keep]
    pts.setflags(write=False)
    wts.setflags(write=False)
    return pts, wts


def _compositions(total: int, parts: int):
    """All tuples of ``parts`` positive integers summing to ``total``."""
    if parts == 1:
        yield (total,)
        return
    for first in range(1, total - parts + 2):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


def normal_nodes(rule: CubatureRule, R: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes ``w`` (``n x R``) and weights for integrals against ``N(0, I_R)``."""
    _check_dim(R)
    if rule.kind == "qmc":
        return _qmc_normal(R, rule.size(R), rule.seed)
    return _smolyak(R, rule.size(R))


@lru_cache(maxsize=32)
def _qmc_normal(R: int, n: int, seed: int):
    w = ndtri(_sobol(R, n, seed))
    w.setflags(write=False)
    wts = np.full(n, 1.0 / n)
    wts.setflags(write=False)
    return w, wts


def unit_nodes(rule: CubatureRule, R: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes in ``(0, 1)^R`` and weights."""
    _check_dim(R)
    if rule.kind == "qmc":
        n = rule.size(R)
        return _sobol(R, n, rule.seed), np.full(n, 1.0 / n)
    w, wts = _smolyak(R, rule.size(R))
    # far-tail Gauss-Hermite nodes round to 0 or 1; their weights are negligible
    return np.clip(ndtr(w), np.finfo(float).tiny, np.nextafter(1.0, 0.0)), wts


def integrate_unit_cube(f, R: int, rule: CubatureRule | None = None) -> tuple[float, float]:
    """Integrate ``f`` over ``[0, 1]^R``.

    Args:
        f: vectorised integrand taking an ``(n, R)`` array of points and
            returning ``n`` values.
        R: dimension, ``1 <= R <= 6``.
        rule: integration rule (default QMC).

    Returns:
        ``(estimate, error_indicator)``.
    """
    rule = rule or CubatureRule()
    _check_dim(R)
    q, wts = unit_nodes(rule, R)
    vals = np.asarray(f(q), dtype=float)
    est = float(vals @ wts)
    if rule.kind == "qmc":
        half = vals.size // 2
        err = abs(float(vals[:half].mean()) - est) if half else np.inf
    else:
        level = rule.size(R)
        if level <= R:
            err = np.inf
        else:
            q0, w0 = unit_nodes(replace(rule, nodes=level - 1), R)
            err = abs(float(np.asarray(f(q0), dtype=float) @ w0) - est)
    return est, err
