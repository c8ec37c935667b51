"""Inverse link functions F (probit, logit, inverse complementary log-log).

All functions are vectorised and evaluated in log space where tails
matter.  ``to_probit`` computes ``Phi^-1(F(x))`` and ``from_probit``
its inverse without forming probabilities near 0 or 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import expit, log_expit, log_ndtr, logit, ndtr, ndtri, ndtri_exp

LOG_2PI = np.log(2.0 * np.pi)
#: log-probabilities are floored here before Phi^-1, so |Phi^-1(F(x))| < 37.5
LOG_P_FLOOR = -700.0


class LinkKind(str, Enum):
    PROBIT = "probit"
    LOGIT = "logit"
    CLOGLOG = "cloglog"


@dataclass(frozen=True)
class LinkFamily:
    kind: LinkKind

    def __post_init__(self):
        object.__setattr__(self, "kind", LinkKind(self.kind))

    @property
    def name(self) -> str:
        return self.kind.value

    @property
    def is_probit(self) -> bool:
        return self.kind is LinkKind.PROBIT

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind is LinkKind.PROBIT:
            return ndtr(x)
        if self.kind is LinkKind.LOGIT:
            return expit(x)
        with np.errstate(over="ignore"):
            return -np.expm1(-np.exp(x))

    def sf(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind is LinkKind.PROBIT:
            return ndtr(-x)
        if self.kind is LinkKind.LOGIT:
            return expit(-x)
        with np.errstate(over="ignore"):
            return np.exp(-np.exp(x))

    def logcdf(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind is LinkKind.PROBIT:
            return log_ndtr(x)
        if self.kind is LinkKind.LOGIT:
            return log_expit(x)
        with np.errstate(divide="ignore", over="ignore"):
            return np.log(-np.expm1(-np.exp(x)))

    def logsf(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind is LinkKind.PROBIT:
            return log_ndtr(-x)
        if self.kind is LinkKind.LOGIT:
            return log_expit(-x)
        with np.errstate(over="ignore"):
            return -np.exp(x)

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind is LinkKind.PROBIT:
            return -0.5 * (x * x + LOG_2PI)
        if self.kind is LinkKind.LOGIT:
            return log_expit(x) + log_expit(-x)
        with np.errstate(over="ignore"):
            return x - np.exp(x)

    def pdf(self, x):
        return np.exp(self.logpdf(x))

    def quantile(self, p):
        p = np.asarray(p, dtype=float)
        if np.any((p <= 0.0) | (p >= 1.0) | np.isnan(p)):
            raise ValueError("quantile requires probabilities strictly inside (0, 1)")
        if self.kind is LinkKind.PROBIT:
            return ndtri(p)
        if self.kind is LinkKind.LOGIT:
            return logit(p)
        return np.log(-np.log1p(-p))

    def to_probit(self, x):
        """``Phi^-1(F(x))`` computed from log-probabilities of the nearer tail."""
        x = np.asarray(x, dtype=float)
        if self.kind is LinkKind.PROBIT:
            return x.copy()
        lc = np.maximum(self.logcdf(x), LOG_P_FLOOR)
        ls = np.maximum(self.logsf(x), LOG_P_FLOOR)
        lower = lc < ls
        out = np.where(lower, ndtri_exp(np.where(lower, lc, -1.0)), -ndtri_exp(np.where(lower, -1.0, ls)))
        # +-inf inputs propagate
        out = np.where(np.isposinf(x), np.inf, out)
        out = np.where(np.isneginf(x), -np.inf, out)
        return out

    def from_probit(self, w):
        """``F^-1(Phi(w))``, the inverse of :meth:`to_probit`."""
        w = np.asarray(w, dtype=float)
        if self.kind is LinkKind.PROBIT:
            return w.copy()
        lc = log_ndtr(w)
        ls = log_ndtr(-w)
        if self.kind is LinkKind.LOGIT:
            return lc - ls
        # F^-1(p) = log(-log(1 - p))
        return np.log(-ls)


PROBIT = LinkFamily(LinkKind.PROBIT)
LOGIT = LinkFamily(LinkKind.LOGIT)
CLOGLOG = LinkFamily(LinkKind.CLOGLOG)


def get_link(name: str) -> LinkFamily:
    try:
        return LinkFamily(LinkKind(name.strip().lower()))
    except ValueError:
        raise ValueError(f"unknown link {name!r}; expected probit, logit or cloglog") from None


def cdf(link: LinkFamily, x):
    return link.cdf(x)


def quantile(link: LinkFamily, p):
    return link.quantile(p)


def logpdf(link: LinkFamily, x):
    return link.logpdf(x)
