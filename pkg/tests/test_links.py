import numpy as np
import pytest
from scipy import stats

from mitram.links import CLOGLOG, LOGIT, PROBIT, get_link

LINKS = [PROBIT, LOGIT, CLOGLOG]


def test_cdf_examples():
    assert PROBIT.cdf(0.0) == 0.5
    assert LOGIT.cdf(0.0) == 0.5
    assert abs(CLOGLOG.cdf(0.0) - (1 - np.exp(-1))) < 1e-15


def test_quantile_examples():
    assert abs(PROBIT.quantile(0.975) - stats.norm.ppf(0.975)) < 1e-12
    assert abs(PROBIT.quantile(0.975) - 1.959964) < 1e-6
    assert LOGIT.quantile(0.5) == 0.0
    assert abs(CLOGLOG.quantile(1 - np.exp(-1))) < 1e-15
    for link in LINKS:
        with pytest.raises(ValueError):
            link.quantile(0.0)
        with pytest.raises(ValueError):
            link.quantile(1.0)


def test_logpdf_examples():
    assert abs(PROBIT.logpdf(0.0) + 0.5 * np.log(2 * np.pi)) < 1e-15
    assert abs(LOGIT.logpdf(0.0) - np.log(0.25)) < 1e-15
    v = CLOGLOG.logpdf(-40.0)
    assert np.isfinite(v) and abs(v - (-40.0 - np.exp(-40.0))) < 1e-12


@pytest.mark.parametrize("link", LINKS)
def test_round_trip(link):
    # upper tail limited by the spacing of doubles below 1
    x = np.linspace(-8, 2, 201)
    np.testing.assert_allclose(link.quantile(link.cdf(x)), x, atol=1e-10, rtol=0)


@pytest.mark.parametrize("link", LINKS)
def test_logpdf_matches_numeric_derivative(link):
    x = np.linspace(-5, 2, 71)
    h = 1e-5
    d = (link.cdf(x + h) - link.cdf(x - h)) / (2 * h)
    np.testing.assert_allclose(link.logpdf(x), np.log(d), atol=1e-6)


def test_reference_distributions():
    x = np.linspace(-6, 3, 50)
    np.testing.assert_allclose(LOGIT.cdf(x), stats.logistic.cdf(x), rtol=1e-13)
    # F(x) = 1 - exp(-exp(x)) is the minimum extreme value distribution
    np.testing.assert_allclose(CLOGLOG.cdf(x), stats.gumbel_l.cdf(x), rtol=1e-12)
    np.testing.assert_allclose(CLOGLOG.logpdf(x), stats.gumbel_l.logpdf(x), rtol=1e-12)


@pytest.mark.parametrize("link", LINKS)
def test_to_probit_composition(link):
    x = np.linspace(-6, 6, 61)
    # oracle works on the nearer tail: Phi^-1(F) below the median, -Phi^-1(1 - F) above
    lower = link.cdf(x) < 0.5
    ref = np.where(lower, stats.norm.ppf(link.cdf(x)), -stats.norm.ppf(link.sf(x)))
    np.testing.assert_allclose(link.to_probit(x), ref, atol=1e-9)
    np.testing.assert_allclose(link.from_probit(link.to_probit(x)), x, atol=1e-9)


@pytest.mark.parametrize("link", LINKS)
def test_to_probit_tails_finite(link):
    z = link.to_probit(np.array([-1e3, -50.0, 50.0, 1e3]))
    assert np.all(np.isfinite(z))
    assert np.all(np.diff(z) >= 0)
    z = link.to_probit(np.array([-np.inf, np.inf]))
    assert z[0] == -np.inf and z[1] == np.inf


def test_get_link():
    assert get_link("Probit") == PROBIT
    with pytest.raises(ValueError):
        get_link("cauchit")
