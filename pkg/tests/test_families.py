import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from gmfm.families import (
    FamilyDomainError,
    FamilyKind,
    curvature_bound,
    derivatives_cell,
    family_mean,
    loglik_cell,
    sample_array,
    validate_support,
)

FAMS = list(FamilyKind)
SUPPORT = {
    FamilyKind.GAUSSIAN: [-2.3, 0.0, 1.7],
    FamilyKind.POISSON: [0, 1, 4, 11],
    FamilyKind.LOGIT: [0, 1],
    FamilyKind.PROBIT: [0, 1],
    FamilyKind.TOBIT: [0.0, 0.4, 2.5],
}


def fd(f, x, h=1e-5):
    return (f(x + h) - f(x - h)) / (2 * h)


@pytest.mark.parametrize("fam", FAMS)
@pytest.mark.parametrize("pi", [-7.5, -2.0, -0.3, 0.0, 0.8, 3.1, 7.0])
def test_derivatives_match_finite_differences(fam, pi):
    for x in SUPPORT[fam]:
        if fam is FamilyKind.POISSON and pi > 5:
            continue
        _, d1, d2 = derivatives_cell(fam, x, pi)
        g = fd(lambda p: loglik_cell(fam, x, p), pi)
        h = fd(lambda p: derivatives_cell(fam, x, p).d1, pi)
        assert d1 == pytest.approx(g, rel=1e-5, abs=1e-7)
        assert d2 == pytest.approx(h, rel=1e-5, abs=1e-7)


def test_known_values():
    assert loglik_cell("gaussian", 1.5, 0.5) == -0.5
    assert loglik_cell("poisson", 2, 0.0) == pytest.approx(-1 - math.log(2))
    assert loglik_cell("logit", 1, 0.0) == pytest.approx(-math.log(2))
    assert loglik_cell("probit", 0, 0.0) == pytest.approx(-math.log(2))
    assert loglik_cell("tobit", 0, 0.0) == pytest.approx(-math.log(2))
    assert derivatives_cell("logit", 1, 0.0) == pytest.approx((-math.log(2), 0.5, -0.25))


def test_densities_integrate_to_one():
    for pi in (-1.0, 0.4):
        assert sum(math.exp(loglik_cell("logit", x, pi)) for x in (0, 1)) == pytest.approx(1)
        assert sum(math.exp(loglik_cell("probit", x, pi)) for x in (0, 1)) == pytest.approx(1)
        assert sum(math.exp(loglik_cell("poisson", x, pi)) for x in range(60)) == pytest.approx(1)
        cont = integrate.quad(lambda x: math.exp(loglik_cell("tobit", x, pi)) / math.sqrt(2 * math.pi), 0, 40)[0]
        assert math.exp(loglik_cell("tobit", 0, pi)) + cont == pytest.approx(1, abs=1e-8)


def test_probit_tails_are_finite():
    for pi in (-40.0, -12.0, 12.0, 40.0):
        for x in (0, 1):
            ll, d1, d2 = derivatives_cell("probit", x, pi)
            assert np.isfinite([ll, d1, d2]).all()
            assert d2 <= 0
    # far in the failing tail the Mills ratio grows like |z|
    assert derivatives_cell("probit", 1, -30.0).d1 == pytest.approx(30.0, rel=2e-3)


@pytest.mark.parametrize("fam,x", [("poisson", -1), ("poisson", 1.5), ("logit", 2), ("probit", 0.5), ("tobit", -0.1)])
def test_domain_errors(fam, x):
    with pytest.raises(FamilyDomainError):
        loglik_cell(fam, x, 0.0)


def test_nonfinite_pi_rejected():
    with pytest.raises(ValueError):
        loglik_cell("gaussian", 0.0, float("nan"))


def test_parse():
    assert FamilyKind.parse("Logit") is FamilyKind.LOGIT
    assert FamilyKind.parse(3) is FamilyKind.PROBIT
    assert str(FamilyKind.TOBIT) == "tobit"
    with pytest.raises(ValueError):
        FamilyKind.parse("gamma")


@pytest.mark.parametrize("fam", FAMS)
def test_curvature_bound_dominates(fam):
    D = 8.0
    b = curvature_bound(fam, D)
    for pi in np.linspace(-D, D, 161):
        for x in SUPPORT[fam]:
            assert -derivatives_cell(fam, x, pi).d2 <= b * (1 + 1e-9)


def test_curvature_bound_values():
    assert curvature_bound("logit", 30) == 0.25
    assert curvature_bound("probit", 30) == 1.0
    assert curvature_bound("gaussian", 30) == 1.0
    assert curvature_bound("poisson", 8) == pytest.approx(math.exp(8))
    assert curvature_bound("tobit", 8) >= 1.0
    with pytest.raises(ValueError):
        curvature_bound("logit", 0)


def test_sampling_support_and_means(rng):
    n = 200_000
    for fam in FAMS:
        codes = np.full(n, int(fam), dtype=np.int8)
        pi = np.full(n, 0.7)
        x = sample_array(codes, pi, rng)
        validate_support(codes, x)
        m = family_mean(codes[:1], pi[:1])[0]
        assert x.mean() == pytest.approx(m, abs=5 * x.std() / math.sqrt(n))


def test_tobit_mean_formula():
    pi = 0.3
    direct = integrate.quad(lambda e: max(0.0, pi + e) * stats.norm.pdf(e), -12, 12)[0]
    assert family_mean(np.array([4]), np.array([pi]))[0] == pytest.approx(direct, rel=1e-8)


def test_validate_support_reports_one_based_cell():
    codes = np.zeros((2, 3, 3), dtype=np.int8)
    codes[1, 2, 0] = FamilyKind.LOGIT
    x = np.zeros((2, 3, 3))
    x[1, 2, 0] = 0.5
    with pytest.raises(FamilyDomainError, match="2,3,1"):
        validate_support(codes, x)
    mask = np.ones_like(x, bool)
    mask[1, 2, 0] = False
    validate_support(codes, x, mask)


@given(st.sampled_from(FAMS), st.floats(-6, 6))
def test_second_derivative_nonpositive(fam, pi):
    for x in SUPPORT[fam]:
        assert derivatives_cell(fam, x, pi).d2 <= 0
