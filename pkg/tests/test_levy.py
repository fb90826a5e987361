import math

import pytest

from cogarch_pbef.errors import MomentError, ParameterError
from cogarch_pbef.levy import (
    CompoundPoissonNormal,
    Theta,
    VarianceGamma,
    levy_measure_moment,
    model_from_dict,
    psi,
    qv_moment,
    stationarity_check,
)
from cogarch_pbef.oracles import levy_moment_quadrature, psi_quadrature


def test_theta_rejects_nonpositive():
    with pytest.raises(ParameterError, match="eta"):
        Theta(0.04, 0.0, 0.038)
    with pytest.raises(ParameterError, match="beta"):
        Theta(-1.0, 0.05, 0.03)
    with pytest.raises(ParameterError):
        Theta(0.04, float("nan"), 0.03)


def test_theta_from_sequence_length():
    assert Theta.from_sequence([1, 2, 3]).as_tuple() == (1.0, 2.0, 3.0)
    with pytest.raises(ParameterError):
        Theta.from_sequence([1, 2])


def test_vg_requires_unit_a():
    with pytest.raises(ParameterError, match="A = 1"):
        VarianceGamma(C=1.0, A=2.0)


def test_cpn_derives_jump_sd():
    m = CompoundPoissonNormal(rate=4.0)
    assert m.jump_sd == pytest.approx(0.5)
    with pytest.raises(ParameterError):
        CompoundPoissonNormal(rate=4.0, jump_sd=1.0)


@pytest.mark.parametrize("order, expected", [(2, 1.0), (3, 0.0), (4, 3.0), (6, 30.0), (8, 630.0)])
def test_vg_measure_moments(vg, order, expected):
    assert levy_measure_moment(vg, order) == pytest.approx(expected, rel=1e-14)


@pytest.mark.parametrize("order", [2, 4, 6, 8])
def test_measure_moments_match_quadrature(vg, cpn, order):
    for model in (vg, cpn):
        assert levy_measure_moment(model, order) == pytest.approx(levy_moment_quadrature(model, order), rel=1e-9)


def test_cpn_moments(cpn):
    assert levy_measure_moment(cpn, 4) == pytest.approx(3.0)
    assert levy_measure_moment(cpn, 6) == pytest.approx(15.0)


def test_moment_cap():
    m = VarianceGamma(C=1.0, max_moment_order=4)
    with pytest.raises(MomentError, match="moment not finite"):
        levy_measure_moment(m, 6)
    with pytest.raises(MomentError, match="Psi undefined"):
        psi(m, Theta(0.04, 0.053, 0.038), 3)


def test_qv_moments(vg, cpn):
    assert qv_moment(vg, 2) == pytest.approx(1.0, abs=1e-12)
    assert qv_moment(cpn, 2) == pytest.approx(1.0, abs=1e-12)
    assert qv_moment(vg, 6) == pytest.approx(30.0)
    assert vg.tau2 == 0.0
    with pytest.raises(ParameterError):
        qv_moment(vg, 3)


def test_psi_values(vg, theta0):
    assert psi(vg, theta0, 0) == 0.0
    assert psi(vg, theta0, 1) == pytest.approx(-0.015, abs=1e-15)
    assert psi(vg, theta0, 4) == pytest.approx(-0.0261, abs=5e-4)


@pytest.mark.parametrize("c", [1, 2, 3, 4])
def test_psi_binomial_matches_integral_form(vg, cpn, theta0, c):
    for model in (vg, cpn):
        assert psi(model, theta0, c) == pytest.approx(psi_quadrature(model, theta0, c), rel=1e-8)


@pytest.mark.parametrize("c", [1, 2, 3, 4])
def test_psi_monotone_in_eta_and_phi(vg, theta0, c):
    b, e, p = theta0.as_tuple()
    h = 1e-6
    assert psi(vg, Theta(b, e + h, p), c) < psi(vg, theta0, c)
    assert psi(vg, Theta(b, e, p + h), c) > psi(vg, theta0, c)


def test_stationarity(vg, theta0):
    assert stationarity_check(vg, theta0, 4)
    assert not stationarity_check(vg, Theta(0.04, 0.01, 0.038), 4)
    assert psi(vg, Theta(0.04, 0.01, 0.038), 4) > 0


def test_model_from_dict():
    m = model_from_dict({"family": "variance_gamma", "C": 1.0})
    assert isinstance(m, VarianceGamma)
    assert model_from_dict(m.to_dict()) == m
    c = model_from_dict({"family": "compound_poisson_normal", "rate": 2.0})
    assert c.jump_sd == pytest.approx(1 / math.sqrt(2))
    with pytest.raises(ParameterError, match="unknown keys"):
        model_from_dict({"family": "variance_gamma", "gamma": 1})
    with pytest.raises(ParameterError, match="unknown Lévy family"):
        model_from_dict({"family": "stable"})
