import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evimr.evidential import (
    EPS, NIGError, NIGParams, constrain_batch, constrain_raw_to_nig, nig_moments, nig_uncertainties,
    nll_gradients, nll_raw_gradients, student_t_nll, uncertainties_batch,
)


def student_t_logpdf(y, mu, scale2, nu):
    # textbook location-scale Student-t, independent of the library's NIG form
    return (math.lgamma((nu + 1) / 2) - math.lgamma(nu / 2) - 0.5 * math.log(nu * math.pi * scale2)
            - (nu + 1) / 2 * math.log1p((y - mu) ** 2 / (nu * scale2)))


def oracle_nll(b, p):
    scale2 = p.beta * (1 + p.upsilon) / (p.upsilon * p.alpha)
    return -student_t_logpdf(b, p.gamma, scale2, 2 * p.alpha)


def test_reference_point():
    p = NIGParams(0.0, 1.0, 2.0, 1.0)
    assert student_t_nll(0.0, p) == pytest.approx(0.980829, abs=1e-5)
    assert oracle_nll(0.0, p) == pytest.approx(0.980829, abs=1e-5)


def test_nll_matches_student_t_oracle(rng):
    for _ in range(200):
        p = NIGParams(rng.normal(), rng.uniform(0.01, 10), rng.uniform(1.001, 20), rng.uniform(0.01, 10))
        b = rng.normal(scale=3)
        assert student_t_nll(b, p) == pytest.approx(oracle_nll(b, p), rel=1e-10, abs=1e-10)


def test_nll_gradients_finite_difference(rng):
    h = 1e-5
    for _ in range(100):
        x = np.array([rng.normal(), rng.uniform(0.1, 5), rng.uniform(1.1, 6), rng.uniform(0.1, 5)])
        b = rng.normal()
        g = np.array(nll_gradients(b, NIGParams(*x)))
        for i in range(4):
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            num = (student_t_nll(b, NIGParams(*xp)) - student_t_nll(b, NIGParams(*xm))) / (2 * h)
            assert abs(g[i] - num) / max(abs(g[i]), abs(num), 1e-8) < 1e-4


def test_raw_gradients_chain_rule(rng):
    h = 1e-6
    for _ in range(50):
        raw = rng.normal(size=4)
        b = rng.normal()
        g = nll_raw_gradients(b, raw)
        for i in range(4):
            rp, rm = raw.copy(), raw.copy()
            rp[i] += h
            rm[i] -= h
            num = (student_t_nll(b, constrain_raw_to_nig(rp)) - student_t_nll(b, constrain_raw_to_nig(rm))) / (2 * h)
            assert g[i] == pytest.approx(num, rel=1e-5, abs=1e-8)


def test_uncertainty_identity(rng):
    u = rng.uniform(1e-3, 1e3, 10_000)
    a = 1.0 + rng.uniform(1e-3, 1e2, 10_000)
    b = rng.uniform(1e-3, 1e3, 10_000)
    alea, epi = uncertainties_batch(u, a, b)
    np.testing.assert_allclose(epi * u, alea, rtol=1e-12, atol=0)


def test_scalar_uncertainties_and_pole():
    t = nig_uncertainties(NIGParams(0.5, 2.0, 3.0, 4.0))
    assert t.prediction == 0.5
    assert t.aleatoric == pytest.approx(2.0)
    assert t.epistemic == pytest.approx(1.0)
    with pytest.raises(NIGError):
        nig_uncertainties(NIGParams(0.0, 1.0, 1.0 + 1e-7, 1.0))


def test_moments():
    m = nig_moments(NIGParams(0.2, 1.0, 3.0, 2.0))
    assert (m.mu, m.sigma2) == (0.2, 1.0)


@pytest.mark.parametrize("bad", [(0, 0, 2, 1), (0, 1, 1, 1), (0, 1, 2, 0), (float("nan"), 1, 2, 1)])
def test_invalid_params(bad):
    with pytest.raises(NIGError):
        NIGParams(*bad)


def test_constraint_map_bounds():
    p = constrain_raw_to_nig([0.0, -800.0, -800.0, -800.0])
    assert p.upsilon >= EPS and p.alpha >= 1 + EPS and p.beta >= EPS
    with pytest.raises(NIGError):
        constrain_raw_to_nig([0.0, 1.0, float("inf"), 0.0])
    with pytest.raises(NIGError):
        constrain_raw_to_nig([0.0, 1.0])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=4, max_size=4))
def test_constraint_map_always_valid(raw):
    p = constrain_raw_to_nig(raw)
    (g, u, a, b), jac = constrain_batch(np.array(raw))
    assert (float(g), float(u), float(a), float(b)) == p.as_tuple()
    assert np.all((jac >= 0) & (jac <= 1))


@settings(max_examples=200, deadline=None)
@given(st.floats(-5, 5), st.floats(0.01, 50), st.floats(1.01, 50), st.floats(0.01, 50))
def test_nll_finite_and_minimized_at_gamma(gamma, u, a, b):
    p = NIGParams(gamma, u, a, b)
    at = student_t_nll(gamma, p)
    assert math.isfinite(at)
    assert student_t_nll(gamma + 0.5, p) > at
