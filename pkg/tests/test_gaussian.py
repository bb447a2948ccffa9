import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rnp import autodiff as ad
from rnp.gaussian import (
    SIGMA_FLOOR,
    DiagGaussian,
    gauss_loglik,
    gaussian_head,
    kl_diag,
    sample_reparam,
)


def G(mu, sigma):
    return DiagGaussian(ad.constant(np.atleast_1d(mu)), ad.constant(np.atleast_1d(sigma)))


def quad_kl(mq, sq, mp, sp):
    """Trapezoid integral of q log(q/p) on [-20, 20], step 1e-3."""
    x = np.linspace(-20.0, 20.0, 40001)
    log_q = -0.5 * ((x - mq) / sq) ** 2 - math.log(sq) - 0.5 * math.log(2 * math.pi)
    log_p = -0.5 * ((x - mp) / sp) ** 2 - math.log(sp) - 0.5 * math.log(2 * math.pi)
    return float(np.trapezoid(np.exp(log_q) * (log_q - log_p), x))


# --- gaussian_head ------------------------------------------------------------------------


def test_zero_head_output():
    g = gaussian_head(ad.constant(np.zeros(4)))
    assert g.mu.data.tolist() == [0.0, 0.0]
    expected = SIGMA_FLOOR + (1 - SIGMA_FLOOR) * math.log(2)
    np.testing.assert_allclose(g.sigma.data, [expected, expected], rtol=1e-15)
    assert expected == pytest.approx(0.696, abs=1e-3)


def test_sigma_floor_holds_for_random_heads():
    raw = np.random.default_rng(0).normal(scale=5.0, size=(10_000, 4))
    g = gaussian_head(ad.constant(raw))
    assert np.all(g.sigma.data > SIGMA_FLOOR) and np.all(np.isfinite(g.sigma.data))


def test_odd_head_rejected():
    with pytest.raises(ValueError):
        gaussian_head(ad.constant(np.zeros(5)))


# --- sample_reparam -------------------------------------------------------------------------


def test_reparam_cases():
    g = G([0.3, -1.0], [2.0, 0.5])
    assert sample_reparam(g, np.zeros(2)).data.tolist() == [0.3, -1.0]
    assert sample_reparam(G([0.0], [1.0]), np.array([1.5])).data.tolist() == [1.5]
    with pytest.raises(ValueError):
        sample_reparam(g, np.zeros(3))


def test_reparam_monte_carlo_mean():
    mu, sigma = 0.7, 1.3
    noise = np.random.default_rng(3).standard_normal(100_000)
    s = sample_reparam(G(np.full(100_000, mu), np.full(100_000, sigma)), noise).data
    assert abs(s.mean() - mu) < 4 * sigma / math.sqrt(100_000)


def test_reparam_gradients_are_exact():
    mu = ad.parameter([0.2, -0.4])
    sigma = ad.parameter([1.5, 0.7])
    noise = np.array([0.9, -1.1])
    ad.backward(ad.reduce_sum(sample_reparam(DiagGaussian(mu, sigma), noise)))
    assert mu.grad.tolist() == [1.0, 1.0]
    assert sigma.grad.tolist() == noise.tolist()


# --- kl_diag -----------------------------------------------------------------------------------


def test_kl_known_values():
    assert kl_diag(G(0.0, 1.0), G(0.0, 1.0)).item() == 0.0
    assert kl_diag(G(1.0, 1.0), G(0.0, 1.0)).item() == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(ValueError):
        kl_diag(G([0.0, 0.0], [1.0, 1.0]), G(0.0, 1.0))


def test_kl_matches_quadrature():
    rng = np.random.default_rng(42)
    worst = 0.0
    for _ in range(100):
        mq, mp = rng.uniform(-2, 2, size=2)
        sq, sp = rng.uniform(0.5, 2.0, size=2)
        worst = max(worst, abs(kl_diag(G(mq, sq), G(mp, sp)).item() - quad_kl(mq, sq, mp, sp)))
    assert worst < 1e-6


def test_kl_non_negative_and_zero_at_equality():
    rng = np.random.default_rng(1)
    mq, mp = rng.normal(size=(2, 10_000, 1))
    sq, sp = np.exp(rng.normal(size=(2, 10_000, 1)))
    kl = kl_diag(G(mq, sq), G(mp, sp)).data
    assert np.all(kl >= 0)
    same = kl_diag(G(mq, sq), G(mq, sq)).data
    assert np.max(np.abs(same)) < 1e-12


@settings(max_examples=200, deadline=None)
@given(
    st.floats(-5, 5), st.floats(0.05, 5), st.floats(-5, 5), st.floats(0.05, 5),
)
def test_kl_property_non_negative(mq, sq, mp, sp):
    assert kl_diag(G(mq, sq), G(mp, sp)).item() >= -1e-12


def test_kl_batched_rows():
    q = G(np.zeros((3, 2)), np.ones((3, 2)))
    p = G(np.ones((3, 2)), np.ones((3, 2)))
    assert kl_diag(q, p).data.tolist() == [1.0, 1.0, 1.0]


# --- gauss_loglik --------------------------------------------------------------------------------


def test_loglik_standard_normal_at_mean():
    assert gauss_loglik(np.zeros(1), G(0.0, 1.0)).item() == pytest.approx(-0.918939, abs=1e-6)


def test_loglik_residual_free():
    s = np.array([0.3, 2.0])
    expected = -np.sum(0.5 * math.log(2 * math.pi) + np.log(s))
    assert gauss_loglik(np.array([1.0, -1.0]), G([1.0, -1.0], s)).item() == pytest.approx(expected, abs=1e-14)


def test_loglik_matches_extended_precision():
    rng = np.random.default_rng(6)
    mpmath.mp.dps = 40
    worst = 0.0
    for _ in range(200):
        y, mu = rng.uniform(-3, 3, size=(2, 3))
        sigma = rng.uniform(0.02, 3, size=3)
        ref = mpmath.mpf(0)
        for d in range(3):
            yd, md, sd = (mpmath.mpf(float(v)) for v in (y[d], mu[d], sigma[d]))
            ref += -mpmath.log(2 * mpmath.pi) / 2 - mpmath.log(sd) - (yd - md) ** 2 / (2 * sd**2)
        worst = max(worst, abs(gauss_loglik(y, G(mu, sigma)).item() - float(ref)))
    assert worst < 1e-10


def test_loglik_shape_mismatch():
    with pytest.raises(ValueError):
        gauss_loglik(np.zeros(2), G(0.0, 1.0))


def test_loglik_mean_gradient_vanishes_at_target():
    y = np.array([0.4, -1.2])
    mu = ad.parameter(y.copy())
    ad.backward(gauss_loglik(y, DiagGaussian(mu, ad.constant([0.5, 2.0]))))
    assert np.all(mu.grad == 0.0)
    # finite differences on either side: y is a maximum
    base = gauss_loglik(y, G(y, [0.5, 2.0])).item()
    for d in range(2):
        for step in (1e-4, -1e-4):
            shifted = y.copy()
            shifted[d] += step
            assert gauss_loglik(y, G(shifted, [0.5, 2.0])).item() < base
