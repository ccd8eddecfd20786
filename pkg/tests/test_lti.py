from __future__ import annotations

import math

import numpy as np
import pytest
import scipy.signal as sps
from conftest import dense_impulse, random_stable_ss, random_stable_tf
from hypothesis import given, settings
from hypothesis import strategies as st

from dpfilter import lti
from dpfilter.errors import AlgebraError, DimensionError, DomainError, StabilityError


def _dense_hinf(sys, M=200_000):
    w = np.linspace(0.0, np.pi, M)
    G = lti.freqresp(sys, w)
    return float(np.max(np.linalg.svd(G, compute_uv=False)[:, 0]))


def test_statespace_validation():
    with pytest.raises(DimensionError):
        lti.StateSpace(np.zeros((2, 3)), np.zeros((2, 1)), np.zeros((1, 2)), np.zeros((1, 1)))
    with pytest.raises(DimensionError):
        lti.StateSpace(np.eye(2), np.zeros((2, 1)), np.zeros((1, 2)), np.zeros((1, 2)))
    with pytest.raises(AlgebraError):
        lti.RationalTF([1.0], [0.0, 1.0])


def test_rational_tf_normalizes_leading_coefficient():
    tf = lti.RationalTF([2.0, 1.0], [2.0, -1.0])
    np.testing.assert_allclose(tf.den, [1.0, -0.5])
    np.testing.assert_allclose(tf.num, [1.0, 0.5])


def test_conversions_preserve_response(rng):
    for _ in range(10):
        tf = random_stable_tf(rng)
        ss = lti.to_state_space(tf)
        u = rng.standard_normal(300)
        np.testing.assert_allclose(lti.simulate(ss, u), sps.lfilter(tf.num, tf.den, u), atol=1e-9)
        back = lti.to_tf(ss)
        np.testing.assert_allclose(lti.simulate(back, u), sps.lfilter(tf.num, tf.den, u), atol=1e-9)


def test_simulate_batch_matches_loop(rng):
    ss = random_stable_ss(rng, 3, 2, 2)
    U = rng.standard_normal((50, 4, 2))
    Y = lti.simulate_batch(ss, U)
    for b in range(4):
        np.testing.assert_allclose(Y[:, b], lti.simulate(ss, U[:, b]), atol=1e-12)
    with pytest.raises(DimensionError):
        lti.simulate_batch(ss, U[..., :1])


def test_impulse_response_matches_dense(rng):
    ss = random_stable_ss(rng, 4, 2, 3)
    ir = lti.impulse_response(ss, 30)
    np.testing.assert_allclose(ir.taps, dense_impulse(ss, 31), atol=1e-12)
    # the tail bound dominates the truncated l1 mass
    longer = lti.impulse_response(ss, 3000)
    assert ir.tail_bound >= np.sum(np.abs(longer.taps[31:])) - 1e-12


def test_h2_norm_matches_impulse_energy(rng):
    for _ in range(20):
        ss = random_stable_ss(rng, int(rng.integers(1, 5)), 2, 2, radius=0.9)
        taps = dense_impulse(ss, 3000)
        assert lti.h2_norm(ss) == pytest.approx(math.sqrt(np.sum(taps ** 2)), rel=1e-9)


def test_hinf_norm_matches_dense_grid(rng):
    for _ in range(20):
        ss = random_stable_ss(rng, int(rng.integers(1, 5)), 2, 2)
        h = lti.hinf_norm(ss)
        ref = _dense_hinf(ss)
        assert h >= ref * (1 - 1e-9)
        assert h == pytest.approx(ref, rel=1e-4)


def test_hinf_norm_sharp_resonance():
    # lightly damped pole pair: the peak sits between grid points
    r, th = 0.999, 1.234567
    tf = lti.RationalTF([1.0], [1.0, -2 * r * math.cos(th), r * r])
    ref = _dense_hinf(tf, 2_000_001)
    assert lti.hinf_norm(tf) == pytest.approx(ref, rel=1e-6)


@pytest.mark.parametrize("l", [1, 2, 5, 10, 50])
def test_moving_average_norms(l):
    tf = lti.RationalTF(np.full(l, 1.0 / l), [1.0])
    assert lti.h2_norm(tf) ** 2 == pytest.approx(1.0 / l, abs=1e-12)
    assert lti.hinf_norm(tf) == pytest.approx(1.0, abs=1e-12)


def test_unstable_norms_raise():
    tf = lti.RationalTF([1.0], [1.0, -1.0])
    with pytest.raises(StabilityError):
        lti.h2_norm(tf)
    with pytest.raises(StabilityError):
        lti.hinf_norm(tf)
    assert not lti.is_stable(tf)


def test_freqresp_tf_matches_scipy(rng):
    tf = random_stable_tf(rng, 3)
    w = np.linspace(0, np.pi, 50)
    _, h = sps.freqz(tf.num, tf.den, worN=w)
    np.testing.assert_allclose(lti.freqresp(tf, w)[:, 0, 0], h, rtol=1e-10)
    np.testing.assert_allclose(lti.freqresp(lti.to_state_space(tf), w)[:, 0, 0], h, rtol=1e-8)


def test_bilinear_matches_scipy():
    num, den = lti.bilinear_map([1.0], [1.0, 0.05]).num, lti.bilinear_map([1.0], [1.0, 0.05]).den
    b, a = sps.bilinear([1.0], [1.0, 0.05], fs=1.0)
    np.testing.assert_allclose(num, b / a[0], rtol=1e-12)
    np.testing.assert_allclose(den, a / a[0], rtol=1e-12)
    tf2 = lti.bilinear_map([1.0, 0.3], [1.0, 2.0, 5.0])
    b, a = sps.bilinear([1.0, 0.3], [1.0, 2.0, 5.0], fs=1.0)
    np.testing.assert_allclose(tf2.num, b / a[0], rtol=1e-12)
    np.testing.assert_allclose(tf2.den, a / a[0], rtol=1e-12)


def test_bilinear_vanishing_denominator():
    # the pole s = 2 = k maps to z = infinity
    with pytest.raises(AlgebraError):
        lti.bilinear_map([1.0], [1.0, -2.0])


def test_compose_series_matches_cascade(rng):
    a, b = random_stable_tf(rng), random_stable_tf(rng)
    u = rng.standard_normal(200)
    want = lti.simulate(b, lti.simulate(a, u))
    np.testing.assert_allclose(lti.simulate(lti.compose_series(a, b), u), want, atol=1e-9)
    sa, sb = lti.to_state_space(a), lti.to_state_space(b)
    np.testing.assert_allclose(lti.simulate(lti.compose_series(sa, sb), u), want, atol=1e-9)


def test_invert_requires_certificate():
    tf = lti.RationalTF([1.0, 0.5], [1.0, -0.3])
    with pytest.raises(DomainError):
        lti.invert(tf)
    inv = lti.invert(lti.certify_min_phase(tf))
    u = np.random.default_rng(0).standard_normal(100)
    np.testing.assert_allclose(lti.simulate(inv, lti.simulate(tf, u)), u, atol=1e-10)
    with pytest.raises(DomainError):
        lti.certify_min_phase(lti.RationalTF([1.0, 2.0], [1.0]))
    with pytest.raises(DomainError):
        lti.certify_min_phase(lti.RationalTF([0.0, 1.0], [1.0]))


def test_spectral_factor_flat_spectrum():
    G1, lam = lti.spectral_factor(np.full(256, 4.0), 5)
    assert lam == 1.0 and G1.min_phase
    assert lti.hinf_norm(G1) == pytest.approx(2.0, rel=1e-12)


def test_spectral_factor_recovers_known_factor():
    true = lti.RationalTF([1.0, 0.4], [1.0, -0.7])
    _, mag = lti.magnitude_grid(true)
    G1, _ = lti.spectral_factor(mag ** 2, 4)
    assert G1.min_phase
    _, fit = lti.magnitude_grid(G1)
    np.testing.assert_allclose(fit, mag, rtol=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_spectral_factor_is_min_phase_and_fits(seed):
    rng = np.random.default_rng(seed)
    G = random_stable_tf(rng, 2, radius=0.8)
    _, mag = lti.magnitude_grid(G)
    G1, _ = lti.spectral_factor(mag, 12)
    assert np.all(np.abs(G1.poles()) < 1) and np.all(np.abs(G1.zeros()) < 1)
    _, fit = lti.magnitude_grid(G1)
    # |G1|^2 should track |G| in the log domain
    assert np.max(np.abs(np.log(fit ** 2) - np.log(mag))) < 0.05


def test_spectral_factor_rejects_bad_input():
    with pytest.raises(DomainError):
        lti.spectral_factor(np.zeros(64), 3)
    with pytest.raises(DomainError):
        lti.spectral_factor(np.ones(8), 3)


def test_system_dict_round_trip():
    d = {"num": [1.0, 0.5], "den": [1.0, -0.2]}
    assert lti.system_to_dict(lti.system_from_dict(d)) == d
    ss = lti.system_from_dict({"A": [[0.5]], "B": [[1.0]], "C": [[1.0]], "D": [[0.0]]})
    assert isinstance(ss, lti.StateSpace)
    c = lti.system_from_dict({"continuous": {"num": [1.0], "den": [1.0, 0.05]}})
    assert lti.h2_norm(c) > 0
    with pytest.raises(DomainError):
        lti.system_from_dict({"foo": 1})
