from __future__ import annotations

import math

import numpy as np
import pytest
import scipy.linalg as sla

from dpfilter import kalman_dp as kd, lti
from dpfilter.errors import DimensionError, DomainError, StabilityError
from dpfilter.models import FilterRealization, ParticipantModel, error_system, error_variance, stationary_state_cov
from dpfilter.privacy import PrivacyBudget, kappa

KMH = 3.6


def _joint_error_variance(m: ParticipantModel, f: FilterRealization, sigma_v=0.0, horizon=4000):
    """Independent oracle: stationary error from a dense impulse response of the joint plant/filter."""
    n, ns, p = m.n_states, f.F.shape[0], m.n_meas
    A = np.block([[m.A, np.zeros((n, ns))], [f.G @ m.C, f.F]])
    B = np.block([[m.B, np.zeros((n, p))], [f.G @ m.D, sigma_v * f.G]])
    C = np.hstack([m.L - f.K @ m.C, -f.H])
    D = np.hstack([-f.K @ m.D, -sigma_v * f.K])
    if max(abs(np.linalg.eigvals(A))) < 1:
        P = sla.solve_discrete_lyapunov(A, B @ B.T)
        return float(np.trace(C @ P @ C.T + D @ D.T))
    # marginally stable plant: simulate the error in the observer coordinates directly
    E = m.A - f.G @ m.C
    Be = np.hstack([m.B - f.G @ m.D, -sigma_v * f.G])
    Ce = m.L - f.K @ m.C
    De = np.hstack([-f.K @ m.D, -sigma_v * f.K])
    total = np.trace(De @ De.T)
    X = Be
    for _ in range(horizon):
        total += np.sum((Ce @ X) ** 2)
        X = E @ X
    return float(total)


@pytest.fixture
def unit_traffic():
    return kd.traffic_model(n=1, target_scale=1.0)


def test_traffic_kalman_closed_form(unit_traffic):
    kf = kd.steady_state_kf(unit_traffic)
    np.testing.assert_allclose(kf.P, [[3, 2], [2, 2]], atol=1e-10)
    np.testing.assert_allclose(kf.Kf.ravel(), [0.75, 0.5], atol=1e-12)
    np.testing.assert_allclose(kf.Kp.ravel(), [1.25, 0.5], atol=1e-12)
    assert kf.realization.notes["closed_loop_radius"] < 1


def test_traffic_sensitivity_gain(unit_traffic):
    kf = kd.steady_state_kf(unit_traffic)
    f = kf.realization
    # dense-grid oracle of |H (zI - F)^-1 G C S + K C S|
    w = np.linspace(0, np.pi, 200_001)
    CS = unit_traffic.C @ unit_traffic.S
    vals = [abs((f.H @ np.linalg.solve(np.exp(1j * x) * np.eye(2) - f.F, f.G @ CS) + f.K @ CS)[0, 0])
            for x in w[::100]]
    g = kd.sensitivity_gain(unit_traffic, f)
    assert g == pytest.approx(max(vals), rel=1e-6)
    assert g == pytest.approx(math.sqrt(4 / 7), rel=1e-9)
    assert g ** 2 == pytest.approx(0.5714, abs=1e-4)


def test_sensitivity_scales_with_target(unit_traffic):
    f1 = kd.steady_state_kf(unit_traffic).realization
    m2 = unit_traffic.with_L([[0.0, 0.005]])
    f2 = kd.steady_state_kf(m2).realization
    assert kd.sensitivity_gain(m2, f2) == pytest.approx(0.005 * kd.sensitivity_gain(unit_traffic, f1), rel=1e-9)


@pytest.mark.parametrize("form", ["filter", "predictor"])
@pytest.mark.parametrize("sigma_v", [0.0, 3.0])
def test_error_variance_matches_oracle(unit_traffic, form, sigma_v):
    f = kd.steady_state_kf(unit_traffic, form).realization
    assert error_variance(unit_traffic, f, sigma_v) == pytest.approx(
        _joint_error_variance(unit_traffic, f, sigma_v), rel=1e-8)


def test_error_variance_stable_plant_joint_form(rng):
    m = ParticipantModel([[0.5, 0.2], [0.0, 0.7]], [[1.0, 0.0], [0.3, 0.0]], [[1.0, 0.0]], [[0.0, 1.0]],
                         [[0.0, 1.0]], np.diag([1.0, 0.0]), 1.0, [0.0, 0.0])
    f = FilterRealization([[0.3]], [[0.2]], [[1.0]], [[0.1]])
    assert error_variance(m, f) == pytest.approx(_joint_error_variance(m, f), rel=1e-9)
    unstable = FilterRealization([[1.1]], [[0.2]], [[1.0]], [[0.1]])
    with pytest.raises(StabilityError):
        error_variance(m, unstable)


def test_kalman_is_optimal_among_perturbed_gains(unit_traffic, rng):
    kf = kd.steady_state_kf(unit_traffic, "predictor")
    best = error_variance(unit_traffic, kf.realization)
    m = unit_traffic
    for _ in range(20):
        G = kf.Kp + 0.05 * rng.standard_normal(kf.Kp.shape)
        F = m.A - G @ m.C
        if max(abs(np.linalg.eigvals(F))) >= 1:
            continue
        f = FilterRealization(F, G, m.L, np.zeros((1, 1)))
        assert error_variance(m, f) >= best - 1e-12


def test_predicted_traffic_rmse_values():
    sc = kd.build_traffic_scenario()
    b = sc.budget
    out = kd.design_output_noise_dp(sc.models, b)
    comp = kd.design_input_noise_dp(sc.models, b, compensated=True)
    plain = kd.design_input_noise_dp(sc.models, b, compensated=False)
    # oracle: 200 identical vehicles, each contributing (1/n)^2 of its unit-target error variance
    m1 = kd.traffic_model(n=1, target_scale=1.0)
    e1 = _joint_error_variance(m1, kd.steady_state_kf(m1).realization)
    g1 = math.sqrt(4 / 7)
    k = kappa(b)
    want_out = 200 * e1 / 200 ** 2 + (k * 100 * g1 / 200) ** 2
    assert out.predicted_mse == pytest.approx(want_out, rel=1e-9)
    assert out.predicted_rmse * KMH == pytest.approx(2.4033, abs=1e-3)
    sv = k * 100
    fc = kd.steady_state_kf(m1, extra_meas_var=sv * sv).realization
    assert comp.predicted_mse == pytest.approx(_joint_error_variance(m1, fc, sv) / 200, rel=1e-8)
    fp = kd.steady_state_kf(m1).realization
    assert plain.predicted_mse == pytest.approx(_joint_error_variance(m1, fp, sv) / 200, rel=1e-8)
    assert comp.predicted_mse < plain.predicted_mse
    assert plain.predicted_rmse * KMH == pytest.approx(25.8, rel=0.01)


def test_input_sigma_scales_with_rho():
    b = PrivacyBudget(math.log(3), 0.05)
    m = kd.traffic_model(n=1)
    s1 = kd.input_noise_sigma(m, b)
    assert kd.input_noise_sigma(m.with_rho(300.0), b) == pytest.approx(3 * s1, rel=1e-14)
    assert kd.input_noise_sigma(m.with_rho(0.0), b) == 0.0
    assert s1 == pytest.approx(kappa(b) * 100)


def test_output_noise_scales_with_rho():
    b = PrivacyBudget(math.log(3), 0.05)
    m = kd.traffic_model(n=1)
    a = kd.design_output_noise_dp([m], b)
    c = kd.design_output_noise_dp([m.with_rho(250.0)], b)
    assert c.output_sigma == pytest.approx(2.5 * a.output_sigma, rel=1e-12)


@pytest.mark.slow
def test_monte_carlo_matches_prediction():
    sc = kd.build_traffic_scenario(n=50)
    for design in (kd.design_output_noise_dp(sc.models, sc.budget),
                   kd.design_input_noise_dp(sc.models, sc.budget, compensated=True)):
        r = kd.monte_carlo_rmse(design, 500, 60, seed=2, burn_in=150)
        assert abs(r.rmse ** 2 - design.predicted_mse) <= 4 * r.stderr


def test_monte_carlo_deterministic_and_prefix_stable():
    sc = kd.build_traffic_scenario(n=5)
    d = kd.design_output_noise_dp(sc.models, sc.budget)
    a = kd.monte_carlo_rmse(d, 100, 20, 7, kf_init=sc.kf_init, burn_in=20)
    b = kd.monte_carlo_rmse(d, 100, 20, 7, kf_init=sc.kf_init, burn_in=20, chunk=3)
    assert a.rmse == b.rmse
    np.testing.assert_array_equal(a.rms_trace, b.rms_trace)


def test_convergence_from_biased_init():
    sc = kd.build_traffic_scenario(n=20)
    comp = kd.design_input_noise_dp(sc.models, sc.budget, compensated=True)
    out = kd.design_output_noise_dp(sc.models, sc.budget)
    rc = kd.monte_carlo_rmse(comp, 300, 20, 1, kf_init=sc.kf_init, burn_in=200)
    ro = kd.monte_carlo_rmse(out, 300, 20, 1, kf_init=sc.kf_init, burn_in=200)
    assert rc.convergence_step > ro.convergence_step
    assert rc.rms_trace[0] > 5 * rc.rmse  # starts 30 km/h off


def test_model_validation():
    A, B, C, D = [[1.0, 1.0], [0.0, 1.0]], [[0.5, 0.0], [1.0, 0.0]], [[1.0, 0.0]], [[0.0, 1.0]]
    L, S = [[0.0, 1.0]], np.diag([1.0, 0.0])
    with pytest.raises(DomainError):
        ParticipantModel(A, B, C, [[0.0, 0.0]], L, S, 1.0, [0, 0])  # D rank deficient
    with pytest.raises(DomainError):
        ParticipantModel(A, B, [[0.0, 1.0]], D, L, S, 1.0, [0, 0])  # position unobservable
    with pytest.raises(DomainError):
        ParticipantModel(A, [[0.0, 0.0], [0.0, 0.0]], C, D, L, S, 1.0, [0, 0])  # not stabilizable
    with pytest.raises(DomainError):
        ParticipantModel(A, B, C, D, L, np.diag([0.5, 0.0]), 1.0, [0, 0])
    with pytest.raises(DomainError):
        ParticipantModel(A, B, C, D, L, S, -1.0, [0, 0])
    with pytest.raises(DimensionError):
        ParticipantModel(A, B, C, D, [[1.0]], S, 1.0, [0, 0])
    with pytest.raises(DomainError):
        kd.steady_state_kf(kd.traffic_model(), "smoother")
    with pytest.raises(DomainError):
        kd.build_traffic_scenario(n=0)


def test_model_round_trip():
    m = kd.traffic_model()
    m2 = ParticipantModel.from_dict(m.to_dict())
    for k in ("A", "B", "C", "D", "L", "S", "x0_mean", "x0_cov"):
        np.testing.assert_array_equal(getattr(m, k), getattr(m2, k))
    f = kd.steady_state_kf(m).realization
    f2 = FilterRealization.from_dict(f.to_dict())
    np.testing.assert_array_equal(f.F, f2.F)


def test_error_system_shapes():
    m = kd.traffic_model(n=1)
    f = kd.steady_state_kf(m).realization
    E = error_system(m, f, 2.0)
    assert E.n_states == 2 and E.n_inputs == 3
    assert lti.is_stable(E)


def test_stationary_state_cov():
    m = ParticipantModel([[0.5]], [[1.0, 0.0]], [[1.0]], [[0.0, 1.0]], [[1.0]], [[1.0]], 1.0, [0.0])
    assert stationary_state_cov(m)[0, 0] == pytest.approx(1 / 0.75)
