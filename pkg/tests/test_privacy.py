from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from dpfilter import lti
from dpfilter.errors import DomainError, UnsupportedError
from dpfilter.privacy import (
    BoundedVariation,
    BudgetLedger,
    EventStream,
    PrivacyBudget,
    StateTrajectory,
    adjacency_from_dict,
    gaussian_perturb,
    incremental_gain,
    kappa,
    laplace_perturb,
    register_postprocessing,
    sensitivity_event,
    sensitivity_linear_aggregate,
)


def _kappa_oracle(eps, delta):
    K = norm.isf(delta)
    return (K + math.sqrt(K * K + 2 * eps)) / (2 * eps)


def test_kappa_reference_values():
    assert kappa(PrivacyBudget(math.log(2), 0.05)) == pytest.approx(2.645674, abs=1e-6)
    assert kappa(PrivacyBudget(math.log(3), 0.05)) == pytest.approx(1.756340, abs=1e-6)


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-3, 10.0), st.floats(1e-9, 0.49))
def test_kappa_matches_oracle(eps, delta):
    assert kappa(PrivacyBudget(eps, delta)) == pytest.approx(_kappa_oracle(eps, delta), rel=1e-9)


def test_kappa_monotone():
    k = [kappa(PrivacyBudget(e, 0.05)) for e in (0.1, 0.5, 1.0, 2.0)]
    assert all(a > b for a, b in zip(k, k[1:]))
    k = [kappa(PrivacyBudget(1.0, d)) for d in (1e-6, 1e-3, 0.05, 0.2)]
    assert all(a > b for a, b in zip(k, k[1:]))


def test_budget_validation():
    for eps, delta in [(0.0, 0.1), (-1.0, 0.1), (math.inf, 0.1), (1.0, 1.0), (1.0, -0.1)]:
        with pytest.raises(DomainError):
            PrivacyBudget(eps, delta)
    with pytest.raises(DomainError):
        kappa(PrivacyBudget(1.0, 0.0))


def test_gaussian_needs_delta():
    with pytest.raises(UnsupportedError):
        gaussian_perturb(np.zeros(5), 1.0, PrivacyBudget(1.0), 0)


@pytest.mark.parametrize("factor", [0.5, 2.0, 7.0])
def test_noise_scale_is_linear_in_sensitivity(factor, budget_ln3):
    a = gaussian_perturb(np.zeros(10), 1.0, budget_ln3, 0)
    b = gaussian_perturb(np.zeros(10), factor, budget_ln3, 0)
    assert b.scale == pytest.approx(factor * a.scale, rel=1e-14)
    np.testing.assert_allclose(b.signal, factor * a.signal, rtol=1e-14)
    la_ = laplace_perturb(np.zeros(10), 1.0, budget_ln3, 0)
    lb = laplace_perturb(np.zeros(10), factor, budget_ln3, 0)
    assert lb.scale == pytest.approx(factor * la_.scale, rel=1e-14)


def test_laplace_tail_probability():
    b = 0.7
    p = laplace_perturb(np.zeros(400_000), b * math.log(3), PrivacyBudget(math.log(3)), 5)
    assert p.scale == pytest.approx(b)
    w = p.signal
    for t in (0.5, 1.0, 2.0, 3.0):
        prob = math.exp(-t)
        emp = np.mean(np.abs(w) >= t * b)
        se = math.sqrt(prob * (1 - prob) / w.size)
        assert abs(emp - prob) <= 3 * se


def test_ledger_invariant_under_postprocessing(budget_ln3):
    ledger = BudgetLedger()
    gaussian_perturb(np.zeros(3), 1.0, budget_ln3, 0, ledger)
    before = ledger.total
    for k in range(5):
        register_postprocessing(ledger, f"filter {k}")
    assert ledger.total == before
    assert len(ledger.entries) == 6
    laplace_perturb(np.zeros(3), 1.0, budget_ln3, 1, ledger)
    eps, delta = ledger.total
    assert eps == pytest.approx(2 * budget_ln3.epsilon)
    assert delta == pytest.approx(budget_ln3.delta)  # the Laplace charge is pure
    assert [e["postprocessing"] for e in ledger.to_list()].count(True) == 5


def test_perturbation_reproducible(budget_ln3):
    a = gaussian_perturb(np.ones((20, 2)), 1.0, budget_ln3, 9)
    b = gaussian_perturb(np.ones((20, 2)), 1.0, budget_ln3, 9)
    np.testing.assert_array_equal(a.signal, b.signal)
    assert a.signal.shape == (20, 2)


def test_incremental_gains_against_impulse_response():
    tf = lti.RationalTF([1.0, -0.5], [1.0, -0.6])
    g = lti.impulse_response(tf, 2000).siso
    assert incremental_gain(tf, 1, 1) == pytest.approx(np.sum(np.abs(g)), rel=1e-8)
    assert incremental_gain(tf, 1, 2) == pytest.approx(np.sqrt(np.sum(g ** 2)), rel=1e-10)
    w = np.linspace(0, np.pi, 100_001)
    assert incremental_gain(tf, 2, 2) == pytest.approx(np.abs(lti.freqresp(tf, w)).max(), rel=1e-8)
    with pytest.raises(UnsupportedError):
        incremental_gain(tf, 2, 1)


def test_incremental_gain_mimo_columns():
    ss = lti.StateSpace.static([[1.0, 3.0], [2.0, -4.0]])
    assert incremental_gain(ss, 1, 1) == pytest.approx(7.0)
    assert incremental_gain(ss, 1, 2) == pytest.approx(5.0)


def test_aggregate_sensitivity_worst_channel():
    chans = [lti.RationalTF([0.5], [1.0]), lti.RationalTF([2.0], [1.0])]
    adj = BoundedVariation((2.0, 2.0), (3.0, 1.0))
    assert sensitivity_linear_aggregate(chans, adj, 2).value == pytest.approx(2.0)
    adj = BoundedVariation((2.0, 2.0), (5.0, 1.0))
    assert sensitivity_linear_aggregate(chans, adj, 2).value == pytest.approx(2.5)
    with pytest.raises(DomainError):
        sensitivity_linear_aggregate(chans, BoundedVariation((2.0,), (1.0,)), 2)
    with pytest.raises(UnsupportedError):
        sensitivity_linear_aggregate(chans, EventStream(), 2)


def test_event_sensitivity():
    tf = lti.RationalTF([1.0], [1.0, -0.5])
    assert sensitivity_event(tf, 1).value == pytest.approx(2.0, rel=1e-9)
    assert sensitivity_event(tf, 2).value == pytest.approx(math.sqrt(1 / 0.75), rel=1e-12)
    with pytest.raises(UnsupportedError):
        sensitivity_event(tf, 3)


def test_adjacency_parsing():
    a = adjacency_from_dict({"bounds": 2.0, "orders": 1}, n=3)
    assert a == BoundedVariation((1.0,) * 3, (2.0,) * 3)
    with pytest.raises(DomainError):
        adjacency_from_dict({"bounds": 2.0})
    s = adjacency_from_dict({"kind": "state", "selections": [[1, 0]], "rho": [100]})
    assert isinstance(s, StateTrajectory)
    assert isinstance(adjacency_from_dict({"kind": "event"}), EventStream)
    with pytest.raises(DomainError):
        StateTrajectory((np.array([[0.5, 0], [0, 1]]),), (1.0,))
    with pytest.raises(DomainError):
        BoundedVariation((2.0,), (-1.0,))
