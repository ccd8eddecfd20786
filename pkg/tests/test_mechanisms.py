from __future__ import annotations

import math

import numpy as np
import pytest
from conftest import random_stable_ss

from dpfilter import lti, mechanisms as mech
from dpfilter.errors import DimensionError, DomainError, UnsupportedError
from dpfilter.privacy import BoundedVariation, BudgetLedger, PrivacyBudget, kappa


def test_moving_average_mse_formulas(budget_ln3):
    k2 = kappa(budget_ln3) ** 2
    for n in (1, 3, 10):
        for l in (1, 4, 10):
            chans = [mech.moving_average(l)] * n
            adj = BoundedVariation.uniform(n, 2.0)
            inp = mech.design_input_perturbation(chans, adj, budget_ln3)
            out = mech.design_output_perturbation(chans, adj, budget_ln3)
            assert inp.predicted_mse == pytest.approx(k2 * 4.0 * n / l, rel=1e-12)
            assert out.predicted_mse == pytest.approx(k2 * 4.0, rel=1e-12)


def test_crossover_grid(budget_ln3):
    for n in range(1, 11):
        for l in range(1, 11):
            co = mech.crossover_analysis([mech.moving_average(l)] * n, BoundedVariation.uniform(n, 1.0), budget_ln3)
            want = "input" if n < l else ("tie" if n == l else "output")
            assert co.preferred == want, (n, l)


def test_mimo_channels_against_dense_formula(rng, budget_ln3):
    chans = [random_stable_ss(rng, 2, 2, 2) for _ in range(3)]
    bounds = (1.0, 0.5, 2.0)
    adj = BoundedVariation((2.0,) * 3, bounds)
    k = kappa(budget_ln3)
    inp = mech.design_input_perturbation(chans, adj, budget_ln3)
    want = sum((k * b) ** 2 * lti.h2_norm(G) ** 2 for G, b in zip(chans, bounds)) / 2
    assert inp.predicted_mse == pytest.approx(want, rel=1e-12)
    out = mech.design_output_perturbation(chans, adj, budget_ln3)
    worst = max(lti.hinf_norm(G) * b for G, b in zip(chans, bounds))
    assert out.sigma[0] == pytest.approx(k * worst, rel=1e-12)


@pytest.mark.parametrize("placement", ["input", "output"])
@pytest.mark.parametrize("noise", ["gaussian", "laplace"])
def test_monte_carlo_matches_prediction(placement, noise, budget_ln3):
    n, l = 4, 3
    order = 2 if noise == "gaussian" else 1
    chans = [mech.moving_average(l)] * n
    adj = BoundedVariation.uniform(n, 1.0, order)
    design = mech.design_input_perturbation if placement == "input" else mech.design_output_perturbation
    pipe = design(chans, adj, budget_ln3, noise)
    inputs = [np.sin(0.1 * np.arange(400) + i) for i in range(n)]
    mc = mech.monte_carlo_mse(pipe, inputs, 300, seed=4)
    assert abs(mc.mse - pipe.predicted_mse) <= 4 * mc.stderr
    assert mc.per_trial.shape == (300,)


def test_laplace_needs_l1_inputs(budget_ln3):
    chans = [mech.moving_average(3)] * 2
    with pytest.raises(UnsupportedError):
        mech.design_input_perturbation(chans, BoundedVariation.uniform(2, 1.0, 2), budget_ln3, "laplace")
    with pytest.raises(UnsupportedError):
        mech.design_output_perturbation(chans, BoundedVariation.uniform(2, 1.0, 2), budget_ln3, "laplace")
    with pytest.raises(UnsupportedError):
        mech.design_input_perturbation(chans, BoundedVariation.uniform(2, 1.0, 1), budget_ln3, "gaussian")


def test_laplace_scale(budget_ln3):
    chans = [mech.moving_average(4)] * 3
    adj = BoundedVariation.uniform(3, 2.0, 1)
    inp = mech.design_input_perturbation(chans, adj, budget_ln3, "laplace")
    assert inp.sigma[0] == pytest.approx(2.0 / budget_ln3.epsilon)
    out = mech.design_output_perturbation(chans, adj, budget_ln3, "laplace")
    assert out.sigma[0] == pytest.approx(2.0 / budget_ln3.epsilon, rel=1e-9)  # l1 mass of MA is 1


def test_pipeline_errors(budget_ln3):
    with pytest.raises(DomainError):
        mech.design_input_perturbation([], BoundedVariation((), ()), budget_ln3)
    with pytest.raises(DomainError):
        mech.design_input_perturbation([mech.moving_average(2)], BoundedVariation.uniform(2, 1.0), budget_ln3)
    from dpfilter.errors import StabilityError
    with pytest.raises(StabilityError):
        mech.design_input_perturbation([lti.RationalTF([1.0], [1.0, -1.0])], BoundedVariation.uniform(1, 1.0),
                                       budget_ln3)
    pipe = mech.design_output_perturbation([mech.moving_average(2)] * 2, BoundedVariation.uniform(2, 1.0),
                                           budget_ln3)
    with pytest.raises(DimensionError):
        mech.run_pipeline(pipe, [np.zeros(10)], 0)
    with pytest.raises(DimensionError):
        mech.run_pipeline(pipe, [np.zeros(10), np.zeros(11)], 0)
    with pytest.raises(DomainError):
        mech.moving_average(0)


def test_run_pipeline_zero_noise_is_exact(budget_ln3):
    chans = [mech.moving_average(3)] * 2
    pipe = mech.design_input_perturbation(chans, BoundedVariation.uniform(2, 0.0), budget_ln3)
    u = [np.arange(20.0), np.ones(20)]
    run = mech.run_pipeline(pipe, u, 0)
    assert run.mse == 0.0
    np.testing.assert_allclose(run.true, mech.aggregate(chans, u))


def test_run_pipeline_charges_ledger(budget_ln3):
    pipe = mech.design_output_perturbation([mech.moving_average(3)], BoundedVariation.uniform(1, 1.0), budget_ln3)
    ledger = BudgetLedger()
    mech.run_pipeline(pipe, [np.ones(50)], 1, ledger)
    assert ledger.total == (budget_ln3.epsilon, budget_ln3.delta)


def test_monte_carlo_deterministic(budget_ln3):
    pipe = mech.design_input_perturbation([mech.moving_average(3)] * 2, BoundedVariation.uniform(2, 1.0), budget_ln3)
    u = [np.ones(100)] * 2
    a = mech.monte_carlo_mse(pipe, u, 20, 3)
    b = mech.monte_carlo_mse(pipe, u, 20, 3)
    np.testing.assert_array_equal(a.per_trial, b.per_trial)
    # trial k depends only on (seed, k)
    c = mech.monte_carlo_mse(pipe, u, 10, 3)
    np.testing.assert_array_equal(a.per_trial[:10], c.per_trial)


def test_transient_steps():
    assert mech.transient_steps([mech.moving_average(7)]) == 6
    assert mech.transient_steps([lti.RationalTF([1.0], [1.0, -0.5])]) == math.ceil(5 / math.log(2))
