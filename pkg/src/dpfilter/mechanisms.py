"""Private aggregation of participant signals through linear channels.

The released quantity is ``sum_i G_i u_i``. Noise goes either on each input
``u_i`` before its channel or once on the aggregate output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import lti
from .errors import DimensionError, DomainError, UnsupportedError
from .numerics import NoiseStream, derive_seed, sample, spectral_radius
from .privacy import (BoundedVariation, BudgetLedger, PrivacyBudget, incremental_gain, kappa,
                      sensitivity_linear_aggregate)

TIE_TOL = 1e-12


@dataclass(frozen=True)
class AggregatorPipeline:
    channels: tuple[lti.StateSpace, ...]
    placement: str
    noise_kind: str
    sigma: tuple[float, ...]  # one scale per channel (input) or a single scale (output)
    adjacency: BoundedVariation
    budget: PrivacyBudget
    predicted_mse: float

    @property
    def n_outputs(self) -> int:
        return self.channels[0].n_outputs


def _prepare(channels, adjacency) -> tuple[lti.StateSpace, ...]:
    chans = tuple(lti.to_state_space(G) for G in channels)
    if not chans:
        raise DomainError("at least one channel is required")
    p = chans[0].n_outputs
    if any(G.n_outputs != p for G in chans):
        raise DimensionError("all channels must have the same number of outputs")
    if len(adjacency.bounds) != len(chans):
        raise DomainError(f"{len(chans)} channels but {len(adjacency.bounds)} adjacency bounds")
    for G in chans:
        lti._require_stable(G, "aggregate MSE")
    return chans


def _h2_sq(G: lti.StateSpace) -> float:
    return lti.h2_norm(G) ** 2


def design_input_perturbation(channels, adjacency: BoundedVariation, budget: PrivacyBudget,
                              noise_kind: str = "gaussian") -> AggregatorPipeline:
    """Perturb every input before its channel.

    Gaussian: ``sigma_i = kappa * b_i`` (needs ``r_i = 2``). Laplace: a common
    ``Lap(B/eps)`` with ``B = max_i b_i`` on l1-bounded inputs.
    """
    chans = _prepare(channels, adjacency)
    p = chans[0].n_outputs
    if noise_kind == "gaussian":
        if any(r != 2 for r in adjacency.orders):
            raise UnsupportedError("Gaussian input perturbation needs l2-bounded inputs")
        k = kappa(budget)
        sigma = tuple(k * b for b in adjacency.bounds)
        var = [s * s for s in sigma]
    elif noise_kind == "laplace":
        # identity pre-query: its l_r -> l_1 gain is 1 for r = 1 and unbounded otherwise
        B = max(incremental_gain(lti.StateSpace.static(np.eye(G.n_inputs)), r, 1) * b
                for G, r, b in zip(chans, adjacency.orders, adjacency.bounds))
        scale = B / budget.epsilon
        sigma = (scale,) * len(chans)
        var = [2.0 * scale * scale] * len(chans)
    else:
        raise DomainError(f"unknown noise kind {noise_kind!r}")
    mse = sum(v * _h2_sq(G) for v, G in zip(var, chans)) / p
    return AggregatorPipeline(chans, "input", noise_kind, sigma, adjacency, budget, mse)


def design_output_perturbation(channels, adjacency: BoundedVariation, budget: PrivacyBudget,
                               noise_kind: str = "gaussian") -> AggregatorPipeline:
    """Perturb the aggregate once; the scale follows the worst channel's gain times its bound."""
    chans = _prepare(channels, adjacency)
    if noise_kind == "gaussian":
        if any(r != 2 for r in adjacency.orders):
            raise UnsupportedError("Gaussian output perturbation needs l2-bounded inputs")
        sigma = kappa(budget) * sensitivity_linear_aggregate(chans, adjacency, 2).value
        mse = sigma * sigma
    elif noise_kind == "laplace":
        sigma = sensitivity_linear_aggregate(chans, adjacency, 1).value / budget.epsilon
        mse = 2.0 * sigma * sigma
    else:
        raise DomainError(f"unknown noise kind {noise_kind!r}")
    return AggregatorPipeline(chans, "output", noise_kind, (sigma,), adjacency, budget, mse)


@dataclass(frozen=True)
class Crossover:
    input_mse: float
    output_mse: float
    preferred: str  # "input", "output" or "tie"


def crossover_analysis(channels, adjacency: BoundedVariation, budget: PrivacyBudget) -> Crossover:
    mi = design_input_perturbation(channels, adjacency, budget).predicted_mse
    mo = design_output_perturbation(channels, adjacency, budget).predicted_mse
    if abs(mi - mo) <= TIE_TOL * max(abs(mi), abs(mo), 1.0):
        pref = "tie"
    else:
        pref = "input" if mi < mo else "output"
    return Crossover(mi, mo, pref)


def transient_steps(channels) -> int:
    """Five time constants of the slowest pole; the state dimension for FIR channels."""
    steps = 0
    for G in channels:
        G = lti.to_state_space(G)
        r = spectral_radius(G.A) if G.n_states else 0.0
        if r < 1e-8:
            steps = max(steps, G.n_states)
        else:
            steps = max(steps, G.n_states, math.ceil(5.0 / -math.log(r)))
    return steps


@dataclass(frozen=True)
class PipelineRun:
    released: np.ndarray
    true: np.ndarray
    mse: float
    discard: int


def _as_inputs(pipeline: AggregatorPipeline, inputs) -> list[np.ndarray]:
    if len(inputs) != len(pipeline.channels):
        raise DimensionError(f"{len(pipeline.channels)} channels but {len(inputs)} input signals")
    out = []
    T = None
    for G, u in zip(pipeline.channels, inputs):
        u = np.asarray(u, dtype=float)
        u = u.reshape(-1, 1) if u.ndim == 1 else u
        if u.ndim != 2 or u.shape[1] != G.n_inputs:
            raise DimensionError(f"input of shape {u.shape} does not fit a channel with {G.n_inputs} inputs")
        if T is not None and u.shape[0] != T:
            raise DimensionError("all input signals must share one horizon")
        T = u.shape[0]
        out.append(u)
    return out


def _noise_paths(pipeline: AggregatorPipeline, T: int, seeds: list[int]) -> list[np.ndarray]:
    """Per-trial noise, as arrays of shape ``(T, trials, dim)`` per channel (input) or one array (output)."""
    def draw(scale, seed, dim):
        return sample(NoiseStream(pipeline.noise_kind, scale, seed, dim), T)

    if pipeline.placement == "input":
        return [np.stack([draw(s, derive_seed(seed, i), G.n_inputs) for seed in seeds], axis=1)
                for i, (G, s) in enumerate(zip(pipeline.channels, pipeline.sigma))]
    n = len(pipeline.channels)
    return [np.stack([draw(pipeline.sigma[0], derive_seed(seed, n), pipeline.n_outputs) for seed in seeds], axis=1)]


def _released(pipeline: AggregatorPipeline, U: list[np.ndarray], noise: list[np.ndarray]) -> np.ndarray:
    T, nb = noise[0].shape[:2]
    Y = np.zeros((T, nb, pipeline.n_outputs))
    for i, (G, u) in enumerate(zip(pipeline.channels, U)):
        x = u[:, None, :] + noise[i] if pipeline.placement == "input" else np.broadcast_to(u[:, None, :], (T, nb, u.shape[1]))
        Y += lti.simulate_batch(G, x)
    if pipeline.placement == "output":
        Y += noise[0]
    return Y


def aggregate(channels, inputs) -> np.ndarray:
    """Noiseless ``sum_i G_i u_i``; shape ``(T, p)``."""
    total = None
    for G, u in zip(channels, inputs):
        u = np.asarray(u, dtype=float).reshape(len(u), -1)
        # same simulation path as the released signal, so zero noise reproduces it bit for bit
        y = lti.simulate_batch(lti.to_state_space(G), u[:, None, :])[:, 0, :]
        total = np.zeros_like(y) + y if total is None else total + y
    return total


def run_pipeline(pipeline: AggregatorPipeline, inputs, seed: int,
                 ledger: BudgetLedger | None = None) -> PipelineRun:
    """One release of the pipeline on ``inputs`` (one signal per channel)."""
    U = _as_inputs(pipeline, inputs)
    T = U[0].shape[0]
    noise = _noise_paths(pipeline, T, [seed])
    released = _released(pipeline, U, noise)[:, 0, :]
    true = aggregate(pipeline.channels, U)
    if ledger is not None:
        ledger.charge(f"{pipeline.noise_kind}-{pipeline.placement}-aggregate", pipeline.budget,
                      delta=0.0 if pipeline.noise_kind == "laplace" else None)
    k = min(transient_steps(pipeline.channels), T - 1)
    mse = float(np.mean((released[k:] - true[k:]) ** 2))
    return PipelineRun(released, true, mse, k)


@dataclass(frozen=True)
class MonteCarloResult:
    mse: float
    stderr: float
    trials: int
    per_trial: np.ndarray


def monte_carlo_mse(pipeline: AggregatorPipeline, inputs, trials: int, seed: int) -> MonteCarloResult:
    """Steady-state per-coordinate MSE over ``trials`` independent releases (trial seeds derived from ``seed``)."""
    if trials < 1:
        raise DomainError("trials must be positive")
    U = _as_inputs(pipeline, inputs)
    T = U[0].shape[0]
    seeds = [derive_seed(seed, t) for t in range(trials)]
    released = _released(pipeline, U, _noise_paths(pipeline, T, seeds))
    true = aggregate(pipeline.channels, U)
    k = min(transient_steps(pipeline.channels), T - 1)
    err = released[k:] - true[k:, None, :]
    per_trial = np.mean(err ** 2, axis=(0, 2))
    se = float(np.std(per_trial, ddof=1) / math.sqrt(trials)) if trials > 1 else math.nan
    return MonteCarloResult(float(per_trial.mean()), se, trials, per_trial)


def moving_average(l: int) -> lti.RationalTF:
    """``(1/l) sum_{k<l} z^-k``."""
    if l < 1:
        raise DomainError("moving-average length must be positive")
    return lti.RationalTF(np.full(l, 1.0 / l), np.array([1.0]))
