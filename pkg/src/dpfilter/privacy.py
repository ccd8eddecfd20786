"""Privacy budgets, sensitivities and the Laplace/Gaussian perturbation primitives."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import lti
from .errors import DomainError, UnsupportedError
from .numerics import NoiseStream, q_inverse, sample


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float = 0.0

    def __post_init__(self):
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise DomainError(f"epsilon must be positive and finite, got {self.epsilon}")
        if not (0.0 <= self.delta < 1.0):
            raise DomainError(f"delta must lie in [0, 1), got {self.delta}")

    @property
    def kappa(self) -> float:
        return kappa(self)


def kappa(budget: PrivacyBudget) -> float:
    """Gaussian-mechanism multiplier: noise std per unit of l2 sensitivity.

    kappa = (K + sqrt(K^2 + 2 eps)) / (2 eps) with K = Q^-1(delta).
    """
    if not (0.0 < budget.delta < 1.0):
        raise DomainError(f"kappa needs delta in (0, 1), got {budget.delta}")
    K = q_inverse(budget.delta)
    eps = budget.epsilon
    return (K + math.sqrt(K * K + 2.0 * eps)) / (2.0 * eps)


# --------------------------------------------------------------------------
# adjacency relations
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BoundedVariation:
    """One participant's signal changes by at most ``bounds[i]`` in the ``orders[i]``-norm."""

    orders: tuple[float, ...]
    bounds: tuple[float, ...]

    def __post_init__(self):
        if len(self.orders) != len(self.bounds):
            raise DomainError("orders and bounds must have one entry per participant")
        if any(b < 0 for b in self.bounds):
            raise DomainError("adjacency bounds must be nonnegative")

    @classmethod
    def uniform(cls, n: int, bound: float, order: float = 2) -> BoundedVariation:
        return cls((order,) * n, (bound,) * n)


@dataclass(frozen=True)
class StateTrajectory:
    """Selected coordinates ``S_i x_i`` of one participant move by at most ``rho[i]`` in l2."""

    selections: tuple[np.ndarray, ...]
    rho: tuple[float, ...]

    def __post_init__(self):
        if len(self.selections) != len(self.rho):
            raise DomainError("one selection matrix per bound")
        if any(r < 0 for r in self.rho):
            raise DomainError("rho must be nonnegative")
        for S in self.selections:
            S = np.asarray(S)
            if S.ndim != 2 or S.shape[0] != S.shape[1] or np.any(S - np.diag(np.diag(S))) \
                    or not np.all(np.isin(np.diag(S), (0.0, 1.0))):
                raise DomainError("selection matrices must be diagonal with 0/1 entries")


@dataclass(frozen=True)
class EventStream:
    """Integer streams differing by one event at one time (unit l1 change)."""


AdjacencySpec = BoundedVariation | StateTrajectory | EventStream


def adjacency_from_dict(d: dict, n: int | None = None) -> AdjacencySpec:
    kind = d.get("kind", "bounded")
    if kind == "bounded":
        bounds = d["bounds"]
        if np.isscalar(bounds):
            if n is None:
                raise DomainError("scalar adjacency bound needs the participant count")
            bounds = [bounds] * n
        orders = d.get("orders", 2)
        if np.isscalar(orders):
            orders = [orders] * len(bounds)
        return BoundedVariation(tuple(float(o) for o in orders), tuple(float(b) for b in bounds))
    if kind == "event":
        return EventStream()
    if kind == "state":
        sel = [np.diag(s) for s in d["selections"]]
        return StateTrajectory(tuple(sel), tuple(float(r) for r in d["rho"]))
    raise DomainError(f"unknown adjacency kind {kind!r}")


# --------------------------------------------------------------------------
# sensitivities
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SensitivityValue:
    p: int
    value: float


def incremental_gain(sys: lti.System, r: float, p: int) -> float:
    """l_r -> l_p incremental gain of a linear system.

    Implemented pairs: (2, 2) is the H-infinity norm; (1, 1) the largest column
    l1 mass of the impulse response; (1, 2) the largest column l2 energy. The
    l2 -> l1 gain of any nonzero system is unbounded, so (2, 1) is refused.
    """
    if (r, p) == (2, 2):
        return lti.hinf_norm(sys)
    if r == 1 and p in (1, 2):
        T = lti.default_horizon(sys)
        ir = lti.impulse_response(sys, T)
        if p == 1:
            return float(np.max(np.sum(np.abs(ir.taps), axis=(0, 1)))) + ir.tail_bound
        return float(np.sqrt(np.max(np.sum(ir.taps ** 2, axis=(0, 1)))))
    raise UnsupportedError(f"no incremental gain formula for l{r:g} -> l{p}")


def sensitivity_linear_aggregate(systems, adjacency: BoundedVariation, p: int) -> SensitivityValue:
    """``max_i gain(G_i) * b_i`` for the aggregate ``sum_i G_i u_i``."""
    if not isinstance(adjacency, BoundedVariation):
        raise UnsupportedError("aggregate sensitivity needs a bounded-variation adjacency")
    if len(systems) != len(adjacency.bounds):
        raise DomainError("one adjacency bound per channel is required")
    worst = 0.0
    for G, r, b in zip(systems, adjacency.orders, adjacency.bounds):
        if b == 0.0:
            continue
        worst = max(worst, incremental_gain(G, r, p) * b)
    return SensitivityValue(p, worst)


def sensitivity_event(G: lti.System, p: int) -> SensitivityValue:
    """Sensitivity of a SISO filter to a single unit event: the l_p norm of its impulse response."""
    if p == 2:
        return SensitivityValue(2, lti.h2_norm(G))
    if p == 1:
        ss = lti._require_stable(G, "sensitivity_event")
        T = lti.default_horizon(ss)
        ir = lti.impulse_response(ss, T)
        return SensitivityValue(1, ir.l1())
    raise UnsupportedError(f"event sensitivity only for p in (1, 2), got {p}")


# --------------------------------------------------------------------------
# ledger and perturbations
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LedgerEntry:
    mechanism: str
    epsilon: float
    delta: float
    postprocessing: bool = False


@dataclass
class BudgetLedger:
    """Append-only record of mechanism charges; post-processing entries cost nothing."""

    entries: list[LedgerEntry] = field(default_factory=list)

    def charge(self, mechanism: str, budget: PrivacyBudget, delta: float | None = None) -> LedgerEntry:
        entry = LedgerEntry(mechanism, budget.epsilon, budget.delta if delta is None else delta)
        self.entries.append(entry)
        return entry

    @property
    def total(self) -> tuple[float, float]:
        eps = sum(e.epsilon for e in self.entries if not e.postprocessing)
        delta = sum(e.delta for e in self.entries if not e.postprocessing)
        return eps, delta

    def to_list(self) -> list[dict]:
        return [e.__dict__.copy() for e in self.entries]


def register_postprocessing(ledger: BudgetLedger, description: str) -> BudgetLedger:
    ledger.entries.append(LedgerEntry(description or "post-processing", 0.0, 0.0, postprocessing=True))
    return ledger


@dataclass(frozen=True)
class Perturbation:
    signal: np.ndarray
    scale: float
    entry: LedgerEntry


def _noise_like(x: np.ndarray, distribution: str, scale: float, seed: int) -> np.ndarray:
    steps = x.shape[0] if x.ndim else 1
    dim = int(np.prod(x.shape[1:])) if x.ndim > 1 else 1
    w = sample(NoiseStream(distribution, scale, seed, dim), steps)
    return w.reshape(x.shape)


def laplace_perturb(signal, sensitivity: float, budget: PrivacyBudget, seed: int,
                    ledger: BudgetLedger | None = None, mechanism: str = "laplace") -> Perturbation:
    """Add i.i.d. Laplace(sensitivity/epsilon) noise to every coordinate of every step."""
    if sensitivity < 0:
        raise DomainError("sensitivity must be nonnegative")
    x = np.asarray(signal, dtype=float)
    b = sensitivity / budget.epsilon
    out = x + _noise_like(x, "laplace", b, seed)
    ledger = BudgetLedger() if ledger is None else ledger
    entry = ledger.charge(mechanism, budget, delta=0.0)
    return Perturbation(out, b, entry)


def gaussian_perturb(signal, sensitivity: float, budget: PrivacyBudget, seed: int,
                     ledger: BudgetLedger | None = None, mechanism: str = "gaussian") -> Perturbation:
    """Add i.i.d. Gaussian noise with std ``kappa(budget) * sensitivity``."""
    if sensitivity < 0:
        raise DomainError("sensitivity must be nonnegative")
    if budget.delta == 0.0:
        raise UnsupportedError("the Gaussian mechanism needs delta > 0")
    x = np.asarray(signal, dtype=float)
    sigma = kappa(budget) * sensitivity
    out = x + _noise_like(x, "gaussian", sigma, seed)
    ledger = BudgetLedger() if ledger is None else ledger
    entry = ledger.charge(mechanism, budget)
    return Perturbation(out, sigma, entry)
