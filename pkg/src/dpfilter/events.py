"""Event-level private filtering of integer event streams.

Adjacent streams differ by one event at one time step (a unit l1 change), so
the l2 sensitivity of a filter is the l2 norm of its impulse response. The
mechanisms here release an approximation of ``G u``:

* input noise: ``G (u + w)``, optionally with a 0/1 detector before ``G``;
* output noise: ``G u + w``;
* ZFE: ``G2 (G1 u + w)`` with ``|G1|^2 = |G|`` and ``G2 = G G1^-1``;
* MMSE: an FIR Wiener post-filter on ``G1 u + w``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sps

from . import lti
from .errors import DomainError, UnsupportedError
from .numerics import derive_seed, solve_toeplitz
from .privacy import (BudgetLedger, PrivacyBudget, kappa, register_postprocessing,
                      sensitivity_event)

MAG_FLOOR = 1e-10
TAIL_ENERGY = 1e-4


@dataclass(frozen=True)
class EventSignal:
    values: np.ndarray
    binary: bool = False

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 1:
            raise DomainError("event signals are one-dimensional")
        if not np.all(np.isfinite(v)) or np.any(v != np.round(v)):
            raise DomainError("event signals must be integer valued")
        v = v.astype(np.int64)
        if self.binary and not np.all((v == 0) | (v == 1)):
            raise DomainError("binary event signal has entries outside {0, 1}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


# --------------------------------------------------------------------------
# input statistics and the reference burst process
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class InputStatistics:
    """Mean and raw autocorrelation ``R_u[k] = E[u_t u_{t+k}]`` for ``k = 0..N``.

    Beyond lag ``N`` the autocorrelation is taken to equal ``mean^2``.
    """

    mean: float
    R: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float).ravel()
        if R.size == 0:
            raise DomainError("autocorrelation needs at least lag 0")
        C = R - self.mean ** 2
        if C.size > 1 and np.linalg.eigvalsh(_toeplitz(C)).min() < -1e-9 * max(C[0], 1e-300):
            raise DomainError("autocovariance is not positive semidefinite")
        R.setflags(write=False)
        object.__setattr__(self, "R", R)

    @property
    def cov(self) -> np.ndarray:
        return self.R - self.mean ** 2

    @classmethod
    def from_samples(cls, u, max_lag: int) -> InputStatistics:
        u = np.asarray(u, dtype=float).ravel()
        if max_lag >= u.size:
            raise DomainError("max_lag must be below the sample length")
        mu = float(u.mean())
        c = u - mu
        T = u.size
        # biased estimator keeps the Toeplitz matrix positive semidefinite
        spec = np.fft.rfft(c, 2 * T)
        acov = np.fft.irfft(spec * np.conj(spec))[: max_lag + 1] / T
        return cls(mu, acov + mu * mu)


def _toeplitz(c: np.ndarray) -> np.ndarray:
    idx = np.abs(np.arange(c.size)[:, None] - np.arange(c.size)[None, :])
    return c[idx]


@dataclass(frozen=True)
class BurstProcess:
    """Two-state on/off Markov chain; ``p_on`` = P(off -> on), ``p_off`` = P(on -> off)."""

    p_on: float = 0.08
    p_off: float = 0.08

    def __post_init__(self):
        if not (0 < self.p_on <= 1 and 0 < self.p_off <= 1):
            raise DomainError("switching probabilities must lie in (0, 1]")

    @property
    def duty(self) -> float:
        return self.p_on / (self.p_on + self.p_off)

    def statistics(self, max_lag: int) -> InputStatistics:
        pi = self.duty
        k = np.arange(max_lag + 1)
        R = pi * (pi + (1.0 - pi) * (1.0 - self.p_on - self.p_off) ** k)
        return InputStatistics(pi, R)

    def sample(self, steps: int, seed: int, batch: int | None = None) -> np.ndarray:
        """Stationary sample path(s): shape ``(steps,)`` or ``(steps, batch)``."""
        rng = np.random.default_rng(seed)
        nb = 1 if batch is None else batch
        state = rng.random(nb) < self.duty
        flips = rng.random((steps, nb))
        out = np.empty((steps, nb), dtype=np.int64)
        for t in range(steps):
            out[t] = state
            state = np.where(state, flips[t] >= self.p_off, flips[t] < self.p_on)
        return out[:, 0] if batch is None else out


# --------------------------------------------------------------------------
# designs
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EventMechanism:
    """Input- or output-noise baseline."""

    kind: str  # "input", "input+detector" or "output"
    G: lti.System
    noise_kind: str
    scale: float
    predicted_mse: float  # nan for the detector variant
    budget: PrivacyBudget


@dataclass(frozen=True)
class EqualizerDesign:
    """Pre-filter ``G1``, privacy noise, post-filter (exact ``G G1^-1`` or FIR taps ``h``)."""

    kind: str  # "zfe" or "mmse"
    G: lti.RationalTF
    G1: lti.RationalTF
    sigma: float
    predicted_mse: float
    lower_bound: float
    budget: PrivacyBudget
    G2: lti.RationalTF | None = None
    h: np.ndarray | None = field(default=None, repr=False)


def _tf(G) -> lti.RationalTF:
    return lti.to_tf(G)


def design_input_noise(G, budget: PrivacyBudget, noise_kind: str = "gaussian",
                       detector: bool = False) -> EventMechanism:
    """Noise on the event stream itself; the identity pre-filter has unit sensitivity."""
    lti._require_stable(G, "design_input_noise")
    h2sq = lti.h2_norm(G) ** 2
    if noise_kind == "laplace":
        scale = 1.0 / budget.epsilon
        mse = 2.0 * scale * scale * h2sq
    elif noise_kind == "gaussian":
        scale = kappa(budget)
        mse = scale * scale * h2sq
    else:
        raise DomainError(f"unknown noise kind {noise_kind!r}")
    if detector:
        return EventMechanism("input+detector", G, noise_kind, scale, math.nan, budget)
    return EventMechanism("input", G, noise_kind, scale, mse, budget)


def design_output_noise(G, budget: PrivacyBudget, noise_kind: str = "gaussian") -> EventMechanism:
    """Noise on ``G u``, scaled by the l1 (Laplace) or l2 (Gaussian) norm of the impulse response."""
    if noise_kind == "laplace":
        scale = sensitivity_event(G, 1).value / budget.epsilon
        mse = 2.0 * scale * scale
    elif noise_kind == "gaussian":
        scale = kappa(budget) * sensitivity_event(G, 2).value
        mse = scale * scale
    else:
        raise DomainError(f"unknown noise kind {noise_kind!r}")
    return EventMechanism("output", G, noise_kind, scale, mse, budget)


def zfe_lower_bound(G, budget: PrivacyBudget) -> float:
    """``kappa^2 ((1/2pi) int |G| dw)^2``: no pre/post split can do better."""
    return kappa(budget) ** 2 * lti.mean_abs_gain(G) ** 2


def design_zfe(G, budget: PrivacyBudget, factor_order: int = 12) -> EqualizerDesign:
    """Pre-filter with the spectral factor of ``|G|``, Gaussian noise, exact inverse post-filter."""
    lti._require_stable(G, "design_zfe")
    tf = _tf(G)
    _, mag = lti.magnitude_grid(tf)
    mag = np.maximum(mag, MAG_FLOOR * mag.max())
    G1, _ = lti.spectral_factor(mag, factor_order)
    G2 = lti.compose_series(lti.invert(G1), tf)
    n1 = lti.h2_norm(G1)
    sigma = kappa(budget) * n1
    mse = sigma * sigma * lti.h2_norm(G2) ** 2
    return EqualizerDesign("zfe", tf, G1, sigma, mse, zfe_lower_bound(tf, budget), budget, G2=G2)


def _impulse(G, T: int | None = None) -> np.ndarray:
    T = lti.default_horizon(G) if T is None else T
    return lti.impulse_response(G, T).siso


def _lagged(c_xy: np.ndarray, offset: int, cov: np.ndarray, lags: np.ndarray) -> np.ndarray:
    """``sum_d c_xy[d] cov[k - d]`` for ``k`` in ``lags``; ``c_xy[i]`` sits at lag ``i - offset``."""
    K = cov.size - 1
    two_sided = np.concatenate([cov[:0:-1], cov])  # lags -K..K
    full = sps.fftconvolve(c_xy, two_sided)
    return full[lags + offset + K]


def second_order_terms(G, G1, stats: InputStatistics, N: int):
    """``R_z[0..N]`` without noise, ``R_yz[0..N]`` and ``R_y[0]`` for ``y = G u``, ``z = G1 u``."""
    g, f = _impulse(G), _impulse(G1)
    mu2 = stats.mean ** 2
    G0, F0 = g.sum(), f.sum()  # DC gains
    cov = stats.cov
    lags = np.arange(N + 1)
    ff = np.convolve(f, f[::-1])
    gf = np.convolve(g, f[::-1])
    gg = np.convolve(g, g[::-1])
    Rz = mu2 * F0 * F0 + _lagged(ff, f.size - 1, cov, lags)
    Ryz = mu2 * G0 * F0 + _lagged(gf, f.size - 1, cov, lags)
    Ry0 = mu2 * G0 * G0 + _lagged(gg, g.size - 1, cov, np.array([0]))[0]
    return Rz, Ryz, Ry0


def design_mmse(G, G1, stats: InputStatistics, budget: PrivacyBudget, N: int = 100) -> EqualizerDesign:
    """FIR post-filter ``h_0..h_N`` solving the Yule-Walker (Wiener-Hopf) equations."""
    if N < 0:
        raise DomainError("FIR order must be nonnegative")
    tf = _tf(G)
    sigma = kappa(budget) * lti.h2_norm(G1)
    Rz, Ryz, Ry0 = second_order_terms(tf, G1, stats, N)
    Rz = Rz.copy()
    Rz[0] += sigma * sigma
    h = solve_toeplitz(Rz, Ryz)
    mse = float(Ry0 - h @ Ryz)
    return EqualizerDesign("mmse", tf, G1, sigma, mse, zfe_lower_bound(tf, budget), budget, h=h)


def detect(sig, threshold: float = 0.5, ledger: BudgetLedger | None = None) -> np.ndarray:
    """``1`` where the signal reaches ``threshold``, else ``0``; free under post-processing."""
    out = (np.asarray(sig, dtype=float) >= threshold).astype(np.int64)
    if ledger is not None:
        register_postprocessing(ledger, "threshold detector")
    return out


# --------------------------------------------------------------------------
# running the mechanisms
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EventRun:
    released: np.ndarray
    reference: np.ndarray
    mse: float
    discard: int


def _noise(kind: str, scale: float, shape, rng: np.random.Generator) -> np.ndarray:
    if scale == 0.0:
        return np.zeros(shape)
    if kind == "gaussian":
        return scale * rng.standard_normal(shape)
    if kind == "laplace":
        return rng.laplace(0.0, scale, shape)
    raise DomainError(f"unknown noise kind {kind!r}")


def _filt(G, x: np.ndarray) -> np.ndarray:
    tf = _tf(G)
    return sps.lfilter(tf.num, tf.den, x, axis=0)


def _settling(G, rel: float = TAIL_ENERGY) -> int:
    """First step after which the impulse response keeps less than ``rel`` of its energy."""
    g = _impulse(G)
    tail = np.cumsum((g ** 2)[::-1])[::-1]
    idx = np.nonzero(tail <= rel * tail[0])[0]
    return int(idx[0]) if idx.size else g.size


def discard_steps(mech) -> int:
    """Warm-up excluded from empirical MSEs: the slowest filter in the chain settles in energy."""
    k = _settling(mech.G)
    if isinstance(mech, EqualizerDesign):
        k = max(k, _settling(mech.G1))
        if mech.G2 is not None:
            k = max(k, _settling(mech.G2))
        if mech.h is not None:
            k += mech.h.size
    return k


def release(mech, U: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Apply ``mech`` to event inputs ``U`` (shape ``(T,)`` or ``(T, batch)``)."""
    U = np.asarray(U, dtype=float)
    if isinstance(mech, EventMechanism):
        if mech.kind == "output":
            return _filt(mech.G, U) + _noise(mech.noise_kind, mech.scale, U.shape, rng)
        noisy = U + _noise(mech.noise_kind, mech.scale, U.shape, rng)
        if mech.kind == "input+detector":
            noisy = detect(noisy).astype(float)
        return _filt(mech.G, noisy)
    if isinstance(mech, EqualizerDesign):
        z = _filt(mech.G1, U) + _noise("gaussian", mech.sigma, U.shape, rng)
        if mech.kind == "zfe":
            return _filt(mech.G2, z)
        return sps.lfilter(mech.h, [1.0], z, axis=0)
    raise UnsupportedError(f"cannot run {type(mech).__name__}")


def _charge(mech, ledger: BudgetLedger):
    kind = mech.noise_kind if isinstance(mech, EventMechanism) else "gaussian"
    ledger.charge(f"event-{mech.kind}", mech.budget, delta=0.0 if kind == "laplace" else None)
    if isinstance(mech, EqualizerDesign):
        register_postprocessing(ledger, "post-filter G2" if mech.kind == "zfe" else "MMSE FIR post-filter")
    elif mech.kind == "input+detector":
        register_postprocessing(ledger, "threshold detector")
        register_postprocessing(ledger, "filter G")
    elif mech.kind == "input":
        register_postprocessing(ledger, "filter G")


def run_event_pipeline(mech, u, seed: int, ledger: BudgetLedger | None = None) -> EventRun:
    """One release; MSE against ``G u`` averaged after the filters' transients."""
    vals = u.values if isinstance(u, EventSignal) else np.asarray(u)
    rng = np.random.default_rng(seed)
    released = release(mech, vals, rng)
    ref = _filt(mech.G, np.asarray(vals, dtype=float))
    if ledger is not None:
        _charge(mech, ledger)
    k = min(discard_steps(mech), max(len(vals) - 1, 0))
    return EventRun(released, ref, float(np.mean((released[k:] - ref[k:]) ** 2)), k)


@dataclass(frozen=True)
class EventMonteCarlo:
    mse: float
    stderr: float
    trials: int
    per_trial: np.ndarray


def event_monte_carlo(mech, process: BurstProcess, horizon: int, trials: int, seed: int) -> EventMonteCarlo:
    """Fresh burst input and noise per trial; trial ``k`` uses ``derive_seed(seed, k)``."""
    if trials < 1 or horizon < 1:
        raise DomainError("trials and horizon must be positive")
    per = np.empty(trials)
    k0 = min(discard_steps(mech), horizon - 1)
    for k in range(trials):
        s = derive_seed(seed, k)
        u = process.sample(horizon, s)
        rng = np.random.default_rng(derive_seed(s, 1))
        out = release(mech, u, rng)
        ref = _filt(mech.G, u.astype(float))
        per[k] = np.mean((out[k0:] - ref[k0:]) ** 2)
    se = float(per.std(ddof=1) / math.sqrt(trials)) if trials > 1 else math.nan
    return EventMonteCarlo(float(per.mean()), se, trials, per)


def example_filter() -> lti.RationalTF:
    """``1/(s + 0.05)`` discretized with the bilinear map ``s = 2 (1 - z^-1)/(1 + z^-1)``."""
    return lti.bilinear_map([1.0], [1.0, 0.05])
