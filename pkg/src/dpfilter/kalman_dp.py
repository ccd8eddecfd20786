"""Steady-state Kalman filtering of many participants with differentially private releases.

Two placements are offered. Input noise perturbs every participant's
measurements before filtering. Output noise perturbs the aggregate estimate
once, scaled by the filter's sensitivity to one participant's private states.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import lti
from .errors import DomainError
from .models import FilterRealization, ParticipantModel, error_variance
from .numerics import derive_seed, solve_dare, spectral_radius
from .privacy import PrivacyBudget, kappa

KMH_PER_MS = 3.6
BURN_IN = 200


@dataclass(frozen=True)
class KalmanSolution:
    realization: FilterRealization
    P: np.ndarray  # one-step prediction error covariance
    Kp: np.ndarray  # predictor gain
    Kf: np.ndarray  # measurement-update gain
    form: str


def steady_state_kf(model: ParticipantModel, form: str = "filter", extra_meas_var: float = 0.0) -> KalmanSolution:
    """Stationary Kalman filter for ``model``, with the filter state ``s = xhat_{t|t-1}``.

    ``form="filter"`` outputs ``L xhat_{t|t}``; ``form="predictor"`` outputs
    ``L xhat_{t|t-1}``. ``extra_meas_var`` adds white noise of that variance to
    every measurement channel in the design.
    """
    if form not in ("filter", "predictor"):
        raise DomainError(f"unknown filter form {form!r}")
    W, V, S = model.noise_cov
    V = V + extra_meas_var * np.eye(model.n_meas)
    A, C, L = model.A, model.C, model.L
    P = solve_dare(A, C, W, V, cross=S)
    Re = C @ P @ C.T + V
    Kp = np.linalg.solve(Re, (A @ P @ C.T + S).T).T
    Kf = np.linalg.solve(Re, (P @ C.T).T).T
    F = A - Kp @ C
    if form == "filter":
        H = L @ (np.eye(model.n_states) - Kf @ C)
        K = L @ Kf
    else:
        H = L.copy()
        K = np.zeros((model.n_target, model.n_meas))
    notes = {"form": form, "closed_loop_radius": spectral_radius(F)}
    return KalmanSolution(FilterRealization(F, Kp, H, K, notes), P, Kp, Kf, form)


def sensitivity_gain(model: ParticipantModel, realization: FilterRealization) -> float:
    """``|| L K C S ||_inf``: peak gain from private states to the released estimate."""
    if not np.any(model.S):
        return 0.0
    return lti.hinf_norm(realization.sensitivity_system(model))


@dataclass(frozen=True)
class DpKalmanDesign:
    models: tuple[ParticipantModel, ...]
    realizations: tuple[FilterRealization, ...]
    placement: str  # "input", "input-compensated", "output" or "lmi"
    budget: PrivacyBudget
    input_sigma: tuple[float, ...]  # per participant measurement noise std
    output_sigma: float
    gammas: tuple[float, ...]
    predicted_mse: float
    notes: dict = field(default_factory=dict, compare=False)

    @property
    def predicted_rmse(self) -> float:
        return math.sqrt(self.predicted_mse)


def _per_identity(models, fn):
    """Apply ``fn`` once per distinct model object."""
    cache: dict[int, object] = {}
    out = []
    for m in models:
        key = id(m)
        if key not in cache:
            cache[key] = fn(m)
        out.append(cache[key])
    return out


def input_noise_sigma(model: ParticipantModel, budget: PrivacyBudget) -> float:
    """``kappa * rho * sigma_max(C S)``."""
    if model.rho == 0.0 or not np.any(model.S):
        return 0.0
    return kappa(budget) * model.rho * float(np.linalg.norm(model.C @ model.S, 2))


def design_input_noise_dp(models, budget: PrivacyBudget, compensated: bool = True,
                          form: str = "filter") -> DpKalmanDesign:
    """Perturb each participant's measurements, then filter.

    With ``compensated`` the filter is designed for the noisy measurements;
    otherwise the plain filter is used and the predicted MSE accounts for the
    mismatch.
    """
    models = tuple(models)

    def one(m):
        s = input_noise_sigma(m, budget)
        kf = steady_state_kf(m, form, extra_meas_var=s * s if compensated else 0.0)
        return s, kf.realization, error_variance(m, kf.realization, s)

    rows = _per_identity(models, one)
    sig = tuple(r[0] for r in rows)
    real = tuple(r[1] for r in rows)
    mse = sum(r[2] for r in rows) / models[0].n_target
    placement = "input-compensated" if compensated else "input"
    return DpKalmanDesign(models, real, placement, budget, sig, 0.0, (), mse, {"form": form})


def design_output_noise_dp(models, budget: PrivacyBudget, form: str = "filter",
                           realizations=None, placement: str = "output") -> DpKalmanDesign:
    """Filter each participant, sum the estimates and add ``kappa * max_i gamma_i rho_i`` noise.

    ``realizations`` overrides the Kalman filters (used for synthesized filters).
    """
    models = tuple(models)
    if realizations is None:
        real = tuple(_per_identity(models, lambda m: steady_state_kf(m, form).realization))
    else:
        real = tuple(realizations)
        if len(real) != len(models):
            raise DomainError("one realization per model is required")
    cache: dict[tuple[int, int], tuple[float, float]] = {}
    gammas, errs = [], []
    for m, f in zip(models, real):
        key = (id(m), id(f))
        if key not in cache:
            cache[key] = (sensitivity_gain(m, f), error_variance(m, f))
        g, e = cache[key]
        gammas.append(g)
        errs.append(e)
    sigma = kappa(budget) * max(g * m.rho for g, m in zip(gammas, models))
    q = models[0].n_target
    mse = sum(errs) / q + sigma * sigma
    return DpKalmanDesign(models, real, placement, budget, (0.0,) * len(models), sigma, tuple(gammas), mse,
                          {"form": form})


# --------------------------------------------------------------------------
# Monte Carlo
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RmseResult:
    rmse: float
    stderr: float  # of the MSE across trials
    trials: int
    horizon: int
    burn_in: int
    rms_trace: np.ndarray  # per-step RMS error over trials
    z_trace: np.ndarray  # trial 0 true target, shape (horizon, q)
    zhat_trace: np.ndarray  # trial 0 released estimate
    convergence_step: int


def _convergence_step(trace: np.ndarray, level: float) -> int:
    above = np.nonzero(trace > level)[0]
    return 0 if above.size == 0 else int(above[-1] + 1)


def monte_carlo_rmse(design: DpKalmanDesign, horizon: int, trials: int, seed: int,
                     kf_init=None, burn_in: int = BURN_IN, chunk: int = 16) -> RmseResult:
    """Simulate all participants and the release; RMSE of the released aggregate after ``burn_in``.

    ``kf_init`` sets the initial filter estimate of every participant (default
    the model's ``x0_mean``). Trial ``k`` draws from ``derive_seed(seed, k)``.
    """
    if horizon < 1 or trials < 1:
        raise DomainError("horizon and trials must be positive")
    if burn_in >= horizon:
        burn_in = horizon // 2
    models, real = design.models, design.realizations
    q = models[0].n_target
    groups: dict[tuple[int, int, float], list[int]] = {}
    for i, (m, f, s) in enumerate(zip(models, real, design.input_sigma)):
        groups.setdefault((id(m), id(f), s), []).append(i)

    # per-trial squared errors, reduced once at the end so chunking never changes the sums
    sq = np.empty((trials, horizon))
    per_trial = np.empty(trials)
    z0 = zh0 = None
    for start in range(0, trials, chunk):
        idx = range(start, min(trials, start + chunk))
        rngs = [np.random.default_rng(derive_seed(seed, k)) for k in idx]
        nb = len(rngs)
        z = np.zeros((horizon, nb, q))
        zhat = np.zeros((horizon, nb, q))
        for g, members in enumerate(groups.values()):
            m, f, sv = models[members[0]], real[members[0]], design.input_sigma[members[0]]
            _simulate_group(m, f, sv, len(members), rngs, g, horizon, kf_init, z, zhat)
        if design.output_sigma > 0:
            nu = np.stack([r.standard_normal((horizon, q)) for r in rngs], axis=1)
            zhat += design.output_sigma * nu
        err2 = np.sum((zhat - z) ** 2, axis=2) / q
        sq[start:start + nb] = err2.T
        per_trial[start:start + nb] = err2[burn_in:].mean(axis=0)
        if start == 0:
            z0, zh0 = z[:, 0].copy(), zhat[:, 0].copy()
    rms = np.sqrt(sq.sum(axis=0) / trials)
    mse = float(per_trial.mean())
    rmse = math.sqrt(mse)
    se = float(per_trial.std(ddof=1) / math.sqrt(trials)) if trials > 1 else math.nan
    return RmseResult(rmse, se, trials, horizon, burn_in, rms, z0, zh0, _convergence_step(rms, 2.0 * rmse))


def _simulate_group(m: ParticipantModel, f: FilterRealization, sigma_v: float, count: int, rngs, group: int,
                    horizon: int, kf_init, z: np.ndarray, zhat: np.ndarray) -> None:
    """Add the contributions of ``count`` identical participants to ``z`` and ``zhat`` in place."""
    nb = len(rngs)
    n, nw, p = m.n_states, m.B.shape[1], m.n_meas
    # per (trial, group) streams keep trials independent of chunking
    subs = [np.random.default_rng(derive_seed(int(r.integers(2 ** 63)), group)) for r in rngs]
    evals, evecs = np.linalg.eigh(m.x0_cov)
    root = evecs * np.sqrt(np.clip(evals, 0.0, None))
    x = np.stack([m.x0_mean + sub.standard_normal((count, n)) @ root.T for sub in subs])  # (nb, count, n)
    init = m.x0_mean if kf_init is None else np.asarray(kf_init, dtype=float)
    s = np.broadcast_to(init, (nb, count, f.F.shape[0])).copy()
    At, Bt, Ct, Dt, Lt = m.A.T, m.B.T, m.C.T, m.D.T, m.L.T
    Ft, Gt, Ht, Kt = f.F.T, f.G.T, f.H.T, f.K.T
    for t in range(horizon):
        w = np.stack([sub.standard_normal((count, nw)) for sub in subs])
        y = x @ Ct + w @ Dt
        if sigma_v > 0:
            y += sigma_v * np.stack([sub.standard_normal((count, p)) for sub in subs])
        z[t] += (x @ Lt).sum(axis=1)
        zhat[t] += (s @ Ht + y @ Kt).sum(axis=1)
        s = s @ Ft + y @ Gt
        x = x @ At + w @ Bt


# --------------------------------------------------------------------------
# traffic scenario
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrafficScenario:
    models: tuple[ParticipantModel, ...]
    budget: PrivacyBudget
    n: int
    Ts: float
    v0_mean_kmh: float
    kf_init_kmh: float

    @property
    def kf_init(self) -> np.ndarray:
        return np.array([0.0, self.kf_init_kmh / KMH_PER_MS])


def traffic_model(n: int = 200, Ts: float = 1.0, sigma1: float = 1.0, sigma2: float = 1.0, rho: float = 100.0,
                  v0_mean_kmh: float = 45.0, v0_std_kmh: float = 10.0, target_scale: float | None = None
                  ) -> ParticipantModel:
    """Double integrator per vehicle: position (m) and velocity (m/s) driven by white acceleration.

    The measured output is the noisy position; the target is the average
    velocity ``L = [0, 1/n]``. Only the position trajectory is private.
    """
    scale = 1.0 / n if target_scale is None else target_scale
    A = [[1.0, Ts], [0.0, 1.0]]
    B = [[0.5 * Ts * Ts * sigma1, 0.0], [Ts * sigma1, 0.0]]
    C = [[1.0, 0.0]]
    D = [[0.0, sigma2]]
    L = [[0.0, scale]]
    S = np.diag([1.0, 0.0])
    x0_cov = np.diag([0.0, (v0_std_kmh / KMH_PER_MS) ** 2])
    return ParticipantModel(A, B, C, D, L, S, rho, [0.0, v0_mean_kmh / KMH_PER_MS], x0_cov)


def build_traffic_scenario(n: int = 200, Ts: float = 1.0, sigma1: float = 1.0, sigma2: float = 1.0,
                           rho: float = 100.0, budget: PrivacyBudget | None = None, v0_mean: float = 45.0,
                           v0_std: float = 10.0, kf_init: float = 75.0) -> TrafficScenario:
    """``n`` identical vehicles sharing one model object (designs are computed once per object)."""
    if n < 1:
        raise DomainError("n must be positive")
    budget = PrivacyBudget(math.log(3.0), 0.05) if budget is None else budget
    m = traffic_model(n, Ts, sigma1, sigma2, rho, v0_mean, v0_std)
    return TrafficScenario((m,) * n, budget, n, Ts, v0_mean, kf_init)
