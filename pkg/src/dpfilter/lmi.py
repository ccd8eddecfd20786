"""Filter synthesis trading estimation error against sensitivity, posed as linear matrix inequalities.

For a participant model the filter ``s+ = F s + G y``, ``zhat = H s + K y``
should keep the H2 norm of the estimation error small (certified by ``mu``)
while the H-infinity gain from the private states ``S x`` to ``zhat`` stays
below ``sqrt(lam) / rho`` (so the output noise needed for privacy is small).

Stable plants admit full-order filters; unstable plants use the observer
class ``F = A - G C``, ``H = L``, ``K = 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.optimize import minimize_scalar

from . import lti
from .errors import ConvergenceError, DomainError, InfeasibleError, RecoveryError, StabilityError
from .models import FilterRealization, ParticipantModel, error_system
from .numerics import spectral_radius
from .privacy import PrivacyBudget, kappa
from .sdp import Affine, SdpProblem, SdpSolution, bmat

RECOVERY_COND_MAX = 1e10
VERIFY_RTOL = 1e-5


@dataclass
class LmiProblem:
    """An assembled synthesis SDP plus the handles needed for recovery.

    The LMIs are built for ``L / ell`` (``ell`` the largest singular value of
    ``L``); ``lam_bar`` bounds the squared sensitivity gain for that
    normalized target, i.e. ``lam = rho^2 ell^2 lam_bar``.
    """

    problem: SdpProblem
    path: str  # "stable" or "unstable"
    model: ParticipantModel
    ell: float
    mu: Affine
    lam_bar: Affine | float


def _zeros(r, c):
    return np.zeros((r, c))


def _target_scale(model: ParticipantModel) -> float:
    ell = float(np.linalg.norm(model.L, 2)) if model.L.size else 0.0
    return ell if ell > 0 else 1.0


def _lam_term(prob: SdpProblem, lam_bar, q: int):
    if lam_bar is None:
        v = prob.scalar("lam_bar")
        return v, Affine(np.zeros((q, q)), {k: c[0, 0] * np.eye(q) for k, c in v.coefs.items()})
    if lam_bar <= 0:
        raise DomainError("lam_bar must be positive")
    return float(lam_bar), float(lam_bar) * np.eye(q)


def build_stable_lmis(model: ParticipantModel, lam_bar: float | None = None) -> LmiProblem:
    """Three block LMIs plus ``Tr W < mu`` for a full-order filter of a stable plant.

    Variables: ``W, Y, Z`` symmetric and ``Fh, Gh, Hh, Kh`` (the linearizing
    change of variables of the filter matrices).
    """
    if spectral_radius(model.A) >= 1.0:
        raise StabilityError("the full-order path requires a stable plant; use build_unstable_lmis")
    if model.rho <= 0:
        raise DomainError("rho must be positive")
    A, B, C, D = model.A, model.B, model.C, model.D
    ell = _target_scale(model)
    L = model.L / ell
    n, m, p, q = A.shape[0], B.shape[1], C.shape[0], L.shape[0]
    CS = C @ model.S
    P = SdpProblem()
    W = P.symmetric("W", q)
    Y = P.symmetric("Y", n)
    Z = P.symmetric("Z", n)
    Fh = P.matrix("Fh", n, n)
    Gh = P.matrix("Gh", n, p)
    Hh = P.matrix("Hh", q, n)
    Kh = P.matrix("Kh", q, p)
    mu = P.scalar("mu")
    lam_val, lam_blk = _lam_term(P, lam_bar, q)
    In, Im = np.eye(n), np.eye(m)

    LKC = L - Kh @ C
    P.add_lmi(bmat([
        [W, LKC - Hh, LKC, -(Kh @ D)],
        [(LKC - Hh).T, Z, Z, _zeros(n, m)],
        [LKC.T, Z, Y, _zeros(n, m)],
        [-(Kh @ D).T, _zeros(m, n), _zeros(m, n), Im],
    ]), name="h2_error")

    YAGC = Y @ A + Gh @ C
    P.add_lmi(bmat([
        [Z, Z, Z @ A, Z @ A, Z @ B],
        [Z, Y, YAGC + Fh, YAGC, Y @ B + Gh @ D],
        [(Z @ A).T, (YAGC + Fh).T, Z, Z, _zeros(n, m)],
        [(Z @ A).T, YAGC.T, Z, Y, _zeros(n, m)],
        [(Z @ B).T, (Y @ B + Gh @ D).T, _zeros(m, n), _zeros(m, n), Im],
    ]), name="h2_lyapunov")

    P.add_lmi(bmat([
        [Z, Z, _zeros(n, q), _zeros(n, n), _zeros(n, n), _zeros(n, n)],
        [Z, Y, _zeros(n, q), Fh, _zeros(n, n), Gh @ CS],
        [_zeros(q, n), _zeros(q, n), lam_blk, Hh, _zeros(q, n), Kh @ CS],
        [_zeros(n, n), Fh.T, Hh.T, Z, Z, _zeros(n, n)],
        [_zeros(n, n), _zeros(n, n), _zeros(n, q), Z, Y, _zeros(n, n)],
        [_zeros(n, n), (Gh @ CS).T, (Kh @ CS).T, _zeros(n, n), _zeros(n, n), In],
    ]), name="hinf_sensitivity")

    P.add_leq(W.trace(), mu, name="trace")
    return LmiProblem(P, "stable", model, ell, mu, lam_val)


def build_unstable_lmis(model: ParticipantModel, lam_bar: float | None = None) -> LmiProblem:
    """LMIs for the observer class ``F = A - G C``, ``H = L``, ``K = 0``; valid for any plant.

    Variables: ``Y, X`` symmetric and ``Gh = X G``.
    """
    if model.rho <= 0:
        raise DomainError("rho must be positive")
    A, B, C, D = model.A, model.B, model.C, model.D
    ell = _target_scale(model)
    L = model.L / ell
    n, m, p, q = A.shape[0], B.shape[1], C.shape[0], L.shape[0]
    CS = C @ model.S
    P = SdpProblem()
    Y = P.symmetric("Y", n)
    X = P.symmetric("X", n)
    Gh = P.matrix("Gh", n, p)
    mu = P.scalar("mu")
    lam_val, lam_blk = _lam_term(P, lam_bar, q)
    In = np.eye(n)
    P.add_leq((Y @ (L.T @ L)).trace(), mu, name="trace")
    P.add_lmi(bmat([[Y, In], [In, X]]), name="coupling")
    T = X @ A - Gh @ C
    E = X @ B - Gh @ D
    P.add_lmi(bmat([
        [X, T, E],
        [T.T, X, _zeros(n, m)],
        [E.T, _zeros(m, n), np.eye(m)],
    ]), name="h2_lyapunov")
    P.add_lmi(bmat([
        [X, _zeros(n, q), T, Gh @ CS],
        [_zeros(q, n), lam_blk, L, _zeros(q, n)],
        [T.T, L.T, X, _zeros(n, n)],
        [(Gh @ CS).T, _zeros(n, q), _zeros(n, n), In],
    ]), name="hinf_sensitivity")
    return LmiProblem(P, "unstable", model, ell, mu, lam_val)


# --------------------------------------------------------------------------
# recovery and verification
# --------------------------------------------------------------------------


def _factor_uv(M: np.ndarray, method: str) -> tuple[np.ndarray, np.ndarray]:
    """Nonsingular ``V, U`` with ``V U' = M``."""
    if method == "qr":
        Q, R, piv = sla.qr(M, pivoting=True)
        Pm = np.eye(M.shape[0])[:, piv]
        return Q, Pm @ R.T
    if method == "lu":
        Pl, Ll, Ul = sla.lu(M)
        return Pl @ Ll, Ul.T
    raise DomainError(f"unknown factorization {method!r}")


def recover_filter_stable(lp: LmiProblem, sol: SdpSolution, method: str = "qr") -> FilterRealization:
    """Undo the change of variables: ``F = V^-1 Fh Z^-1 U^-T``, ``G = V^-1 Gh``, ``H = Hh Z^-1 U^-T``, ``K = Kh``."""
    Y, Z = sol["Y"], sol["Z"]
    if np.linalg.eigvalsh(Z).min() <= 0:
        raise RecoveryError("Z is not positive definite")
    Zi = np.linalg.inv(Z)
    M = np.eye(Y.shape[0]) - Y @ Zi
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > RECOVERY_COND_MAX:
        raise RecoveryError(f"I - Y Z^-1 is too ill-conditioned to factor (cond {cond:.3g})")
    V, U = _factor_uv(M, method)
    Zi_UinvT = Zi @ np.linalg.inv(U.T)
    F = np.linalg.solve(V, sol["Fh"] @ Zi_UinvT)
    G = np.linalg.solve(V, sol["Gh"])
    H = lp.ell * sol["Hh"] @ Zi_UinvT
    K = lp.ell * sol["Kh"]
    return FilterRealization(F, G, H, K, {"path": "stable", "factorization": method, "cond": float(cond)})


def recover_filter_unstable(lp: LmiProblem, sol: SdpSolution) -> FilterRealization:
    """``G = X^-1 Gh``, ``F = A - G C``, ``H = L``, ``K = 0``."""
    X = sol["X"]
    if np.linalg.eigvalsh(X).min() <= 0:
        raise RecoveryError("X is not positive definite")
    m = lp.model
    G = np.linalg.solve(X, sol["Gh"])
    F = m.A - G @ m.C
    r = spectral_radius(F)
    if r >= 1.0:
        raise RecoveryError(f"recovered A - G C is not stable (spectral radius {r:.6g}); solver tolerance too loose")
    return FilterRealization(F, G, m.L.copy(), np.zeros((m.n_target, m.n_meas)),
                             {"path": "unstable", "spectral_radius": r})


@dataclass(frozen=True)
class Verification:
    h2_sq: float  # true squared H2 norm of the estimation error
    gamma: float  # true sensitivity gain
    mu_bound: float
    lam_bound: float
    h2_ok: bool
    hinf_ok: bool

    @property
    def ok(self) -> bool:
        return self.h2_ok and self.hinf_ok


def verify_filter(model: ParticipantModel, f: FilterRealization, mu: float, lam: float,
                  rtol: float = VERIFY_RTOL) -> Verification:
    """Independent norm check of a recovered filter: ``||e||_2^2 <= mu`` and ``rho^2 ||sens||_inf^2 <= lam``."""
    E = error_system(model, f)
    if spectral_radius(E.A) >= 1.0:
        return Verification(math.inf, math.inf, mu, lam, False, False)
    h2 = lti.h2_norm(E) ** 2
    sens = f.sensitivity_system(model)
    gamma = lti.hinf_norm(sens) if spectral_radius(sens.A) < 1.0 else math.inf
    h2_ok = h2 <= mu * (1.0 + rtol) + 1e-12
    hinf_ok = model.rho ** 2 * gamma ** 2 <= lam * (1.0 + rtol) + 1e-12
    return Verification(h2, gamma, mu, lam, h2_ok, hinf_ok)


# --------------------------------------------------------------------------
# synthesis
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepPoint:
    lam: float
    status: str  # "ok", "infeasible", "failed"
    mu: float = math.nan
    certified_mse: float = math.nan
    verified_mse: float = math.nan
    gamma: float = math.nan
    verified: bool = False
    message: str = ""


@dataclass
class SynthesisResult:
    realization: FilterRealization
    path: str
    mu: float
    lam: float
    certified_mse: float  # n mu + kappa^2 lam
    verified_mse: float  # n ||e||_2^2 + kappa^2 rho^2 gamma^2 with true norms
    verification: Verification
    sweep: list[SweepPoint] = field(default_factory=list)


def solve_fixed_lambda(model: ParticipantModel, lam: float, path: str | None = None, tol: float = 1e-8,
                       method: str = "qr") -> tuple[FilterRealization, float, Verification]:
    """Minimize ``mu`` for a fixed sensitivity bound ``lam``; returns (filter, mu, verification)."""
    if path is None:
        path = "stable" if spectral_radius(model.A) < 1.0 else "unstable"
    ell = _target_scale(model)
    lam_bar = lam / (model.rho ** 2 * ell ** 2)
    lp = build_stable_lmis(model, lam_bar) if path == "stable" else build_unstable_lmis(model, lam_bar)
    lp.problem.minimize(lp.mu)
    sol = lp.problem.solve(tol=tol)
    if sol.status == "infeasible":
        raise InfeasibleError(f"no filter meets the sensitivity bound lam = {lam:.6g}")
    f = recover_filter_stable(lp, sol, method) if path == "stable" else recover_filter_unstable(lp, sol)
    mu = float(sol["mu"][0, 0]) * ell ** 2
    return f, mu, verify_filter(model, f, mu, lam)


def _evaluate(model, lam, path, k2, n_replicas, tol) -> tuple[SweepPoint, tuple | None]:
    try:
        f, mu, ver = solve_fixed_lambda(model, lam, path, tol)
    except InfeasibleError as e:
        return SweepPoint(lam, "infeasible", message=str(e)), None
    except (RecoveryError, ConvergenceError) as e:
        return SweepPoint(lam, "failed", message=str(e)), None
    cert = n_replicas * mu + k2 * lam
    ver_mse = n_replicas * ver.h2_sq + k2 * model.rho ** 2 * ver.gamma ** 2
    pt = SweepPoint(lam, "ok", mu, cert, ver_mse, ver.gamma, ver.ok)
    return pt, (f, mu, ver)


def synthesize_filter(model: ParticipantModel, budget: PrivacyBudget, strategy: str = "bisect-lambda",
                      gamma_max=None, n_replicas: int = 1, path: str | None = None, tol: float = 1e-8,
                      lam_range: tuple[float, float] | None = None, max_evals: int = 30) -> SynthesisResult:
    """Design a filter minimizing ``n mu + kappa^2 lam``.

    ``constrain-hinf`` fixes ``lam = gamma_max^2 rho^2`` for each value in
    ``gamma_max`` (scalar or sequence) and keeps the best verified point.
    ``bisect-lambda`` first bisects for the smallest feasible ``lam`` and then
    runs a bounded scalar search over ``log lam`` (the optimal ``mu`` is convex
    in ``lam``).
    """
    if path is None:
        path = "stable" if spectral_radius(model.A) < 1.0 else "unstable"
    k2 = kappa(budget) ** 2
    rho2 = model.rho ** 2
    sweep: list[SweepPoint] = []
    found: dict[float, tuple] = {}

    def run(lam):
        pt, res = _evaluate(model, lam, path, k2, n_replicas, tol)
        sweep.append(pt)
        if res is not None:
            found[lam] = res
        return pt

    if strategy == "constrain-hinf":
        if gamma_max is None:
            raise DomainError("constrain-hinf needs gamma_max")
        for g in np.atleast_1d(gamma_max):
            run(float(g) ** 2 * rho2)
    elif strategy == "bisect-lambda":
        lo, hi = lam_range if lam_range is not None else _default_lam_range(model)
        pt = run(hi)
        grow = 0
        while pt.status != "ok" and grow < 8:
            lo, hi = hi, hi * 10.0
            pt = run(hi)
            grow += 1
        if pt.status != "ok":
            raise InfeasibleError("no sensitivity bound in the search range is feasible")
        for _ in range(12):  # feasibility threshold on a log scale
            mid = math.sqrt(lo * hi)
            if run(mid).status == "ok":
                hi = mid
            else:
                lo = mid
            if hi / lo < 1.05:
                break
        lam_min = hi
        upper = lam_min * 1e3

        def obj(t):
            p = run(math.exp(t))
            return p.certified_mse if p.status == "ok" else math.inf

        minimize_scalar(obj, bounds=(math.log(lam_min), math.log(upper)), method="bounded",
                        options={"xatol": 1e-3, "maxiter": max_evals})
    else:
        raise DomainError(f"unknown strategy {strategy!r}")

    ok = [p for p in sweep if p.status == "ok" and p.verified]
    if not ok:
        if any(p.status == "ok" for p in sweep):
            raise RecoveryError("no recovered filter passed independent verification")
        raise InfeasibleError("every sensitivity bound tried was infeasible")
    key = "verified_mse" if strategy == "constrain-hinf" else "certified_mse"
    best = min(ok, key=lambda p: getattr(p, key))
    f, mu, ver = found[best.lam]
    return SynthesisResult(f, path, mu, best.lam, best.certified_mse, best.verified_mse, ver, sweep)


def _default_lam_range(model: ParticipantModel) -> tuple[float, float]:
    """Bracket around the Kalman filter's sensitivity."""
    from .kalman_dp import sensitivity_gain, steady_state_kf

    g = sensitivity_gain(model, steady_state_kf(model, "predictor").realization)
    base = max(g * g * model.rho ** 2, 1e-12)
    return base * 1e-3, base * 4.0
