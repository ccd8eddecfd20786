"""Participant plant models and linear filter realizations shared by the Kalman and LMI designs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import lti
from .errors import DimensionError, DomainError, StabilityError
from .numerics import as_matrix, solve_discrete_lyapunov, spectral_radius


def _readonly(m: np.ndarray) -> np.ndarray:
    m = np.array(m, dtype=float)
    m.setflags(write=False)
    return m


def _pbh_ok(A: np.ndarray, M: np.ndarray, left: bool) -> bool:
    """PBH rank test restricted to eigenvalues on or outside the unit circle."""
    n = A.shape[0]
    for lam in np.linalg.eigvals(A):
        if abs(lam) < 1.0 - 1e-10:
            continue
        blk = np.hstack([A - lam * np.eye(n), M]) if left else np.vstack([A - lam * np.eye(n), M])
        if np.linalg.matrix_rank(blk, tol=1e-9 * max(1.0, np.linalg.norm(blk))) < n:
            return False
    return True


@dataclass(frozen=True)
class ParticipantModel:
    """``x+ = A x + B w``, ``y = C x + D w`` with ``w ~ N(0, I)``; the target is ``L x``.

    ``S`` selects the state coordinates whose trajectory is private and
    ``rho`` bounds their l2 variation between adjacent datasets.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    L: np.ndarray
    S: np.ndarray
    rho: float
    x0_mean: np.ndarray
    x0_cov: np.ndarray = field(default=None)

    def __post_init__(self):
        A, B, C, D, L, S = (as_matrix(getattr(self, k), k) for k in ("A", "B", "C", "D", "L", "S"))
        n = A.shape[0]
        if A.shape != (n, n):
            raise DimensionError("A must be square")
        if B.shape[0] != n or C.shape[1] != n or L.shape[1] != n or S.shape != (n, n):
            raise DimensionError("B, C, L, S do not match the state dimension")
        if D.shape != (C.shape[0], B.shape[1]):
            raise DimensionError(f"D must be {C.shape[0]}x{B.shape[1]}")
        if np.any(S - np.diag(np.diag(S))) or not np.all(np.isin(np.diag(S), (0.0, 1.0))):
            raise DomainError("S must be diagonal with 0/1 entries")
        if self.rho < 0:
            raise DomainError("rho must be nonnegative")
        if np.linalg.matrix_rank(D @ D.T) < D.shape[0]:
            raise DomainError("D must have full row rank")
        if not _pbh_ok(A, C, left=False):
            raise DomainError("(A, C) is not detectable")
        if not _pbh_ok(A, B, left=True):
            raise DomainError("(A, B) is not stabilizable")
        x0 = np.asarray(self.x0_mean, dtype=float).ravel()
        if x0.size != n:
            raise DimensionError("x0_mean must have one entry per state")
        P0 = np.zeros((n, n)) if self.x0_cov is None else as_matrix(self.x0_cov, "x0_cov")
        if P0.shape != (n, n):
            raise DimensionError("x0_cov must be n x n")
        for k, v in zip(("A", "B", "C", "D", "L", "S", "x0_mean", "x0_cov"), (A, B, C, D, L, S, x0, P0)):
            object.__setattr__(self, k, _readonly(v))
        object.__setattr__(self, "rho", float(self.rho))

    @property
    def n_states(self) -> int:
        return self.A.shape[0]

    @property
    def n_meas(self) -> int:
        return self.C.shape[0]

    @property
    def n_target(self) -> int:
        return self.L.shape[0]

    @property
    def noise_cov(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Process, measurement and cross covariances ``(BB', DD', BD')``."""
        return self.B @ self.B.T, self.D @ self.D.T, self.B @ self.D.T

    def with_L(self, L) -> ParticipantModel:
        return ParticipantModel(self.A, self.B, self.C, self.D, L, self.S, self.rho, self.x0_mean, self.x0_cov)

    def with_rho(self, rho: float) -> ParticipantModel:
        return ParticipantModel(self.A, self.B, self.C, self.D, self.L, self.S, rho, self.x0_mean, self.x0_cov)

    def to_dict(self) -> dict:
        return {k: np.asarray(getattr(self, k)).tolist() for k in ("A", "B", "C", "D", "L", "S", "x0_mean", "x0_cov")} \
            | {"rho": self.rho}

    @classmethod
    def from_dict(cls, d: dict) -> ParticipantModel:
        n = np.asarray(d["A"]).shape[0]
        S = d.get("S", np.eye(n))
        S = np.diag(S) if np.ndim(S) == 1 else S
        return cls(d["A"], d["B"], d["C"], d["D"], d["L"], S, d.get("rho", 1.0),
                   d.get("x0_mean", np.zeros(n)), d.get("x0_cov"))


@dataclass(frozen=True)
class FilterRealization:
    """``s+ = F s + G y``, ``zhat = H s + K y``."""

    F: np.ndarray
    G: np.ndarray
    H: np.ndarray
    K: np.ndarray
    notes: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        F, G, H, K = (as_matrix(getattr(self, k), k) for k in "FGHK")
        ns = F.shape[0]
        if F.shape != (ns, ns) or G.shape[0] != ns or H.shape[1] != ns or K.shape != (H.shape[0], G.shape[1]):
            raise DimensionError("inconsistent filter realization shapes")
        for k, v in zip("FGHK", (F, G, H, K)):
            object.__setattr__(self, k, _readonly(v))

    @property
    def system(self) -> lti.StateSpace:
        return lti.StateSpace(self.F, self.G, self.H, self.K)

    def sensitivity_system(self, model: ParticipantModel) -> lti.StateSpace:
        """Map from a perturbation of ``S x`` to the filter output, ``(F, G C S, H, K C S)``."""
        CS = model.C @ model.S
        return lti.StateSpace(self.F, self.G @ CS, self.H, self.K @ CS)

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in "FGHK"}

    @classmethod
    def from_dict(cls, d: dict) -> FilterRealization:
        return cls(d["F"], d["G"], d["H"], d["K"])


def _is_observer_form(model: ParticipantModel, f: FilterRealization, tol: float = 1e-9) -> bool:
    if f.F.shape != model.A.shape:
        return False
    scale = 1.0 + np.linalg.norm(model.A) + np.linalg.norm(model.L)
    return (np.linalg.norm(f.F - (model.A - f.G @ model.C)) <= tol * scale
            and np.linalg.norm(f.H + f.K @ model.C - model.L) <= tol * scale)


def error_system(model: ParticipantModel, f: FilterRealization, sigma_v: float = 0.0) -> lti.StateSpace:
    """System from ``(w, v)`` to the estimation error ``L x - zhat`` when ``y`` carries ``sigma_v v``.

    Observer-form filters (``F = A - G C``, ``H + K C = L``) use the error
    coordinates ``x - s`` and need only ``F`` stable; other filters use the
    joint plant/filter state and need ``A`` stable too.
    """
    p = model.n_meas
    V = sigma_v * np.eye(p)
    if _is_observer_form(model, f):
        B = np.hstack([model.B - f.G @ model.D, -f.G @ V])
        D = np.hstack([-f.K @ model.D, -f.K @ V])
        return lti.StateSpace(f.F, B, f.H, D)
    n, ns = model.n_states, f.F.shape[0]
    A = np.block([[model.A, np.zeros((n, ns))], [f.G @ model.C, f.F]])
    B = np.block([[model.B, np.zeros((n, p))], [f.G @ model.D, f.G @ V]])
    C = np.hstack([model.L - f.K @ model.C, -f.H])
    D = np.hstack([-f.K @ model.D, -f.K @ V])
    return lti.StateSpace(A, B, C, D)


def error_variance(model: ParticipantModel, f: FilterRealization, sigma_v: float = 0.0) -> float:
    """Stationary ``E|L x - zhat|^2`` (summed over target coordinates)."""
    E = error_system(model, f, sigma_v)
    if spectral_radius(E.A) >= 1.0:
        raise StabilityError("estimation error dynamics are not stable")
    return lti.h2_norm(E) ** 2


def stationary_state_cov(model: ParticipantModel) -> np.ndarray:
    W, _, _ = model.noise_cov
    return solve_discrete_lyapunov(model.A, W)
