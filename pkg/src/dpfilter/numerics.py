"""Scalar special functions, dense solvers and seeded noise sampling.

Everything here is a pure function of its arguments except :class:`NoiseStream`,
which owns a generator state and must not be shared between threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np
import scipy.linalg as la

from .errors import ConditioningError, ConvergenceError, DimensionError, DomainError, StabilityError

#: Default tolerances; callers may override per call.
TOLERANCES = {
    "lyapunov_residual": 1e-10,
    "dare_residual": 1e-8,
    "dare_max_iter": 200,
    "toeplitz_residual": 1e-10,
    "stability_margin": 1e-10,
}

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_STD_NORMAL = NormalDist()


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Return ``a`` as a 2-D float array; scalars become 1x1 and vectors columns."""
    m = np.array(a, dtype=float)
    if m.ndim == 0:
        m = m.reshape(1, 1)
    elif m.ndim == 1:
        m = m.reshape(-1, 1)
    elif m.ndim != 2:
        raise DimensionError(f"{name} must be at most 2-D, got shape {m.shape}")
    return m


def is_symmetric(m: np.ndarray, rtol: float = 1e-12) -> bool:
    scale = max(np.max(np.abs(m)), 1.0) if m.size else 1.0
    return m.shape[0] == m.shape[1] and bool(np.all(np.abs(m - m.T) <= rtol * scale))


def spectral_radius(a: np.ndarray) -> float:
    a = as_matrix(a)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(a))))


# --------------------------------------------------------------------------
# Gaussian tail function
# --------------------------------------------------------------------------


def q_function(x: float) -> float:
    """Standard normal upper tail probability P(Z >= x)."""
    x = float(x)
    if not math.isfinite(x):
        raise DomainError(f"q_function needs a finite argument, got {x}")
    return 0.5 * math.erfc(x / _SQRT2)


def q_inverse(p: float) -> float:
    """Inverse of :func:`q_function` on (0, 1).

    Starts from the Wichura rational approximation of the normal quantile and
    applies one Newton step on ``q_function``.
    """
    p = float(p)
    if not (0.0 < p < 1.0):
        raise DomainError(f"q_inverse needs p in (0, 1), got {p}")
    x = -_STD_NORMAL.inv_cdf(p)
    density = _INV_SQRT_2PI * math.exp(-0.5 * x * x)
    if density > 0.0:
        x += (q_function(x) - p) / density
    return x


# --------------------------------------------------------------------------
# Matrix equations
# --------------------------------------------------------------------------


def solve_discrete_lyapunov(A, Q, tol: float | None = None) -> np.ndarray:
    """Solve ``A P A^T - P + Q = 0`` for a Schur-stable ``A``."""
    A = as_matrix(A, "A")
    Q = as_matrix(Q, "Q")
    n = A.shape[0]
    if A.shape != (n, n) or Q.shape != (n, n):
        raise DimensionError(f"A {A.shape} and Q {Q.shape} must be square and equal")
    if n == 0:
        return np.zeros((0, 0))
    if spectral_radius(A) >= 1.0 - TOLERANCES["stability_margin"]:
        raise StabilityError("Lyapunov equation needs spectral radius of A below 1")
    Q = 0.5 * (Q + Q.T)
    P = la.solve_discrete_lyapunov(A, Q)
    P = 0.5 * (P + P.T)
    tol = TOLERANCES["lyapunov_residual"] if tol is None else tol
    qn = max(np.linalg.norm(Q), np.finfo(float).tiny)
    if np.linalg.norm(A @ P @ A.T - P + Q) > tol * qn:
        # one step of iterative refinement on the residual
        R = A @ P @ A.T - P + Q
        P = P + la.solve_discrete_lyapunov(A, 0.5 * (R + R.T))
        P = 0.5 * (P + P.T)
    return P


def lyapunov_residual(A, P, Q) -> float:
    A, P, Q = as_matrix(A), as_matrix(P), as_matrix(Q)
    return float(np.linalg.norm(A @ P @ A.T - P + Q))


def dare_residual(P, A, C, W, V, cross=None) -> float:
    """Frobenius norm of the stationary-predictor Riccati residual at ``P``."""
    A, C, W, V = (as_matrix(m) for m in (A, C, W, V))
    S = np.zeros((A.shape[0], C.shape[0])) if cross is None else as_matrix(cross)
    M = A @ P @ C.T + S
    R = A @ P @ A.T + W - M @ np.linalg.solve(C @ P @ C.T + V, M.T) - P
    return float(np.linalg.norm(R))


def solve_dare(A, C, W_process, V_meas, cross=None, tol: float | None = None,
               max_iter: int | None = None) -> np.ndarray:
    """Stabilizing solution of the filtering Riccati equation.

    Solves ``P = A P A' + W - (A P C' + S)(C P C' + V)^{-1}(A P C' + S)'``
    (``S`` is the process/measurement cross covariance) with the structure
    preserving doubling algorithm. ``P`` is the one-step prediction error
    covariance of the stationary Kalman filter.
    """
    A = as_matrix(A, "A")
    C = as_matrix(C, "C")
    W = as_matrix(W_process, "W_process")
    V = as_matrix(V_meas, "V_meas")
    n, p = A.shape[0], C.shape[0]
    S = np.zeros((n, p)) if cross is None else as_matrix(cross, "cross")
    if A.shape != (n, n) or C.shape[1] != n or W.shape != (n, n) or V.shape != (p, p) or S.shape != (n, p):
        raise DimensionError("inconsistent DARE dimensions")
    tol = TOLERANCES["dare_residual"] if tol is None else tol
    max_iter = TOLERANCES["dare_max_iter"] if max_iter is None else max_iter

    try:
        Vinv_C = np.linalg.solve(V, C)
        Vinv_St = np.linalg.solve(V, S.T)
    except np.linalg.LinAlgError as exc:
        raise ConditioningError("measurement covariance is singular") from exc
    # remove the cross term: A_bar = A - S V^-1 C, W_bar = W - S V^-1 S'
    Ak = A - S @ Vinv_C
    Hk = W - S @ Vinv_St
    Hk = 0.5 * (Hk + Hk.T)
    Gk = C.T @ Vinv_C
    Gk = 0.5 * (Gk + Gk.T)
    # doubling on the dual (control) form with A_ctrl = A_bar'
    Ak = Ak.T
    eye = np.eye(n)
    scale = max(np.linalg.norm(Hk), 1.0)
    for k in range(max_iter):
        try:
            Minv = np.linalg.inv(eye + Gk @ Hk)
        except np.linalg.LinAlgError as exc:
            raise ConvergenceError("doubling iteration hit a singular matrix",
                                   {"iteration": k}) from exc
        A_next = Ak @ Minv @ Ak
        G_next = Gk + Ak @ Minv @ Gk @ Ak.T
        H_next = Hk + Ak.T @ Hk @ Minv @ Ak
        G_next = 0.5 * (G_next + G_next.T)
        H_next = 0.5 * (H_next + H_next.T)
        if not np.all(np.isfinite(H_next)):
            raise ConvergenceError("doubling iteration diverged; is (A, C) detectable?",
                                   {"iteration": k})
        step = np.linalg.norm(H_next - Hk)
        Ak, Gk, Hk = A_next, G_next, H_next
        scale = max(np.linalg.norm(Hk), 1.0)
        if step <= 1e-14 * scale:
            break
    else:
        raise ConvergenceError("doubling iteration did not converge",
                               {"iterations": max_iter, "last_step": float(step)})
    P = Hk
    res = dare_residual(P, A, C, W, V, S)
    pn = max(np.linalg.norm(P), np.finfo(float).tiny)
    if res > tol * pn:
        # polish with fixed-point Riccati steps (contractive near the solution)
        for _ in range(50):
            M = A @ P @ C.T + S
            P = A @ P @ A.T + W - M @ np.linalg.solve(C @ P @ C.T + V, M.T)
            P = 0.5 * (P + P.T)
            res = dare_residual(P, A, C, W, V, S)
            if res <= tol * max(np.linalg.norm(P), np.finfo(float).tiny):
                break
        else:
            raise ConvergenceError("Riccati residual above tolerance",
                                   {"residual": res, "norm_P": float(np.linalg.norm(P))})
    return P


def solve_toeplitz(r, b, tol: float | None = None) -> np.ndarray:
    """Solve ``T(r) h = b`` for the symmetric Toeplitz matrix with first column ``r``.

    Levinson recursion; a non-positive prediction error at any order means the
    matrix is not positive definite and raises :class:`ConditioningError`.
    """
    r = np.asarray(r, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    n = r.size
    if b.size != n:
        raise DimensionError(f"r has {n} entries but b has {b.size}")
    if n == 0:
        return np.zeros(0)
    if not r[0] > 0:
        raise ConditioningError("Toeplitz matrix is not positive definite (r[0] <= 0)")
    tol = TOLERANCES["toeplitz_residual"] if tol is None else tol

    h = _levinson(r, b)
    bn = max(np.linalg.norm(b), np.finfo(float).tiny)
    for _ in range(3):
        resid = b - _toeplitz_matvec(r, h)
        if np.linalg.norm(resid) <= tol * bn:
            break
        h = h + _levinson(r, resid)
    return h


def _levinson(r: np.ndarray, b: np.ndarray) -> np.ndarray:
    n = r.size
    t = r[1:] / r[0]
    rhs = b / r[0]
    x = np.empty(n)
    y = np.empty(max(n - 1, 1))
    x[0] = rhs[0]
    if n == 1:
        return x
    y[0] = -t[0]
    beta = 1.0
    alpha = -t[0]
    for k in range(1, n):
        beta *= 1.0 - alpha * alpha
        if beta <= 1e-14:
            raise ConditioningError(f"Toeplitz matrix is not positive definite (order {k})")
        mu = (rhs[k] - t[:k] @ x[k - 1::-1]) / beta
        x[:k] = x[:k] + mu * y[k - 1::-1]
        x[k] = mu
        if k < n - 1:
            alpha = (-t[k] - t[:k] @ y[k - 1::-1]) / beta
            y[:k] = y[:k] + alpha * y[k - 1::-1]
            y[k] = alpha
    return x


def _toeplitz_matvec(r: np.ndarray, x: np.ndarray) -> np.ndarray:
    return la.matmul_toeplitz((r, r), x)


# --------------------------------------------------------------------------
# Noise
# --------------------------------------------------------------------------


def derive_seed(seed: int, index: int) -> int:
    """64-bit seed for item ``index`` of a run seeded with ``seed``.

    Depends only on the pair, never on scheduling order.
    """
    state = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(index)]).generate_state(2, np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


@dataclass
class NoiseStream:
    """Seeded i.i.d. noise source.

    ``distribution`` is ``"laplace"`` (``scale`` is the Laplace parameter b) or
    ``"gaussian"`` (``scale`` is the standard deviation). A zero scale yields
    exact zeros.
    """

    distribution: str
    scale: float
    seed: int
    dim: int = 1
    _rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.distribution not in ("laplace", "gaussian"):
            raise DomainError(f"unknown noise distribution {self.distribution!r}")
        if not (self.scale >= 0 and math.isfinite(self.scale)):
            raise DomainError(f"noise scale must be finite and nonnegative, got {self.scale}")
        if self.dim < 0:
            raise DimensionError("noise dimension must be nonnegative")
        self._rng = np.random.Generator(np.random.PCG64(int(self.seed) & 0xFFFFFFFFFFFFFFFF))

    def draw(self, steps: int) -> np.ndarray:
        return sample(self, steps)


def sample(stream: NoiseStream, steps: int) -> np.ndarray:
    """Draw ``steps`` i.i.d. vectors from ``stream``; returns shape ``(steps, dim)``."""
    if steps < 0:
        raise DomainError("steps must be nonnegative")
    shape = (int(steps), stream.dim)
    if stream.scale == 0.0:
        return np.zeros(shape)
    if stream.distribution == "gaussian":
        return stream.scale * stream._rng.standard_normal(shape)
    # inverse CDF of the Laplace distribution on an open-interval uniform
    u = stream._rng.random(shape)
    u = np.where(u == 0.0, np.finfo(float).tiny, u)
    return np.where(u < 0.5, stream.scale * np.log(2.0 * u), -stream.scale * np.log(2.0 * (1.0 - u)))
