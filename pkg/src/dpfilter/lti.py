"""Discrete-time LTI systems: representations, simulation, norms and factorization.

Two representations are used. :class:`StateSpace` holds ``(A, B, C, D)`` for
MIMO systems; :class:`RationalTF` holds a SISO ratio of polynomials in
``z^-1`` with a monic denominator. Most operations accept either.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
from scipy import optimize, signal

from .errors import AlgebraError, DimensionError, DomainError, StabilityError
from .numerics import TOLERANCES, as_matrix, solve_discrete_lyapunov, spectral_radius

GRID_POINTS = 4096


@dataclass(frozen=True)
class StateSpace:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        A = as_matrix(self.A, "A")
        D = as_matrix(self.D, "D")
        n = A.shape[0]
        B = np.asarray(self.B, dtype=float).reshape(n, -1) if n else np.zeros((0, D.shape[1]))
        C = np.asarray(self.C, dtype=float).reshape(-1, n) if n else np.zeros((D.shape[0], 0))
        if A.shape != (n, n):
            raise DimensionError(f"A must be square, got {A.shape}")
        if B.shape[1] != D.shape[1] or C.shape[0] != D.shape[0]:
            raise DimensionError(f"inconsistent shapes A{A.shape} B{B.shape} C{C.shape} D{D.shape}")
        for name, m in (("A", A), ("B", B), ("C", C), ("D", D)):
            m.setflags(write=False)
            object.__setattr__(self, name, m)

    @property
    def n_states(self) -> int:
        return self.A.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.D.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.D.shape[0]

    @classmethod
    def static(cls, D) -> StateSpace:
        D = as_matrix(D, "D")
        return cls(np.zeros((0, 0)), np.zeros((0, D.shape[1])), np.zeros((D.shape[0], 0)), D)


@dataclass(frozen=True)
class RationalTF:
    """SISO transfer function ``num(z^-1) / den(z^-1)`` with ``den[0] == 1``.

    ``min_phase`` is only ever set by :func:`certify_min_phase`, which checks
    that every zero and pole lies strictly inside the unit circle.
    """

    num: np.ndarray
    den: np.ndarray
    min_phase: bool = field(default=False, compare=False)

    def __post_init__(self):
        num = np.atleast_1d(np.asarray(self.num, dtype=float)).copy()
        den = np.atleast_1d(np.asarray(self.den, dtype=float)).copy()
        if num.ndim != 1 or den.ndim != 1:
            raise DimensionError("RationalTF coefficients must be 1-D")
        if den.size == 0 or den[0] == 0.0:
            raise AlgebraError("leading denominator coefficient must be nonzero")
        if den[0] != 1.0:
            num, den = num / den[0], den / den[0]
        num.setflags(write=False)
        den.setflags(write=False)
        object.__setattr__(self, "num", num)
        object.__setattr__(self, "den", den)

    def zeros(self) -> np.ndarray:
        b = np.trim_zeros(self.num, "b")
        return np.roots(b) if b.size > 1 else np.zeros(0, dtype=complex)

    def poles(self) -> np.ndarray:
        a = np.trim_zeros(self.den, "b")
        return np.roots(a) if a.size > 1 else np.zeros(0, dtype=complex)


@dataclass(frozen=True)
class ImpulseResponse:
    """Markov parameters ``g_0..g_T`` (shape ``(T+1, p, m)``) and an l1 tail bound."""

    taps: np.ndarray
    tail_bound: float

    @property
    def siso(self) -> np.ndarray:
        if self.taps.shape[1:] != (1, 1):
            raise DimensionError("impulse response is not SISO")
        return self.taps[:, 0, 0]

    def l1(self) -> float:
        return float(np.sum(np.abs(self.taps)))

    def l2(self) -> float:
        return float(np.sqrt(np.sum(self.taps ** 2)))


System = StateSpace | RationalTF


# --------------------------------------------------------------------------
# conversions
# --------------------------------------------------------------------------


def to_state_space(sys: System) -> StateSpace:
    if isinstance(sys, StateSpace):
        return sys
    if not isinstance(sys, RationalTF):
        raise TypeError(f"expected StateSpace or RationalTF, got {type(sys).__name__}")
    k = max(sys.num.size, sys.den.size)
    b = np.pad(sys.num, (0, k - sys.num.size))
    a = np.pad(sys.den, (0, k - sys.den.size))
    if k == 1:
        return StateSpace.static([[b[0]]])
    A, B, C, D = signal.tf2ss(b, a)
    return StateSpace(A, B, C, D)


def to_tf(sys: System) -> RationalTF:
    if isinstance(sys, RationalTF):
        return sys
    if sys.n_inputs != 1 or sys.n_outputs != 1:
        raise DimensionError("only SISO state-space systems convert to RationalTF")
    if sys.n_states == 0:
        return RationalTF([sys.D[0, 0]], [1.0])
    num, den = signal.ss2tf(sys.A, sys.B, sys.C, sys.D)
    return RationalTF(num[0], den)


def system_from_dict(d: dict) -> System:
    """Parse the JSON system description used by the CLI.

    Accepts ``{"A","B","C","D"}`` matrices, ``{"num","den"}`` coefficients in
    ``z^-1``, or ``{"continuous": {"num","den"}}`` (descending powers of ``s``)
    which is discretized with :func:`bilinear_map`.
    """
    if "continuous" in d:
        c = d["continuous"]
        return bilinear_map(c["num"], c["den"], k=float(d.get("bilinear_k", 2.0)))
    if "num" in d:
        return RationalTF(d["num"], d["den"])
    if "D" in d:
        D = as_matrix(d["D"], "D")
        if "A" not in d or np.asarray(d["A"]).size == 0:
            return StateSpace.static(D)
        return StateSpace(d["A"], d["B"], d["C"], D)
    raise DomainError("system description needs A/B/C/D, num/den, or continuous")


def system_to_dict(sys: System) -> dict:
    if isinstance(sys, RationalTF):
        return {"num": sys.num.tolist(), "den": sys.den.tolist()}
    return {k: getattr(sys, k).tolist() for k in "ABCD"}


# --------------------------------------------------------------------------
# simulation, impulse response, stability
# --------------------------------------------------------------------------


def is_stable(sys: System) -> bool:
    ss = to_state_space(sys)
    return spectral_radius(ss.A) < 1.0 - TOLERANCES["stability_margin"]


def _require_stable(sys: System, what: str) -> StateSpace:
    ss = to_state_space(sys)
    if not is_stable(ss):
        raise StabilityError(f"{what} requires a stable system (spectral radius {spectral_radius(ss.A):.6g})")
    return ss


def simulate(sys: System, u, x0=None) -> np.ndarray:
    """Causal response to ``u`` (shape ``(T,)`` for SISO or ``(T, m)``)."""
    u = np.asarray(u, dtype=float)
    squeeze = u.ndim == 1
    if isinstance(sys, RationalTF) and x0 is None and squeeze:
        return signal.lfilter(sys.num, sys.den, u)
    ss = to_state_space(sys)
    U = u.reshape(-1, 1) if squeeze else u
    if U.ndim != 2 or U.shape[1] != ss.n_inputs:
        raise DimensionError(f"input has shape {u.shape}, system expects {ss.n_inputs} channels")
    x = np.zeros(ss.n_states) if x0 is None else np.asarray(x0, dtype=float).ravel()
    if x.size != ss.n_states:
        raise DimensionError(f"x0 has {x.size} entries, system has {ss.n_states} states")
    T = U.shape[0]
    Y = np.empty((T, ss.n_outputs))
    A, B, C, D = ss.A, ss.B, ss.C, ss.D
    for t in range(T):
        Y[t] = C @ x + D @ U[t]
        x = A @ x + B @ U[t]
    if squeeze and ss.n_outputs == 1:
        return Y[:, 0]
    return Y


def simulate_batch(sys: System, U: np.ndarray) -> np.ndarray:
    """Zero-state response for a batch of inputs of shape ``(T, batch, m)``; returns ``(T, batch, p)``."""
    ss = to_state_space(sys)
    U = np.asarray(U, dtype=float)
    if U.ndim != 3 or U.shape[2] != ss.n_inputs:
        raise DimensionError(f"batch input must have shape (T, batch, {ss.n_inputs}), got {U.shape}")
    T, nb, _ = U.shape
    if ss.n_inputs == 1 and ss.n_outputs == 1:
        tf = to_tf(ss)
        return signal.lfilter(tf.num, tf.den, U, axis=0)
    Y = np.empty((T, nb, ss.n_outputs))
    x = np.zeros((nb, ss.n_states))
    At, Bt, Ct, Dt = ss.A.T, ss.B.T, ss.C.T, ss.D.T
    for t in range(T):
        Y[t] = x @ Ct + U[t] @ Dt
        x = x @ At + U[t] @ Bt
    return Y


def impulse_response(sys: System, T: int) -> ImpulseResponse:
    """Taps ``g_0 = D``, ``g_t = C A^(t-1) B`` up to ``t = T``."""
    if T < 0:
        raise DomainError("horizon must be nonnegative")
    ss = to_state_space(sys)
    taps = np.empty((T + 1, ss.n_outputs, ss.n_inputs))
    taps[0] = ss.D
    X = ss.B.copy()
    for t in range(1, T + 1):
        taps[t] = ss.C @ X
        X = ss.A @ X
    # X now holds A^T B
    tail = _l1_tail_bound(ss, X) if is_stable(ss) else math.inf
    return ImpulseResponse(taps, tail)


def _l1_tail_bound(ss: StateSpace, X: np.ndarray) -> float:
    """Bound on sum_{k>=0} |C A^k X| from a weighted Lyapunov function.

    With r between the spectral radius and 1, Cauchy-Schwarz gives
    sum |h_k| <= sqrt(1/(1-r^2)) * sqrt(sum r^-2k h_k^2).
    """
    if ss.n_states == 0:
        return 0.0
    rho = spectral_radius(ss.A)
    r = 0.5 * (1.0 + rho)
    As = ss.A / r
    total = 0.0
    for i in range(ss.n_outputs):
        c = ss.C[i : i + 1]
        W = solve_discrete_lyapunov(As.T, c.T @ c)
        for j in range(X.shape[1]):
            v = X[:, j]
            total += math.sqrt(max(v @ W @ v, 0.0))
    return total / math.sqrt(1.0 - r * r)


def default_horizon(sys: System, rel: float = 1e-10, start: int = 64, cap: int = 1 << 20) -> int:
    """Smallest doubling horizon whose l1 tail bound is below ``rel`` of the accumulated l1 norm."""
    ss = _require_stable(sys, "horizon selection")
    T = start
    while True:
        ir = impulse_response(ss, T)
        if ir.tail_bound <= rel * max(ir.l1(), np.finfo(float).tiny) or T >= cap:
            return T
        T *= 2


# --------------------------------------------------------------------------
# norms
# --------------------------------------------------------------------------


def h2_norm(sys: System) -> float:
    ss = _require_stable(sys, "h2_norm")
    val = float(np.trace(ss.D @ ss.D.T))
    if ss.n_states:
        P = solve_discrete_lyapunov(ss.A, ss.B @ ss.B.T)
        val += float(np.trace(ss.C @ P @ ss.C.T))
    return math.sqrt(max(val, 0.0))


def freqresp(sys: System, w) -> np.ndarray:
    """Frequency response at angular frequencies ``w``; shape ``(len(w), p, m)``."""
    w = np.atleast_1d(np.asarray(w, dtype=float))
    if isinstance(sys, RationalTF):
        q = np.exp(-1j * w)
        num = np.polyval(sys.num[::-1], q)
        den = np.polyval(sys.den[::-1], q)
        return (num / den)[:, None, None]
    ss = sys
    if ss.n_states == 0:
        return np.broadcast_to(ss.D.astype(complex), (w.size, *ss.D.shape)).copy()
    z = np.exp(1j * w)
    n = ss.n_states
    M = z[:, None, None] * np.eye(n)[None] - ss.A[None]
    X = np.linalg.solve(M, np.broadcast_to(ss.B.astype(complex), (w.size, *ss.B.shape)))
    return ss.C[None] @ X + ss.D[None]


def _sigma_max(sys: System, w) -> np.ndarray:
    G = freqresp(sys, w)
    if G.shape[1:] == (1, 1):
        return np.abs(G[:, 0, 0])
    return np.linalg.svd(G, compute_uv=False)[:, 0]


def hinf_norm(sys: System, grid: int = GRID_POINTS) -> float:
    """Peak gain over frequency: coarse grid plus pole angles, refined by Brent search."""
    ss = _require_stable(sys, "hinf_norm")
    if ss.n_states == 0:
        return float(np.linalg.norm(ss.D, 2)) if ss.D.size else 0.0
    w = np.linspace(0.0, np.pi, grid + 1)
    poles = np.linalg.eigvals(ss.A)
    w = np.unique(np.concatenate([w, np.abs(np.angle(poles))]))
    s = _sigma_max(ss, w)
    best = float(np.max(s))
    # refine around the few largest local maxima
    interior = np.flatnonzero((s[1:-1] >= s[:-2]) & (s[1:-1] >= s[2:])) + 1
    cands = np.concatenate([[0, w.size - 1], interior])
    cands = cands[np.argsort(-s[cands])][:8]
    for k in cands:
        lo = w[max(k - 1, 0)]
        hi = w[min(k + 1, w.size - 1)]
        if hi <= lo:
            continue
        res = optimize.minimize_scalar(lambda x: -_sigma_max(ss, [x])[0], bounds=(lo, hi),
                                       method="bounded", options={"xatol": 1e-12})
        best = max(best, -float(res.fun))
    return best


def magnitude_grid(sys: System, M: int = GRID_POINTS) -> tuple[np.ndarray, np.ndarray]:
    """``(w, |G(e^{jw})|)`` on the uniform grid ``w_k = 2 pi k / M``."""
    w = 2.0 * np.pi * np.arange(M) / M
    G = freqresp(sys, w)
    if G.shape[1:] != (1, 1):
        raise DimensionError("magnitude_grid needs a SISO system")
    return w, np.abs(G[:, 0, 0])


def mean_abs_gain(sys: System, M: int = GRID_POINTS) -> float:
    """(1/2pi) * integral of |G(e^{jw})| over a period (trapezoidal rule on the periodic grid)."""
    _, mag = magnitude_grid(sys, M)
    return float(np.mean(mag))


# --------------------------------------------------------------------------
# bilinear transform, series connection, inversion
# --------------------------------------------------------------------------


def bilinear_map(num_s, den_s, k: float = 2.0) -> RationalTF:
    """Discretize ``num(s)/den(s)`` (descending powers) with ``s = k (1 - z^-1)/(1 + z^-1)``."""
    bs = np.atleast_1d(np.asarray(num_s, dtype=float))
    as_ = np.atleast_1d(np.asarray(den_s, dtype=float))
    N = max(bs.size, as_.size) - 1
    P = np.polynomial.polynomial

    def substitute(coeffs_desc: np.ndarray) -> np.ndarray:
        out = np.zeros(N + 1)
        deg = coeffs_desc.size - 1
        for i, c in enumerate(coeffs_desc):
            power = deg - i
            term = P.polymul(P.polypow([1.0, -1.0], power), P.polypow([1.0, 1.0], N - power))
            out[: term.size] += c * k ** power * term
        return out

    num = substitute(bs)
    den = substitute(as_)
    if abs(den[0]) <= 1e-14 * max(np.max(np.abs(den)), 1.0):
        raise AlgebraError("bilinear substitution leaves a vanishing leading denominator coefficient")
    if not np.any(den):
        raise AlgebraError("denominator vanishes after substitution")
    return RationalTF(num, den)


def compose_series(first: System, second: System) -> System:
    """System whose response is ``second(first(u))``."""
    if isinstance(first, RationalTF) and isinstance(second, RationalTF):
        return RationalTF(np.convolve(first.num, second.num), np.convolve(first.den, second.den))
    s1, s2 = to_state_space(first), to_state_space(second)
    if s1.n_outputs != s2.n_inputs:
        raise DimensionError("series connection needs matching output/input dimensions")
    n1, n2 = s1.n_states, s2.n_states
    A = np.block([[s1.A, np.zeros((n1, n2))], [s2.B @ s1.C, s2.A]])
    B = np.vstack([s1.B, s2.B @ s1.D])
    C = np.hstack([s2.D @ s1.C, s2.C])
    D = s2.D @ s1.D
    return StateSpace(A, B, C, D)


def certify_min_phase(tf: RationalTF, tol: float = 1e-12) -> RationalTF:
    """Return ``tf`` flagged minimum phase, or raise if any zero/pole is not strictly inside."""
    z, p = tf.zeros(), tf.poles()
    if tf.num.size == 0 or tf.num[0] == 0.0:
        raise DomainError("a leading numerator coefficient of zero is a pure delay; not invertible")
    if (z.size and np.max(np.abs(z)) >= 1.0 - tol) or (p.size and np.max(np.abs(p)) >= 1.0 - tol):
        raise DomainError("transfer function is not stable and minimum phase")
    return RationalTF(tf.num, tf.den, min_phase=True)


def invert(tf: RationalTF) -> RationalTF:
    if not isinstance(tf, RationalTF) or not tf.min_phase:
        raise DomainError("invert needs a certified minimum-phase RationalTF")
    return RationalTF(tf.den / tf.num[0], tf.num / tf.num[0], min_phase=True)


# --------------------------------------------------------------------------
# spectral factorization
# --------------------------------------------------------------------------


def _reflect_inside(roots: np.ndarray, margin: float = 1e-6) -> np.ndarray:
    """Mirror roots outside the unit circle to ``1/conj(r)``.

    Replacing ``(1 - r q)`` by ``(1 - q / conj(r))`` scales the magnitude on the
    unit circle by the constant ``1/|r|``, so the shape of ``|G|`` is kept.
    Roots left within ``margin`` of the circle are pulled strictly inside.
    """
    out = roots.astype(complex).copy()
    for i, r in enumerate(out):
        if abs(r) > 1.0:
            out[i] = 1.0 / np.conj(r)
        a = abs(out[i])
        if a >= 1.0 - margin:
            out[i] *= (1.0 - margin) / a
    return out


def _poly_from_roots(roots: np.ndarray) -> np.ndarray:
    """Coefficients in z^-1 of prod (1 - r z^-1), real part."""
    return np.real(np.poly(roots)) if roots.size else np.ones(1)


def _era(f: np.ndarray, order: int) -> StateSpace:
    r = min(max(4 * order, 64), (f.size - 2) // 2)
    H0 = la.hankel(f[1 : r + 1], f[r : 2 * r])
    H1 = la.hankel(f[2 : r + 2], f[r + 1 : 2 * r + 1])
    U, s, Vt = np.linalg.svd(H0)
    order = min(order, int(np.sum(s > s[0] * 1e-13)))
    U, s, Vt = U[:, :order], s[:order], Vt[:order]
    sq = np.sqrt(s)
    A = (U / sq).T @ H1 @ (Vt.T / sq)
    B = (sq[:, None] * Vt)[:, :1]
    C = (U * sq)[:1, :]
    return StateSpace(A, B, C, [[f[0]]])


def spectral_factor(mag, order: int) -> tuple[RationalTF, float]:
    """Minimum-phase ``G1`` of the given order with ``|G1|^2 ~ lam * mag`` on the grid.

    ``mag`` is sampled on the uniform periodic grid ``w_k = 2 pi k / M``. The
    log magnitude is folded through the real cepstrum into a minimum-phase FIR,
    which an eigensystem realization reduces to the requested order. Poles or
    zeros that land outside the unit circle are mirrored inside (magnitude shape
    is unchanged) and the gain is reset so that ``lam = 1`` in the log-average
    sense. Returns ``(G1, lam)``.
    """
    mag = np.asarray(mag, dtype=float).ravel()
    if mag.size < 16:
        raise DomainError("magnitude grid is too small")
    if not np.all(np.isfinite(mag)) or np.any(mag <= 0.0):
        raise DomainError("target magnitude must be finite and strictly positive on the grid")
    if order < 0:
        raise DomainError("order must be nonnegative")
    M = mag.size
    target_log = 0.5 * np.log(mag)
    if order == 0 or np.ptp(mag) <= 1e-12 * np.max(mag):
        g = math.exp(float(np.mean(target_log)))
        return certify_min_phase(RationalTF([g], [1.0])), 1.0

    c = np.fft.ifft(target_log).real
    fold = np.zeros(M)
    fold[0] = c[0]
    fold[1 : (M + 1) // 2] = 2.0 * c[1 : (M + 1) // 2]
    if M % 2 == 0:
        fold[M // 2] = c[M // 2]
    f = np.fft.ifft(np.exp(np.fft.fft(fold))).real

    tf = to_tf(_era(f, order))
    zeros = _reflect_inside(tf.zeros())
    poles = _reflect_inside(tf.poles())
    num = _poly_from_roots(zeros)
    den = _poly_from_roots(poles)
    w = 2.0 * np.pi * np.arange(M) / M
    cand = RationalTF(num, den)
    fit_log = np.log(np.abs(freqresp(cand, w)[:, 0, 0]))
    g = math.exp(float(np.mean(target_log - fit_log)))
    G1 = certify_min_phase(RationalTF(g * num, den))
    return G1, 1.0
