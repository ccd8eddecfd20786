"""Small dense semidefinite programs: an affine modeling layer and a primal-dual interior-point solver.

Problems have the form

    minimize  c'x   subject to   F_j(x) = F_j0 + sum_i x_i F_ji  >= 0  for every block j,

with the dual ``maximize -sum_j <F_j0, Z_j>`` s.t. ``sum_j <F_ji, Z_j> = c_i``,
``Z_j >= 0``. The solver is an infeasible-start method with Nesterov-Todd
scaling and a Mehrotra predictor-corrector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import ConvergenceError, DimensionError, DomainError, InfeasibleError

MAX_VARIABLES = 500
STRICT_MARGIN = 1e-7
RELAXED_TOL = 1e-6


# --------------------------------------------------------------------------
# modeling layer
# --------------------------------------------------------------------------


class Affine:
    """Matrix-valued affine expression ``const + sum_i x_i coef_i``."""

    __array_priority__ = 100  # make ndarray @ Affine dispatch here

    def __init__(self, const, coefs: dict[int, np.ndarray] | None = None):
        self.const = np.atleast_2d(np.asarray(const, dtype=float))
        self.coefs = {} if coefs is None else coefs

    @property
    def shape(self) -> tuple[int, int]:
        return self.const.shape

    @staticmethod
    def lift(x) -> Affine:
        return x if isinstance(x, Affine) else Affine(x)

    def _combine(self, other, sign: float) -> Affine:
        other = Affine.lift(other)
        if other.shape != self.shape:
            if other.shape == (1, 1) and not other.coefs:
                other = Affine(np.full(self.shape, other.const[0, 0]))
            else:
                raise DimensionError(f"shape mismatch {self.shape} vs {other.shape}")
        coefs = dict(self.coefs)
        for k, v in other.coefs.items():
            coefs[k] = coefs[k] + sign * v if k in coefs else sign * v
        return Affine(self.const + sign * other.const, coefs)

    def __add__(self, other):
        return self._combine(other, 1.0)

    __radd__ = __add__

    def __sub__(self, other):
        return self._combine(other, -1.0)

    def __rsub__(self, other):
        return Affine.lift(other)._combine(self, -1.0)

    def __neg__(self):
        return self * -1.0

    def __mul__(self, s):
        if isinstance(s, Affine) or np.ndim(s) != 0:
            raise DomainError("only scalar multiplication keeps an expression affine")
        s = float(s)
        return Affine(self.const * s, {k: v * s for k, v in self.coefs.items()})

    __rmul__ = __mul__

    def __matmul__(self, M):
        if isinstance(M, Affine):
            if M.coefs and self.coefs:
                raise DomainError("product of two variable expressions is not affine")
            if not M.coefs:
                M = M.const
            else:
                return M.__rmatmul__(self.const)
        M = np.atleast_2d(np.asarray(M, dtype=float))
        return Affine(self.const @ M, {k: v @ M for k, v in self.coefs.items()})

    def __rmatmul__(self, M):
        M = np.atleast_2d(np.asarray(M, dtype=float))
        return Affine(M @ self.const, {k: M @ v for k, v in self.coefs.items()})

    @property
    def T(self) -> Affine:
        return Affine(self.const.T, {k: v.T for k, v in self.coefs.items()})

    def trace(self) -> Affine:
        return Affine([[np.trace(self.const)]], {k: np.array([[np.trace(v)]]) for k, v in self.coefs.items()})

    def value(self, x: np.ndarray) -> np.ndarray:
        out = self.const.copy()
        for k, v in self.coefs.items():
            out += x[k] * v
        return out

    def is_symmetric(self, tol: float = 1e-12) -> bool:
        mats = [self.const, *self.coefs.values()]
        return all(m.shape[0] == m.shape[1] and np.allclose(m, m.T, atol=tol, rtol=0) for m in mats)


def bmat(blocks) -> Affine:
    """Block matrix from a nested list of expressions, arrays, or ``None``/``0`` for zero blocks."""
    rows = len(blocks)
    cols = len(blocks[0])
    if any(len(r) != cols for r in blocks):
        raise DimensionError("ragged block matrix")
    heights = [None] * rows
    widths = [None] * cols
    for i, r in enumerate(blocks):
        for j, b in enumerate(r):
            if b is None or (np.isscalar(b) and b == 0):
                continue
            h, w = Affine.lift(b).shape
            if heights[i] not in (None, h) or widths[j] not in (None, w):
                raise DimensionError(f"block ({i},{j}) has inconsistent shape {(h, w)}")
            heights[i], widths[j] = h, w
    if None in heights or None in widths:
        raise DimensionError("every block row and column needs at least one sized block")
    ro = np.concatenate([[0], np.cumsum(heights)])
    co = np.concatenate([[0], np.cumsum(widths)])
    const = np.zeros((ro[-1], co[-1]))
    coefs: dict[int, np.ndarray] = {}
    for i, r in enumerate(blocks):
        for j, b in enumerate(r):
            if b is None or (np.isscalar(b) and b == 0):
                continue
            b = Affine.lift(b)
            const[ro[i]:ro[i + 1], co[j]:co[j + 1]] = b.const
            for k, v in b.coefs.items():
                if k not in coefs:
                    coefs[k] = np.zeros_like(const)
                coefs[k][ro[i]:ro[i + 1], co[j]:co[j + 1]] = v
    return Affine(const, coefs)


@dataclass
class Variable:
    name: str
    shape: tuple[int, int]
    kind: str  # "symmetric" or "matrix"
    indices: list[int]
    expr: Affine


@dataclass
class Block:
    name: str
    expr: Affine
    margin: float


@dataclass
class SdpSolution:
    status: str  # "optimal" or "infeasible"
    x: np.ndarray
    values: dict[str, np.ndarray]
    objective: float
    gap: float
    iterations: int
    min_eigs: dict[str, float]
    duals: list[np.ndarray] = field(default_factory=list, repr=False)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]


class SdpProblem:
    def __init__(self):
        self.n_vars = 0
        self.variables: dict[str, Variable] = {}
        self.blocks: list[Block] = []
        self.objective: Affine | None = None

    def _new(self, name: str, shape, kind: str, bases) -> Affine:
        if name in self.variables:
            raise DomainError(f"variable {name!r} already declared")
        idx = list(range(self.n_vars, self.n_vars + len(bases)))
        self.n_vars += len(bases)
        if self.n_vars > MAX_VARIABLES:
            raise DomainError(f"problem exceeds {MAX_VARIABLES} scalar variables")
        expr = Affine(np.zeros(shape), dict(zip(idx, bases)))
        self.variables[name] = Variable(name, shape, kind, idx, expr)
        return expr

    def symmetric(self, name: str, n: int) -> Affine:
        bases = []
        for i in range(n):
            for j in range(i, n):
                E = np.zeros((n, n))
                E[i, j] = E[j, i] = 1.0
                bases.append(E)
        return self._new(name, (n, n), "symmetric", bases)

    def matrix(self, name: str, rows: int, cols: int) -> Affine:
        bases = []
        for i in range(rows):
            for j in range(cols):
                E = np.zeros((rows, cols))
                E[i, j] = 1.0
                bases.append(E)
        return self._new(name, (rows, cols), "matrix", bases)

    def scalar(self, name: str) -> Affine:
        return self._new(name, (1, 1), "matrix", [np.ones((1, 1))])

    def add_lmi(self, expr: Affine, strict: bool = True, name: str | None = None, margin: float | None = None):
        """Require ``expr`` positive semidefinite (or definite with a small margin if ``strict``)."""
        expr = Affine.lift(expr)
        if not expr.is_symmetric():
            raise DomainError(f"constraint {name or len(self.blocks)} is not symmetric")
        if margin is None:
            # absolute: a margin scaled by the largest constant would swamp the small diagonal blocks
            margin = STRICT_MARGIN if strict else 0.0
        self.blocks.append(Block(name or f"lmi{len(self.blocks)}", expr, margin))

    def add_leq(self, lhs, rhs, strict: bool = True, name: str | None = None):
        """Scalar inequality ``lhs <= rhs`` (``lhs < rhs`` with a margin if ``strict``)."""
        d = Affine.lift(rhs) - Affine.lift(lhs)
        if d.shape != (1, 1):
            raise DimensionError("add_leq expects scalar expressions")
        self.add_lmi(d, strict, name or f"leq{len(self.blocks)}")

    def minimize(self, expr):
        expr = Affine.lift(expr)
        if expr.shape != (1, 1):
            raise DimensionError("objective must be scalar")
        self.objective = expr

    def solve(self, tol: float = 1e-8, max_iter: int = 100) -> SdpSolution:
        m = self.n_vars
        c = np.zeros(m)
        if self.objective is not None:
            for k, v in self.objective.coefs.items():
                c[k] = v[0, 0]
        data = []
        for b in self.blocks:
            k = b.expr.shape[0]
            idx = np.array(sorted(b.expr.coefs), dtype=int)
            Fi = np.array([b.expr.coefs[i] for i in idx]).reshape(len(idx), k, k)
            data.append((b.expr.const - b.margin * np.eye(k), idx, Fi))
        res = solve_lmi_form(c, data, m, tol=tol, max_iter=max_iter)
        values = {}
        for name, v in self.variables.items():
            values[name] = v.expr.value(res.x)
        min_eigs = {b.name: float(np.linalg.eigvalsh(b.expr.value(res.x)).min()) for b in self.blocks}
        obj = float(c @ res.x) + (float(self.objective.const[0, 0]) if self.objective is not None else 0.0)
        return SdpSolution(res.status, res.x, values, obj, res.gap, res.iterations, min_eigs, res.Z)


# --------------------------------------------------------------------------
# interior point method
# --------------------------------------------------------------------------


@dataclass
class _Result:
    status: str
    x: np.ndarray
    Z: list[np.ndarray]
    gap: float
    iterations: int


def _sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def _nt_scaling(S: np.ndarray, Z: np.ndarray):
    Ls = np.linalg.cholesky(S)
    Lz = np.linalg.cholesky(Z)
    U, lam, Vt = np.linalg.svd(Lz.T @ Ls)
    isq = 1.0 / np.sqrt(lam)
    R = Ls @ Vt.T * isq
    Rinv = (isq[:, None] * U.T) @ Lz.T
    return R, Rinv, lam


def _max_step(lam: np.ndarray, d: np.ndarray) -> float:
    isq = 1.0 / np.sqrt(lam)
    e = np.linalg.eigvalsh(_sym(isq[:, None] * d * isq[None, :])).min()
    return math.inf if e >= 0 else -1.0 / e


def _lyap_diag(lam: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve ``(diag(lam) X + X diag(lam)) / 2 = B``."""
    return 2.0 * B / (lam[:, None] + lam[None, :])


def solve_lmi_form(c: np.ndarray, blocks, m: int, tol: float = 1e-8, max_iter: int = 100) -> _Result:
    """Core solver. ``blocks`` holds ``(F0, idx, Fi)`` with ``Fi[k]`` the coefficient of ``x[idx[k]]``."""
    if m == 0:
        raise DomainError("problem has no variables")
    used = np.zeros(m, dtype=bool)
    for _, idx, _ in blocks:
        used[idx] = True
    if not used.all():
        raise DomainError(f"variables {np.nonzero(~used)[0].tolist()} appear in no constraint")
    scale = max([1.0] + [np.abs(F0).max() for F0, _, _ in blocks] + [np.abs(c).max(initial=0.0)])
    dims = [F0.shape[0] for F0, _, _ in blocks]
    N = sum(dims)
    x = np.zeros(m)
    xi = 10.0 * scale
    S = [xi * np.eye(k) for k in dims]
    Z = [xi * np.eye(k) for k in dims]
    nrm_F0 = math.sqrt(sum(np.sum(F0 ** 2) for F0, _, _ in blocks))
    nrm_c = float(np.linalg.norm(c))
    nrm_A = max(math.sqrt(float(np.max(np.sum(Fi ** 2, axis=(1, 2))))) for _, idx, Fi in blocks if len(idx))
    hist = {}
    for it in range(1, max_iter + 1):
        rp = [F0 + np.tensordot(x[idx], Fi, axes=1) - Sj for (F0, idx, Fi), Sj in zip(blocks, S)]
        AtZ = np.zeros(m)
        for (_, idx, Fi), Zj in zip(blocks, Z):
            AtZ[idx] += np.einsum("kij,ij->k", Fi, Zj)
        rd = c - AtZ
        gap = sum(float(np.sum(Sj * Zj)) for Sj, Zj in zip(S, Z))
        mu = gap / N
        pobj = float(c @ x)
        dobj = -sum(float(np.sum(F0 * Zj)) for (F0, _, _), Zj in zip(blocks, Z))
        pres = math.sqrt(sum(np.sum(r ** 2) for r in rp)) / (1.0 + nrm_F0)
        dres = float(np.linalg.norm(rd)) / (1.0 + nrm_c)
        rel_gap = abs(pobj - dobj) / (1.0 + abs(pobj) + abs(dobj))
        hist = {"iteration": it, "primal_residual": pres, "dual_residual": dres, "gap": rel_gap, "mu": mu}
        if pres <= tol and dres <= tol and rel_gap <= tol and gap / (1.0 + abs(pobj)) <= 10 * tol:
            return _Result("optimal", x, Z, rel_gap, it)
        # Farkas certificate of primal infeasibility: <F_i, Z> ~ 0 while -<F0, Z> > 0
        if dobj > 0:
            cert = float(np.linalg.norm(AtZ)) * nrm_F0 / (dobj * nrm_A)
            if cert <= tol:
                return _Result("infeasible", x, Z, rel_gap, it)

        try:
            scal = [_nt_scaling(Sj, Zj) for Sj, Zj in zip(S, Z)]
        except np.linalg.LinAlgError:
            # iterates reached the rounding floor; accept them if they meet the relaxed tolerance
            if max(pres, dres, rel_gap) <= RELAXED_TOL:
                return _Result("optimal", x, Z, rel_gap, it)
            raise ConvergenceError("lost positive definiteness before convergence", hist)
        Ft = []  # scaled coefficient stacks
        M = np.zeros((m, m))
        for (F0, idx, Fi), (R, Ri, lam) in zip(blocks, scal):
            Fs = Ri[None] @ Fi @ Ri.T[None]
            Ft.append(Fs)
            flat = Fs.reshape(len(idx), -1)
            M[np.ix_(idx, idx)] += flat @ flat.T
        rpt = [Ri @ r @ Ri.T for r, (_, Ri, _) in zip(rp, scal)]
        try:
            cf = sla.cho_factor(M + 1e-14 * np.trace(M) / m * np.eye(m))
            solve = lambda b: sla.cho_solve(cf, b)  # noqa: E731
        except np.linalg.LinAlgError:
            solve = lambda b: np.linalg.lstsq(M, b, rcond=None)[0]  # noqa: E731

        def direction(Xs):
            rhs = -rd.copy()
            for (F0, idx, Fi), Fs, X, r in zip(blocks, Ft, Xs, rpt):
                rhs[idx] += np.einsum("kij,ij->k", Fs, X - r)
            dx = solve(rhs)
            dS = [r + np.tensordot(dx[idx], Fs, axes=1) for (F0, idx, Fi), Fs, r in zip(blocks, Ft, rpt)]
            dZ = [X - d for X, d in zip(Xs, dS)]
            return dx, dS, dZ

        def steps(dS, dZ):
            ap = min([_max_step(lam, d) for (_, _, lam), d in zip(scal, dS)])
            ad = min([_max_step(lam, d) for (_, _, lam), d in zip(scal, dZ)])
            return ap, ad

        # predictor
        dx, dS, dZ = direction([-np.diag(lam) for _, _, lam in scal])
        ap, ad = steps(dS, dZ)
        ap, ad = min(1.0, ap), min(1.0, ad)
        mu_aff = sum(float(np.sum((np.diag(lam) + ap * a) * (np.diag(lam) + ad * b)))
                     for (_, _, lam), a, b in zip(scal, dS, dZ)) / N
        sigma = min(1.0, (mu_aff / mu) ** 3) if mu > 0 else 0.0
        # corrector
        Xs = []
        for (_, _, lam), a, b in zip(scal, dS, dZ):
            B = sigma * mu * np.eye(lam.size) - np.diag(lam ** 2) - _sym(a @ b)
            Xs.append(_lyap_diag(lam, B))
        dx, dS, dZ = direction(Xs)
        ap, ad = steps(dS, dZ)
        ap, ad = min(1.0, 0.98 * ap), min(1.0, 0.98 * ad)
        x = x + ap * dx
        S = [_sym(R @ (np.diag(lam) + ap * d) @ R.T) for (R, _, lam), d in zip(scal, dS)]
        Z = [_sym(Ri.T @ (np.diag(lam) + ad * d) @ Ri) for (_, Ri, lam), d in zip(scal, dZ)]
        if not all(np.all(np.isfinite(v)) for v in S + Z) or not np.all(np.isfinite(x)):
            raise ConvergenceError("interior point iterates diverged", hist)
        if max(np.abs(Zj).max() for Zj in Z) > 1e14 * scale:
            # dual ray: the primal blocks cannot all be made feasible
            return _Result("infeasible", x, Z, math.inf, it)
    raise ConvergenceError(f"SDP solver hit the {max_iter} iteration cap", hist)


def solve_sdp(problem: SdpProblem, tol: float = 1e-8, max_iter: int = 100) -> SdpSolution:
    """Solve ``problem``; raises :class:`InfeasibleError` when a Farkas certificate is found."""
    sol = problem.solve(tol=tol, max_iter=max_iter)
    if sol.status == "infeasible":
        raise InfeasibleError("SDP is infeasible")
    return sol
