from __future__ import annotations

import cvxpy as cp
import numpy as np
import pytest
import scipy.linalg as sla

from dpfilter import sdp
from dpfilter.errors import DimensionError, DomainError, InfeasibleError


def test_affine_algebra():
    prob = sdp.SdpProblem()
    X = prob.symmetric("X", 2)
    t = prob.scalar("t")
    M = np.array([[1.0, 2.0], [0.0, 1.0]])
    expr = M @ X @ M.T + 3.0 * X - np.eye(2)
    x = np.arange(1.0, prob.n_vars + 1)
    Xv = X.value(x)
    np.testing.assert_allclose(expr.value(x), M @ Xv @ M.T + 3 * Xv - np.eye(2))
    assert expr.is_symmetric()
    assert (X @ M).T.value(x) == pytest.approx((Xv @ M).T)
    assert X.trace().value(x)[0, 0] == pytest.approx(np.trace(Xv))
    B = sdp.bmat([[X, None], [None, t]])
    np.testing.assert_allclose(B.value(x), sla.block_diag(Xv, x[3]))
    with pytest.raises(DomainError):
        X @ X
    with pytest.raises(DomainError):
        X * X
    with pytest.raises(DimensionError):
        X + np.eye(3)
    with pytest.raises(DimensionError):
        sdp.bmat([[X, None], [None, None]])
    with pytest.raises(DomainError):
        prob.symmetric("X", 2)
    with pytest.raises(DomainError):
        prob.add_lmi(prob.matrix("R", 2, 2))


def test_known_optimum_max_eigenvalue(rng):
    M = rng.standard_normal((5, 5))
    M = M + M.T
    prob = sdp.SdpProblem()
    t = prob.scalar("t")
    t_eye = sdp.Affine(np.zeros((5, 5)), {k: np.eye(5) for k in t.coefs})  # t * I
    prob.add_lmi(t_eye - M, strict=False)
    prob.minimize(t)
    sol = prob.solve()
    assert sol.status == "optimal"
    assert sol.objective == pytest.approx(np.linalg.eigvalsh(M).max(), abs=1e-5)


def test_known_optimum_lyapunov_trace(rng):
    A = rng.standard_normal((3, 3))
    A *= 0.8 / max(abs(np.linalg.eigvals(A)))
    Q = np.eye(3)
    prob = sdp.SdpProblem()
    P = prob.symmetric("P", 3)
    prob.add_lmi(P - A @ P @ A.T - Q, strict=False)
    prob.minimize(P.trace())
    sol = prob.solve()
    P_star = sla.solve_discrete_lyapunov(A, Q)
    assert sol.objective == pytest.approx(np.trace(P_star), abs=1e-5)
    np.testing.assert_allclose(sol["P"], P_star, atol=1e-4)


def test_known_optimum_min_eigenvalue(rng):
    C = rng.standard_normal((4, 4))
    C = C + C.T
    prob = sdp.SdpProblem()
    X = prob.symmetric("X", 4)
    prob.add_lmi(X, strict=False)
    prob.add_leq(X.trace(), 1.0, strict=False)
    obj = (C @ X).trace()
    prob.minimize(obj)
    sol = prob.solve()
    assert sol.objective == pytest.approx(min(0.0, np.linalg.eigvalsh(C).min()), abs=1e-5)


def _random_bounded_sdp(rng, m=6, k=5):
    F = [rng.standard_normal((k, k)) for _ in range(m)]
    F = [f + f.T for f in F]
    x0 = rng.standard_normal(m)
    F0 = np.eye(k) - sum(x * f for x, f in zip(x0, F))  # x0 strictly feasible
    Z0 = rng.standard_normal((k, k))
    Z0 = Z0 @ Z0.T + np.eye(k)
    c = np.array([np.sum(f * Z0) for f in F])  # dual feasible, so the primal is bounded
    return F0, F, c


def test_random_sdps_match_cvxpy(rng):
    for _ in range(5):
        F0, F, c = _random_bounded_sdp(rng)
        prob = sdp.SdpProblem()
        xs = [prob.scalar(f"x{i}") for i in range(len(F))]
        expr = sdp.Affine(F0)
        for x, f in zip(xs, F):
            expr = expr + sdp.Affine(np.zeros_like(f), {k: f for k in x.coefs})
        prob.add_lmi(expr, strict=False)
        obj = sdp.Affine([[0.0]])
        for x, ci in zip(xs, c):
            obj = obj + ci * x
        prob.minimize(obj)
        sol = prob.solve()

        xv = cp.Variable(len(F))
        S = F0 + sum(xv[i] * F[i] for i in range(len(F)))
        ref = cp.Problem(cp.Minimize(c @ xv), [(S + S.T) / 2 >> 0])
        ref.solve(solver="CLARABEL")
        assert sol.status == "optimal"
        assert sol.objective == pytest.approx(ref.value, abs=1e-5 * max(1.0, abs(ref.value)))
        assert sol.gap <= 1e-6 * max(1.0, abs(sol.objective))
        assert min(sol.min_eigs.values()) >= -1e-8


def test_strict_constraints_hold_margin(rng):
    prob = sdp.SdpProblem()
    X = prob.symmetric("X", 2)
    prob.add_lmi(X - np.eye(2), name="lower")
    prob.minimize(X.trace())
    sol = prob.solve()
    assert sol.min_eigs["lower"] >= sdp.STRICT_MARGIN * (1 - 1e-3)
    assert sol.objective == pytest.approx(2.0, abs=1e-5)


def test_infeasibility_detected():
    prob = sdp.SdpProblem()
    x = prob.scalar("x")
    prob.add_leq(x, -1.0, strict=False)
    prob.add_leq(1.0, x, strict=False)
    prob.minimize(x)
    assert prob.solve().status == "infeasible"
    with pytest.raises(InfeasibleError):
        sdp.solve_sdp(prob)


def test_infeasible_matrix_problem():
    # X >= I and X <= 0.5 I cannot both hold
    prob = sdp.SdpProblem()
    X = prob.symmetric("X", 3)
    prob.add_lmi(X - np.eye(3))
    prob.add_lmi(0.5 * np.eye(3) - X)
    assert prob.solve().status == "infeasible"


def test_variable_cap():
    prob = sdp.SdpProblem()
    with pytest.raises(DomainError):
        prob.symmetric("big", 40)


def test_unused_variable_rejected():
    prob = sdp.SdpProblem()
    x = prob.scalar("x")
    prob.scalar("y")
    prob.add_leq(x, 1.0)
    prob.minimize(x * -1.0)
    with pytest.raises(DomainError):
        prob.solve()
