import itertools

import cvxpy as cp
import numpy as np
import pytest
from hypothesis import given, strategies as st

from stochctl.convex_kernel import (Cone, ConicProgram, PerspectiveProgram, QpProblem, solve_conic,
                                    solve_feasibility, solve_perspective, solve_qp,
                                    solve_row_stochastic_ls)

TOL = 1e-8


def test_unconstrained_qp():
    c = np.array([1.0, -2.0, 0.5])
    rep = solve_qp(QpProblem(H=np.eye(3), c=-c))
    assert rep.optimal and np.allclose(rep.x, c)


def test_active_bound():
    rep = solve_qp(QpProblem(H=[[2.0]], c=[0.0], lb=[1.0]))
    assert rep.optimal and rep.x[0] == pytest.approx(1.0, abs=1e-7)


def test_equality_qp_matches_kkt_oracle(rng):
    M = rng.standard_normal((5, 5))
    H = M @ M.T + np.eye(5)
    c = rng.standard_normal(5)
    A = rng.standard_normal((2, 5))
    b = rng.standard_normal(2)
    rep = solve_qp(QpProblem(H=H, c=c, Aeq=A, beq=b))
    KKT = np.block([[H, A.T], [A, np.zeros((2, 2))]])
    oracle = np.linalg.solve(KKT, np.concatenate([-c, b]))[:5]
    assert np.allclose(rep.x, oracle, atol=1e-6)


def test_qp_rejects_indefinite():
    with pytest.raises(ValueError):
        QpProblem(H=[[1.0, 0.0], [0.0, -1.0]], c=[0.0, 0.0])


@given(st.integers(0, 100_000))
def test_inequality_qp_matches_cvxpy(seed):
    r = np.random.default_rng(seed)
    n, p, m = 6, 2, 4
    M = r.standard_normal((n, n))
    H = M @ M.T + 0.1 * np.eye(n)
    c = r.standard_normal(n)
    x0 = r.uniform(0.1, 1.0, n)          # strictly feasible point
    A = r.standard_normal((p, n))
    Ain = r.standard_normal((m, n))
    prob = QpProblem(H=H, c=c, Aeq=A, beq=A @ x0, lb=np.zeros(n), Ain=Ain, bin=Ain @ x0 + 0.5)
    rep = solve_qp(prob, tol=TOL)
    assert rep.optimal
    z = cp.Variable(n)
    ref = cp.Problem(cp.Minimize(0.5 * cp.quad_form(z, H) + c @ z),
                     [A @ z == A @ x0, z >= 0, Ain @ z <= Ain @ x0 + 0.5])
    ref.solve(solver=cp.CLARABEL)
    assert rep.objective == pytest.approx(ref.value, abs=1e-6 * max(1, abs(ref.value)))
    assert np.allclose(rep.x, z.value, atol=1e-4)


def test_socp_cone_program_matches_cvxpy(rng):
    # min c'x  s.t. ||x|| <= 1 written as (1, x) in Q^4
    c = rng.standard_normal(3)
    G = np.vstack([np.zeros((1, 3)), -np.eye(3)])
    h = np.array([1.0, 0, 0, 0])
    rep = solve_conic(ConicProgram(c=c, G=G, h=h, cone=Cone(0, [4])))
    assert rep.optimal
    assert np.allclose(rep.x, -c / np.linalg.norm(c), atol=1e-6)


def test_infeasible_lp_reported():
    # x >= 1 and x <= 0
    prog = ConicProgram(c=np.array([1.0]), G=np.array([[-1.0], [1.0]]), h=np.array([-1.0, 0.0]), cone=Cone(2))
    rep = solve_conic(prog)
    assert rep.status == "infeasible"


def _toy_perspective(form="kappa"):
    # rows: w1 = 1 and v1 + v2 = 2; with s = 1 kappa <= 2
    M0 = np.array([[0.0, 0.0], [-1.0, -1.0]])
    Mg = np.array([[-1.0, 0.0], [0.0, 0.0]])
    kw = dict(d_lin=np.zeros(2), r=1.0, M0=M0, Mg=Mg, m=np.array([1.0, 2.0]), s=1.0)
    if form == "kappa":
        return PerspectiveProgram(**kw, D_quad=np.eye(2), form="kappa")
    return PerspectiveProgram(**kw, colloc=np.eye(2), weights=np.ones(2), form="pointwise")


def test_perspective_scalar_toy():
    rep = solve_perspective(_toy_perspective(), tol=TOL)
    assert rep.optimal
    assert rep.objective == pytest.approx(0.5, abs=1e-6)
    assert rep.info["kappa"] == pytest.approx(2.0, abs=1e-6)
    assert rep.info["w"][0] == pytest.approx(1.0, abs=1e-8)


def test_perspective_pointwise_matches_cvxpy(rng):
    K, Q = 5, 12
    M0 = -np.eye(K) + 0.1 * rng.random((K, K))
    Mg = rng.standard_normal((K, K))
    v0, w0 = rng.uniform(0.5, 1.0, K), 0.3 * rng.standard_normal(K)
    m = -(M0 @ v0 + Mg @ w0)
    P = rng.random((Q, K))
    wts = rng.uniform(0.5, 1.5, Q)
    d = rng.uniform(0.5, 1.0, K)
    prog = PerspectiveProgram(d_lin=d, r=0.7, M0=M0, Mg=Mg, m=m, colloc=P, weights=wts, u_max=3.0)
    rep = solve_perspective(prog, tol=TOL)
    assert rep.optimal
    v, w = cp.Variable(K), cp.Variable(K)
    obj = d @ v + 0.7 * sum(wts[j] * cp.quad_over_lin(P[j] @ w, P[j] @ v) for j in range(Q))
    ref = cp.Problem(cp.Minimize(obj), [-(M0 @ v + Mg @ w) == m, v >= 0, cp.abs(w) <= 3.0 * v])
    ref.solve(solver=cp.CLARABEL)
    assert rep.objective == pytest.approx(ref.value, rel=1e-5)
    assert prog.objective_at(rep.info["v"], rep.info["w"]) == pytest.approx(rep.objective, rel=1e-6)


def test_perspective_with_zero_input_is_lp():
    """u_max = 0 forces w = 0; the optimum is the best vertex of the LP."""
    M0 = np.array([[-1.0, -1.0, -1.0], [-1.0, 0.0, 1.0]])
    d = np.array([3.0, 1.0, 2.0])
    m = np.array([1.0, 0.0])
    prog = PerspectiveProgram(d_lin=d, r=1.0, M0=np.vstack([M0, np.zeros((1, 3))]), Mg=np.zeros((3, 3)),
                              m=np.append(m, 0.0), colloc=np.eye(3), weights=np.ones(3), u_max=0.0,
                              rows=np.array([True, True, False]))
    rep = solve_perspective(prog, tol=TOL)
    # vertex enumeration of {v >= 0: v1+v2+v3 = 1, v1 = v3}
    best = np.inf
    for basis in itertools.combinations(range(3), 2):
        B = -M0[:, basis]
        if abs(np.linalg.det(B)) < 1e-12:
            continue
        vb = np.linalg.solve(B, m)
        if (vb >= -1e-12).all():
            v = np.zeros(3)
            v[list(basis)] = vb
            best = min(best, d @ v)
    assert rep.optimal and rep.objective == pytest.approx(best, abs=1e-6)
    assert np.allclose(rep.info["w"], 0, atol=1e-8)


@given(st.integers(0, 100_000))
def test_perspective_not_above_feasible_points(seed):
    r = np.random.default_rng(seed)
    K, Q = 4, 8
    M0 = -np.eye(K) + 0.2 * r.random((K, K))
    Mg = r.standard_normal((K, K))
    v0, w0 = r.uniform(0.2, 1.0, K), 0.5 * r.standard_normal(K)
    m = -(M0 @ v0 + Mg @ w0)
    prog = PerspectiveProgram(d_lin=r.random(K), r=1.0, M0=M0, Mg=Mg, m=m, colloc=r.random((Q, K)) + 0.05,
                              weights=np.ones(Q))
    rep = solve_perspective(prog, tol=TOL)
    assert rep.optimal
    assert rep.info["equality_residual"] <= 1e-6
    assert rep.objective <= prog.objective_at(v0, w0) + 1e-7


def test_perspective_validation():
    with pytest.raises(ValueError):
        PerspectiveProgram(d_lin=np.zeros(1), r=0.0, M0=np.eye(1), Mg=np.eye(1), m=np.ones(1),
                           colloc=np.eye(1), weights=np.ones(1))
    with pytest.raises(ValueError):
        PerspectiveProgram(d_lin=np.zeros(1), r=1.0, M0=np.eye(1), Mg=np.eye(1), m=np.ones(1))
    with pytest.raises(ValueError):
        PerspectiveProgram(d_lin=np.zeros(2), r=1.0, M0=np.eye(2), Mg=np.eye(2), m=np.ones(2),
                           D_quad=np.diag([1.0, -1.0]), form="kappa")


def test_feasibility_contracting_surrogate():
    K = 4
    rep = solve_feasibility(-np.eye(K), np.random.default_rng(0).standard_normal((K, K)), 0.5 / K)
    assert rep.optimal
    v, w = rep.info["v"], rep.info["w"]
    assert v.min() >= -1e-9 and v.sum() == pytest.approx(1.0)
    assert rep.info["margin"] >= 0.5 / K - 1e-8
    # the trivial point is feasible at eps = 1/K, so the optimal margin is at least that
    assert rep.info["tau"] >= 1.0 / K - 1e-7


def test_feasibility_infeasible_instance():
    rep = solve_feasibility(np.eye(3), np.zeros((3, 3)), 1e-3)
    assert rep.status == "infeasible"


def test_reported_residuals_recompute():
    rep = solve_perspective(_toy_perspective("pointwise"), tol=TOL)
    prog = _toy_perspective("pointwise").to_conic()
    again = prog.residuals(rep.x, rep.y, rep.z, rep.s)
    for k, val in again.items():
        assert val == pytest.approx(rep.info["kkt"][k], abs=10 * TOL)
    assert rep.primal_residual <= TOL and rep.dual_residual <= TOL


def test_determinism(rng):
    M = rng.standard_normal((6, 6))
    prob = QpProblem(H=M @ M.T, c=rng.standard_normal(6), lb=np.zeros(6), Aeq=np.ones((1, 6)), beq=[1.0])
    a, b = solve_qp(prob), solve_qp(prob)
    assert np.array_equal(a.x, b.x) and a.iterations == b.iterations


@given(st.integers(0, 100_000), st.integers(2, 6))
def test_row_stochastic_ls_matches_cvxpy(seed, K):
    r = np.random.default_rng(seed)
    Gh = r.standard_normal((K + 2, K))
    Ah = r.standard_normal((K + 2, K))
    rep = solve_row_stochastic_ls(Gh, Ah)
    X = cp.Variable((K, K))
    ref = cp.Problem(cp.Minimize(cp.sum_squares(Gh @ X - Ah)), [X >= 0, cp.sum(X, axis=1) == 1])
    ref.solve(solver=cp.CLARABEL)
    mine = np.linalg.norm(Gh @ rep.x - Ah) ** 2
    assert mine <= ref.value + 1e-6 * max(1.0, ref.value)
    assert rep.x.min() >= -1e-8 and np.allclose(rep.x.sum(axis=1), 1, atol=1e-6)
