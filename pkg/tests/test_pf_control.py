import json

import cvxpy as cp
import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import quad

from stochctl.basis import GaussianRBF
from stochctl.cli_bench import load_config
from stochctl.cli_bench.runner import build_basis, build_system, fit_operators, quadratic_cost
from stochctl.convex_kernel import PerspectiveProgram, QpProblem, solve_feasibility, solve_perspective, solve_qp
from stochctl.pf_control import (DensityPolicy, SocpSpec, SynthesisError, collocation_grid, default_delta,
                                 occupancy_correlation, occupancy_moments, project_density,
                                 propagated_mass, recover_control, sink_mask, solve_socp,
                                 solve_stabilization, state_constraint_row, uniform_density)


@pytest.fixture(scope="module")
def scalar():
    cfg = load_config("scalar-pf")
    system = build_system(cfg)
    basis = build_basis(cfg, system)
    ops = fit_operators(system, basis, cfg["data"], run_nsdmd=False)
    delta = default_delta(system.domain)
    colloc, weights = collocation_grid(system.domain, delta, 801)
    m = project_density(basis, uniform_density(system.domain, delta), colloc)
    spec = SocpSpec(q=quadratic_cost([1.0]), r=0.1, m=m, basis=basis, M0=ops.M0, M1=ops.Mg, delta=delta,
                    colloc=colloc, weights=weights)
    return dict(system=system, basis=basis, ops=ops, delta=delta, spec=spec, policy=solve_socp(spec))


def test_project_member_of_span():
    b = GaussianRBF.grid([[-1, 1]], [7])
    x = np.linspace(-1, 1, 301)[:, None]
    m = project_density(b, lambda x: b(x)[:, 3], x)
    assert np.allclose(m, np.eye(7)[3], atol=1e-8)


def test_project_uniform_density_heldout(rng):
    dom = [[-10.0, 10.0]]
    b = GaussianRBF.grid(dom, [101])
    h0 = uniform_density(dom, 0.0)
    m = project_density(b, h0, np.linspace(-10, 10, 2001)[:, None])
    x = rng.uniform(-10, 10, (5000, 1))
    assert np.linalg.norm(b(x) @ m - h0(x)) / np.linalg.norm(h0(x)) <= 0.05


@given(st.lists(st.floats(0, 5), min_size=5, max_size=5))
def test_project_nonnegative(heights):
    b = GaussianRBF.grid([[-1, 1]], [5])
    h = lambda x: np.maximum(b(x) @ (np.array(heights) - 1.0), 0.0) + 0.01
    m = project_density(b, h, np.linspace(-1, 1, 101)[:, None])
    assert (m >= 0).all()


def test_project_errors():
    b = GaussianRBF.grid([[-1, 1]], [5])
    x = np.linspace(-1, 1, 11)[:, None]
    with pytest.raises(ValueError):
        project_density(b, lambda x: np.zeros(len(x)), x)
    with pytest.raises(ValueError):
        project_density(b, lambda x: -np.ones(len(x)), x)


def test_recover_control_trivial_cases():
    b = GaussianRBF.grid([[-1, 1]], [5])
    v = np.array([0.1, 0.5, 1.0, 0.5, 0.1])
    x = np.linspace(-1, 1, 21)[:, None]
    assert np.array_equal(recover_control(DensityPolicy(b, v, np.zeros(5), 0.1), x), np.zeros(21))
    assert np.allclose(recover_control(DensityPolicy(b, v, v, 0.1), x), 1.0)


def test_clamp_counts_and_floor():
    b = GaussianRBF.grid([[-1, 1]], [5])
    pol = DensityPolicy(b, np.array([0, 0, 1.0, 0, 0]), np.array([0, 0, 1.0, 0, 0]), 0.1)
    assert pol.clamp_floor == pytest.approx(1e-6)
    u = pol(np.array([[5.0]]))  # far outside: density below the floor
    assert np.isfinite(u).all() and pol.clamp_count == 1
    with pytest.raises(ValueError):
        DensityPolicy(b, -np.ones(5), np.zeros(5), 0.1)


def test_policy_json_roundtrip(scalar):
    pol = scalar["policy"]
    again = DensityPolicy.from_dict(json.loads(pol.to_json()))
    x = np.linspace(-9, 9, 37)[:, None]
    assert np.array_equal(again(x), pol(x))


def test_scalar_socp_contract(scalar):
    pol = scalar["policy"]
    assert pol.report.status == "optimal"
    assert pol.v.min() >= 0
    assert pol.report.info["equality_residual"] <= 1e-6
    # control opposes the unstable cubic drift (and matches the analytic sign)
    u5 = pol(np.array([[5.0]]))[0]
    assert np.sign(u5) == -1 and np.sign(pol(np.array([[-5.0]]))[0]) == 1


def test_dominates_lqr_induced_pair(scalar):
    """The optimum is no worse than the density pair induced by u = -x/sqrt(r)."""
    spec = scalar["spec"]
    prog = spec.program()
    K = spec.basis.K
    P = prog.colloc
    k = -spec.colloc[:, 0] / np.sqrt(spec.r)
    # pair closest to rho_bar = k rho on the collocation grid, subject to the transport equality
    Dm = P * k[:, None]
    Mx = np.hstack([-Dm, P]) * np.sqrt(prog.weights)[:, None]
    rows = prog.rows
    qp = QpProblem(H=2 * Mx.T @ Mx + 1e-9 * np.eye(2 * K), c=np.zeros(2 * K),
                   Aeq=np.hstack([-spec.M0[rows], -spec.M1[rows]]), beq=spec.m[rows],
                   lb=np.r_[np.zeros(K), np.full(K, -np.inf)])
    ref = solve_qp(qp)
    assert ref.status in ("optimal", "inaccurate")
    v_ref, w_ref = ref.x[:K], ref.x[K:]
    assert np.abs(spec.M0[rows] @ v_ref + spec.M1[rows] @ w_ref + spec.m[rows]).max() < 1e-6
    assert scalar["policy"].report.objective <= prog.objective_at(np.maximum(v_ref, 0), w_ref) + 1e-6


def test_q_zero_three_basis_instance_matches_oracle():
    r = np.random.default_rng(3)
    K = 3
    M0 = -np.eye(K) + 0.3 * r.random((K, K))
    Mg = r.standard_normal((K, K))
    m = -(M0 @ np.ones(K) + Mg @ (0.2 * r.standard_normal(K)))
    P = r.random((10, K)) + 0.1
    wts = np.ones(10)
    prog = PerspectiveProgram(d_lin=np.zeros(K), r=1.0, M0=M0, Mg=Mg, m=m, colloc=P, weights=wts)
    rep = solve_perspective(prog)
    v, w = cp.Variable(K), cp.Variable(K)
    ref = cp.Problem(cp.Minimize(sum(cp.quad_over_lin(P[j] @ w, P[j] @ v) for j in range(10))),
                     [-(M0 @ v + Mg @ w) == m, v >= 0])
    ref.solve(solver=cp.CLARABEL)
    assert rep.objective == pytest.approx(ref.value, abs=1e-6)
    # pure transport (w = 0) would need -M0 v = m with v >= 0
    v_only = np.linalg.solve(-M0, m)
    expect_zero = (v_only >= 0).all()
    assert (rep.objective <= 1e-6) == expect_zero


def test_state_constraint_row():
    b = GaussianRBF.grid([[-2, 2]], [5], width=0.5)
    x = np.linspace(-2, 2, 4001)[:, None]
    assert np.array_equal(state_constraint_row(b, lambda x: np.zeros(len(x), bool), x), np.zeros(5))
    full = state_constraint_row(b, lambda x: np.ones(len(x), bool), x)
    for k, c in enumerate(b.centers[:, 0]):
        oracle = quad(lambda t: np.exp(-(t - c) ** 2 / (2 * 0.25)), -2, 2)[0]
        assert full[k] == pytest.approx(oracle, rel=2e-3)
    with pytest.raises(ValueError):
        state_constraint_row(b, lambda x: np.ones(len(x), bool), np.zeros((0, 1)))


def test_forbidden_region_excludes_mass(scalar):
    spec = scalar["spec"]
    forb = lambda x: np.atleast_2d(x)[:, 0] > 8.0
    s2 = SocpSpec(q=spec.q, r=spec.r, m=np.where(spec.basis.centers[:, 0] > 7.0, 0.0, spec.m), basis=spec.basis,
                  M0=spec.M0, M1=spec.M1, delta=spec.delta, colloc=spec.colloc, weights=spec.weights,
                  forbidden=forb)
    pol = solve_socp(s2)
    c = s2.constraint_row()
    assert c @ pol.v <= 1e-6


def test_socp_validation(scalar):
    spec = scalar["spec"]
    with pytest.raises(ValueError):
        SocpSpec(q=spec.q, r=0.0, m=spec.m, basis=spec.basis, M0=spec.M0, M1=spec.M1, delta=0.5)
    with pytest.raises(ValueError):
        SocpSpec(q=spec.q, r=1.0, m=-spec.m, basis=spec.basis, M0=spec.M0, M1=spec.M1, delta=0.5)


def test_socp_infeasible_raises_with_diagnosis():
    b = GaussianRBF.grid([[-1, 1]], [3])
    spec = SocpSpec(q=lambda x: x[:, 0] ** 2, r=1.0, m=np.ones(3), basis=b, M0=np.eye(3), M1=np.zeros((3, 3)),
                    delta=0.01, colloc=np.linspace(-1, 1, 11)[:, None], weights=np.ones(11))
    with pytest.raises(SynthesisError, match="stabilizable"):
        solve_socp(spec)


def test_stabilization_contract_and_errors():
    b = GaussianRBF.grid([[-1, 1]], [5])
    pol = solve_stabilization(-np.eye(5), np.zeros((5, 5)), 0.05, b, 0.1)
    assert pol.v.min() >= -1e-8 and pol.report.info["margin"] >= 0.05 - 1e-8
    with pytest.raises(SynthesisError, match="infeasible"):
        solve_stabilization(np.eye(5), np.zeros((5, 5)), 0.05, b, 0.1)


def test_stable_system_needs_no_input():
    cfg = load_config("stable2d-kpi")
    system = build_system(cfg)
    b = GaussianRBF.grid(system.domain, [9, 9])
    ops = fit_operators(system, b, {"N": 5000, "R": 20, "dt": 0.01, "seed": 0}, run_nsdmd=False)
    rep = solve_feasibility(ops.M0, ops.Mg, 1e-3, rows=~sink_mask(b, 0.1), u_max=0.0)
    assert rep.optimal and np.array_equal(rep.info["w"], np.zeros(b.K))
    assert rep.info["margin"] >= 1e-3


def test_sink_and_collocation():
    b = GaussianRBF.grid([[-1, 1], [-1, 1]], [4, 4])  # no center at the origin
    assert sink_mask(b, 0.05).sum() == 4
    pts, w = collocation_grid([[-1, 1], [-1, 1]], 0.2, 10)
    assert (np.linalg.norm(pts, axis=1) >= 0.2).all()
    assert w.sum() == pytest.approx(4.0 * len(pts) / 100)
    h = uniform_density([[-1, 1]], 0.1)
    assert h(np.array([[0.05], [0.5]])).tolist() == [0.0, pytest.approx(1 / 1.8)]


def test_occupancy_moments_weak_form():
    """A trajectory cloud drawn from rho itself gives visits proportional to the prediction."""
    b = GaussianRBF.grid([[-2, 2]], [9])
    v = np.array([0, 0.2, 0.5, 1.0, 0, 1.0, 0.5, 0.2, 0])
    pol = DensityPolicy(b, v, np.zeros(9), 0.1)
    grid = np.linspace(-2, 2, 4001)
    dens = pol.density(grid[:, None])
    samples = np.random.default_rng(0).choice(grid, size=200_000, p=dens / dens.sum())[:, None]
    colloc, wts = collocation_grid([[-2, 2]], 0.1, 801)
    visits, predicted = occupancy_moments(samples, pol, 0.1, colloc, wts)
    assert np.corrcoef(visits, predicted)[0, 1] > 0.99
    assert occupancy_correlation(samples, pol, 0.1, colloc, wts) > 0.99


def test_propagated_mass():
    P = np.diag([1.0, 0.5, 0.25])
    out = propagated_mass(P, np.ones(3), np.array([False, True, True]), 3)
    assert np.allclose(out, [2.0, 0.75, 0.3125, 0.140625])
