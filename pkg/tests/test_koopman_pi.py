import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import make_system
from stochctl.basis import MonomialBasis
from stochctl.cli_bench import load_config
from stochctl.cli_bench.runner import build_system
from stochctl.koopman_pi import (ContractionError, KoopmanPolicy, KpiConfig, ValueModel, edmd_fit,
                                 evaluation_residual, fit_cost_coeffs, identify_control_generators,
                                 neumann_remainder_bound, neumann_value, policy_evaluation,
                                 policy_improvement, run_kpi, stream_moments)

X1 = np.linspace(-1, 1, 41)


def _grid2():
    a, b = np.meshgrid(X1, X1)
    return np.c_[a.ravel(), b.ravel()]


def _random_contraction(r, K, rho_max=0.9):
    A = r.standard_normal((K, K))
    return rho_max * r.uniform(0.1, 1.0) * A / np.linalg.norm(A, 2)


def test_cost_coeffs_exact_and_zero():
    b = MonomialBasis.total_degree(1, 3)
    x = np.linspace(-1, 1, 30)[:, None]
    c = fit_cost_coeffs(b, lambda x: x[:, 0] ** 2, lambda x: np.zeros(len(x)), 1.0, x)
    assert np.allclose(c, [0, 0, 1, 0], atol=1e-10)
    z = fit_cost_coeffs(b, lambda x: np.zeros(len(x)), lambda x: np.zeros(len(x)), 1.0, x)
    assert np.allclose(z, 0)
    two = fit_cost_coeffs(MonomialBasis([[2]]), lambda x: x[:, 0] ** 2, lambda x: x[:, 0], 1.0, x)
    assert two[0] == pytest.approx(2.0)


def test_cost_coeffs_errors():
    b = MonomialBasis.total_degree(1, 3)
    with pytest.raises(ValueError):
        fit_cost_coeffs(b, lambda x: x[:, 0], lambda x: 0 * x[:, 0], 1.0, np.ones((2, 1)))
    with pytest.raises(np.linalg.LinAlgError):
        fit_cost_coeffs(b, lambda x: x[:, 0], lambda x: 0 * x[:, 0], 1.0, np.ones((10, 1)))


def test_neumann_scalar_geometric():
    W = policy_evaluation(np.array([[0.5]]), np.array([1.0]), 0.01, M=10).W
    assert W[0] == pytest.approx(0.01 * (1 - 0.5 ** 11) / 0.5, rel=1e-14)
    assert W[0] == pytest.approx(0.0199902, abs=1e-7)
    assert np.array_equal(policy_evaluation(np.eye(2) * 0.3, np.zeros(2), 0.01).W, np.zeros(2))


def test_neumann_converges_to_direct_solve(rng):
    Kc = _random_contraction(rng, 6)
    b = rng.standard_normal(6)
    direct = 0.01 * np.linalg.solve(np.eye(6) - Kc, b)
    W = policy_evaluation(Kc, b, 0.01, M=500).W
    assert np.allclose(W, direct, rtol=1e-10, atol=1e-14)


@given(st.integers(0, 100_000), st.integers(1, 8))
def test_neumann_within_remainder_bound(seed, K):
    r = np.random.default_rng(seed)
    Kc = _random_contraction(r, K)
    b = r.standard_normal(K)
    dt = 0.01
    M = 15 * K
    W = policy_evaluation(Kc, b, dt, M).W
    direct = dt * np.linalg.solve(np.eye(K) - Kc, b)
    nrm = np.linalg.norm(Kc, 2)
    assert np.linalg.norm(W - direct) <= dt * np.linalg.norm(b) * nrm ** (M + 1) / (1 - nrm) + 1e-14
    # residual of (I - Kc) W / dt = b is exactly Kc^{M+1} b
    res = evaluation_residual(Kc, W, b, dt)
    assert res <= neumann_remainder_bound(Kc, b, M) + 1e-12
    assert res == pytest.approx(np.linalg.norm(np.linalg.matrix_power(Kc, M + 1) @ b), abs=1e-12)


def test_horner_matches_explicit_powers(rng):
    Kc = _random_contraction(rng, 4)
    b = rng.standard_normal(4)
    explicit = 0.1 * sum(np.linalg.matrix_power(Kc, l) @ b for l in range(8))
    assert np.allclose(neumann_value(Kc, b, 0.1, 7), explicit)


def test_contraction_check():
    with pytest.raises(ContractionError, match="policy not contracting in lifted space"):
        policy_evaluation(np.array([[1.0, 0.0], [0.0, 0.5]]), np.ones(2), 0.01)


def test_constant_term_is_pinned():
    b = MonomialBasis.total_degree(1, 2)   # 1, x, x^2
    Kc = np.array([[1.0, 0.0, 0.0], [0.0, 0.9, 0.0], [0.01, 0.0, 0.8]])  # constant maps to itself
    val = policy_evaluation(Kc, np.array([0.3, 0.0, 1.0]), 0.01, M=200, basis=b)
    assert val(np.zeros((1, 1)))[0] == pytest.approx(0.0, abs=1e-15)
    assert val.spectral_radius == pytest.approx(0.9)


def test_improvement_linear_and_zero():
    b = MonomialBasis.total_degree(2, 2, 1)
    Lg = np.random.default_rng(0).standard_normal((b.K, b.K))
    x = _grid2()
    zero = policy_improvement(ValueModel(np.zeros(b.K), b), Lg, 1.0)
    assert np.array_equal(zero(x), np.zeros(len(x)))
    W1, W2 = np.random.default_rng(1).standard_normal((2, b.K))
    k = lambda W: policy_improvement(ValueModel(W, b), Lg, 0.5)(x)
    assert np.allclose(k(W1 + W2), k(W1) + k(W2))
    with pytest.raises(ValueError):
        policy_improvement(ValueModel(np.zeros(b.K), b), np.eye(2), 1.0)


@pytest.fixture(scope="module")
def stable2d():
    cfg = load_config("stable2d-kpi")
    system = build_system(cfg).with_sigma(0.01)
    basis = MonomialBasis.total_degree(2, 3, 1, domain=system.domain)
    kc = KpiConfig(N=3000, R=20, dt=0.01, seed=0, horizon=20.0)
    L0, L1 = identify_control_generators(system, basis, kc)
    W_star = np.zeros(basis.K)
    W_star[basis.index_of([2, 0])] = 0.5
    W_star[basis.index_of([0, 2])] = 1.0
    return dict(system=system, basis=basis, cfg=kc, L0=L0, L1=L1, W_star=W_star)


def test_exact_value_improves_to_known_optimum(stable2d):
    s = stable2d
    pol = policy_improvement(ValueModel(s["W_star"], s["basis"]), s["L1"] - s["L0"], 1.0)
    x = _grid2()
    assert np.abs(pol(x) + x[:, 0] * x[:, 1]).max() < 0.05


def test_known_optimum_is_approximate_fixpoint(stable2d):
    s = stable2d
    basis, kc = s["basis"], s["cfg"]
    pol = policy_improvement(ValueModel(s["W_star"], basis), s["L1"] - s["L0"], 1.0)
    G, A = stream_moments(s["system"], basis, kc.N, kc.R, kc.dt, "feedback", kc.seed, policy=pol)
    Kc = edmd_fit(G, A, dt=kc.dt).matrix
    q = lambda x: (x ** 2).sum(axis=1)
    samples = np.random.default_rng(7).uniform(-1, 1, (2000, 2))
    b = fit_cost_coeffs(basis, q, pol, 1.0, samples)
    W = policy_evaluation(Kc, b, kc.dt, kc.truncation(basis.K), basis=basis).W
    assert np.abs(W - s["W_star"]).max() < 0.1


def test_run_kpi_zero_iterations_returns_k0():
    system = make_system([[[-1.0, [1]]]], [[[1.0, [0]]]], [[[1.0, [1]]]], 0.1, [[-1.0, 1.0]])
    k0 = lambda x: np.zeros(len(x))
    st_ = run_kpi(system, MonomialBasis.total_degree(1, 2, 1), lambda x: x[:, 0] ** 2, 1.0, k0, 0,
                  KpiConfig(N=200, R=5))
    assert st_.policy is k0 and st_.history == []


def test_run_kpi_history_and_linear_optimum():
    """dx = (-x + u) dt: the quadratic value and linear policy come out of two iterations."""
    system = make_system([[[-1.0, [1]]]], [[[1.0, [0]]]], [[[1.0, [1]]]], 0.05, [[-1.0, 1.0]])
    basis = MonomialBasis.total_degree(1, 2, 1, domain=[[-1.0, 1.0]])
    cfg = KpiConfig(N=1000, R=10, dt=0.01, horizon=10.0, mc_trajectories=20, mc_horizon=5.0)
    st_ = run_kpi(system, basis, lambda x: x[:, 0] ** 2, 1.0, lambda x: np.zeros(len(x)), 3, cfg)
    assert [h.iteration for h in st_.history] == [1, 2, 3]
    # Riccati for dx = -x + u, q = x^2, r = 1:  p = sqrt(2) - 1, u = -p x
    p = np.sqrt(2) - 1
    assert st_.value.W[basis.index_of([2])] == pytest.approx(p, abs=0.03)
    x = np.linspace(-1, 1, 21)[:, None]
    assert np.allclose(st_.policy(x), -p * x[:, 0], atol=0.05)


def test_policy_json_roundtrip():
    b = MonomialBasis.total_degree(2, 2, 1)
    pol = KoopmanPolicy(b, np.arange(b.K, dtype=float), 0.5)
    again = KoopmanPolicy.from_dict(json.loads(pol.to_json()))
    assert np.array_equal(again(_grid2()), pol(_grid2()))
