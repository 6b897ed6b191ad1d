"""Policy iteration in value space with data-driven Koopman operators.

Evaluation:  V_k = Phi'W_k with W_k = dt * sum_{l<=M} Kc^l b  (Kc the
closed-loop Koopman matrix, b the running cost in the dictionary).
Improvement: k_{k+1}(x) = -(1/2r) Phi(x)' Lg W_k with Lg the Koopman
generator of the control vector field.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .basis import basis_from_spec
from .operator_approx import edmd_fit, stream_moments
from .sde_sim import SdeSystem, sample_states, simulate_batch

log = logging.getLogger(__name__)


class ContractionError(RuntimeError):
    """Closed-loop Koopman matrix is not a contraction on the value block."""


def constant_index(basis) -> int | None:
    exps = getattr(basis, "exponents", None)
    if exps is None:
        return None
    hits = np.where((exps == 0).all(axis=1))[0]
    return int(hits[0]) if len(hits) else None


@dataclass
class ValueModel:
    W: np.ndarray
    basis: object = None
    iteration: int = 0
    spectral_radius: float = float("nan")
    terms: int = 0

    def __call__(self, x) -> np.ndarray:
        return self.basis(x) @ self.W

    def coefficients(self) -> dict:
        return dict(zip(self.basis.labels(), self.W.tolist()))


@dataclass
class KoopmanPolicy:
    """u(x) = -(1/2r) Phi(x)' c with c = Lg W."""

    basis: object
    c: np.ndarray
    r: float

    def __call__(self, x) -> np.ndarray:
        return -0.5 / self.r * (self.basis(x) @ self.c)

    def to_dict(self) -> dict:
        return {"kind": "koopman", "basis": self.basis.spec(), "c": self.c.tolist(), "r": self.r}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d) -> "KoopmanPolicy":
        return cls(basis_from_spec(d["basis"]), np.array(d["c"]), d["r"])


def fit_cost_coeffs(basis, q: Callable, policy: Callable, r: float, samples) -> np.ndarray:
    """Least-squares b with Phi'b ~ q + r k^2 on samples (SVD-based pseudo-inverse)."""
    samples = np.atleast_2d(np.asarray(samples, float))
    if samples.shape[0] < basis.K:
        raise ValueError(f"need at least {basis.K} samples, got {samples.shape[0]}")
    Phi = basis(samples)
    target = np.asarray(q(samples), float).reshape(-1) + r * np.asarray(policy(samples), float).reshape(-1) ** 2
    b, _, rank, _ = np.linalg.lstsq(Phi, target, rcond=None)
    if rank < basis.K:
        raise np.linalg.LinAlgError(f"dictionary matrix is rank deficient ({rank} < {basis.K}) on the samples")
    return b


def default_terms(Kc) -> int:
    """15 times the lifted dimension."""
    return 15 * np.asarray(Kc).shape[0]


def neumann_value(Kc, b, dt: float, M: int) -> np.ndarray:
    """dt * (I + Kc + ... + Kc^M) b by repeated multiply-accumulate (Horner)."""
    W = np.array(b, float)
    for _ in range(M):
        W = b + Kc @ W
    return dt * W


def policy_evaluation(Kc, b, dt: float, M: int | None = None, basis=None, iteration: int = 0,
                      check: bool = True) -> ValueModel:
    """Truncated Neumann series for (I - Kc) W = dt b.

    If the dictionary contains the constant function, Kc maps it to itself
    (eigenvalue 1), so the series is summed on the non-constant block only
    and the constant coefficient is then pinned so that V(equilibrium) = 0.
    """
    Kc = np.atleast_2d(np.asarray(Kc, float))
    b = np.asarray(b, float).reshape(-1)
    M = default_terms(Kc) if M is None else int(M)
    c0 = constant_index(basis) if basis is not None else None
    idx = np.arange(len(b)) if c0 is None else np.delete(np.arange(len(b)), c0)
    Kb = Kc[np.ix_(idx, idx)]
    rho = float(np.abs(np.linalg.eigvals(Kb)).max()) if len(idx) else 0.0
    if check and rho >= 1:
        raise ContractionError(f"policy not contracting in lifted space: spectral radius {rho:.6f} >= 1")
    W = np.zeros_like(b)
    W[idx] = neumann_value(Kb, b[idx], dt, M)
    if c0 is not None:
        eq = np.zeros((1, basis.dim))
        W[c0] = -float(basis(eq)[0, idx] @ W[idx])
    return ValueModel(W, basis, iteration, rho, M)


def policy_improvement(value: ValueModel, Lg, r: float) -> KoopmanPolicy:
    """Lg is the control-field Koopman generator (L1 - L0)."""
    Lg = np.asarray(Lg, float)
    if Lg.shape != (len(value.W), len(value.W)):
        raise ValueError("generator and value coefficients disagree in size")
    return KoopmanPolicy(value.basis, Lg @ value.W, r)


def evaluation_residual(Kc, W, b, dt: float) -> float:
    """||(I - Kc) W / dt - b||."""
    Kc = np.asarray(Kc)
    return float(np.linalg.norm((W - Kc @ W) / dt - b))


def neumann_remainder_bound(Kc, b, M: int) -> float:
    """Bound on ||(I - Kc) W_M / dt - b|| = ||Kc^{M+1} b|| via the spectral norm."""
    nrm = float(np.linalg.norm(Kc, 2))
    return float(np.linalg.norm(b)) * nrm ** (M + 1)


# ---------------------------------------------------------------------------
# the loop


@dataclass
class KpiConfig:
    N: int = 3000
    R: int = 50
    dt: float = 0.01
    seed: int = 0
    amplitude: float = 1.0
    terms: int | None = None          # Neumann truncation M; None -> 15 * K
    horizon: float | None = None      # alternatively M = horizon / dt
    cost_samples: int = 2000
    mc_trajectories: int = 100
    mc_horizon: float = 10.0
    mc_seed: int = 12345
    mc_box: list | None = None        # start box for the cost estimate (defaults to the domain)
    incremental: bool = False         # identify only g*k from L0/Lg instead of refitting
    reuse_data_seed: bool = True      # common random numbers across iterations

    def truncation(self, K: int) -> int:
        if self.terms is not None:
            return int(self.terms)
        if self.horizon is not None:
            return int(round(self.horizon / self.dt))
        return 15 * K


@dataclass
class KpiRecord:
    iteration: int
    W: np.ndarray
    spectral_radius: float
    cost: float
    cost_se: float


@dataclass
class KpiState:
    policy: Callable
    value: ValueModel | None
    L0: np.ndarray
    L1: np.ndarray
    history: list = field(default_factory=list)

    @property
    def Lg(self) -> np.ndarray:
        return self.L1 - self.L0


def mc_cost(system: SdeSystem, policy: Callable, q: Callable, r: float, cfg: KpiConfig,
            dt: float | None = None):
    """Mean and standard error of the integrated running cost from random starts."""
    dt = cfg.dt if dt is None else dt
    box = np.asarray(cfg.mc_box if cfg.mc_box is not None else system.domain, float)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.mc_seed))
    x0 = box[:, 0] + (box[:, 1] - box[:, 0]) * rng.random((cfg.mc_trajectories, system.dim))
    steps = int(round(cfg.mc_horizon / dt))
    tr = simulate_batch(system, x0, policy, dt, steps, seed=cfg.mc_seed + 1)
    X = tr.x[:, :-1]
    run = q(X.reshape(-1, system.dim)).reshape(X.shape[:2]) + r * tr.u[:, :-1] ** 2
    J = dt * run.sum(axis=1)
    J[tr.diverged] = np.inf
    if not np.isfinite(J).all():
        return float("inf"), float("inf")
    return float(J.mean()), float(J.std(ddof=1) / np.sqrt(len(J)))


def identify_control_generators(system: SdeSystem, basis, cfg: KpiConfig):
    """Koopman generators of the zero-input and step-input systems (L0, L1)."""
    G0, A0 = stream_moments(system, basis, cfg.N, cfg.R, cfg.dt, "zero", cfg.seed)
    G1, A1 = stream_moments(system, basis, cfg.N, cfg.R, cfg.dt, "step", cfg.seed, amplitude=cfg.amplitude)
    K0 = edmd_fit(G0, A0, dt=cfg.dt).matrix
    K1 = edmd_fit(G1, A1, dt=cfg.dt).matrix
    I = np.eye(basis.K)
    L0 = (K0 - I) / cfg.dt
    L1 = L0 + (K1 - K0) / (cfg.dt * cfg.amplitude)  # unit-amplitude step generator
    return L0, L1


def run_kpi(system: SdeSystem, basis, q: Callable, r: float, k0: Callable, iterations: int,
            cfg: KpiConfig | None = None, callback: Callable | None = None) -> KpiState:
    cfg = cfg or KpiConfig()
    L0, L1 = identify_control_generators(system, basis, cfg)
    state = KpiState(policy=k0, value=None, L0=L0, L1=L1)
    if iterations <= 0:
        return state
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    lo, hi = system.domain[:, 0], system.domain[:, 1]
    cost_pts = lo + (hi - lo) * rng.random((cfg.cost_samples, system.dim))
    M = cfg.truncation(basis.K)
    I = np.eye(basis.K)
    policy = k0
    for it in range(iterations):
        seed = cfg.seed if cfg.reuse_data_seed else cfg.seed + 1 + it
        if cfg.incremental:
            # closed-loop generator by linearity in the input: L0 + k (L1 - L0)
            Gk = _multiplier_matrix(system, basis, policy, cfg, seed)
            Kc = I + cfg.dt * (L0 + Gk @ (L1 - L0))
        else:
            G, A = stream_moments(system, basis, cfg.N, cfg.R, cfg.dt, "feedback", seed, policy=policy)
            Kc = edmd_fit(G, A, dt=cfg.dt).matrix
        b = fit_cost_coeffs(basis, q, policy, r, cost_pts)
        try:
            value = policy_evaluation(Kc, b, cfg.dt, M, basis=basis, iteration=it + 1)
        except ContractionError as exc:
            raise ContractionError(f"iteration {it + 1}: {exc}") from exc
        cost, se = mc_cost(system, policy, q, r, cfg)
        state.history.append(KpiRecord(it + 1, value.W.copy(), value.spectral_radius, cost, se))
        policy = policy_improvement(value, L1 - L0, r)
        state.value, state.policy = value, policy
        log.info("kpi iteration %d: rho(Kc)=%.5f cost=%.4g+-%.2g", it + 1, value.spectral_radius, cost, se)
        if callback is not None:
            callback(state)
    return state


def _multiplier_matrix(system, basis, policy, cfg, seed):
    """Galerkin matrix of multiplication by k(x): G^{-1} E[Phi k Phi']."""
    x = sample_states(system, cfg.N, seed)
    P = basis(x)
    k = np.asarray(policy(x), float).reshape(-1)
    G = P.T @ P / len(x)
    return np.linalg.solve(G + 1e-10 * np.trace(G) / basis.K * np.eye(basis.K), (P * k[:, None]).T @ P / len(x))
