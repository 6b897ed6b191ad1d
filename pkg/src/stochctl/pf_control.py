"""Density-space synthesis: optimal control SOCP, stabilization LP and the
feedback law u = Psi'w / Psi'v recovered from the density pair (v, w)."""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import nnls

from .basis import basis_from_spec, box_volume, cost_projection_d
from .convex_kernel import PerspectiveProgram, SolveReport, solve_feasibility, solve_perspective
from .sde_sim import SdeSystem, simulate_batch

CLAMP_RATIO = 1e-6
SUPPORT_TOL = 1e-6


class SynthesisError(RuntimeError):
    """Raised when the density program has no acceptable solution."""


def default_delta(domain) -> float:
    """Radius of the excluded ball: 5% of the smallest domain half-width."""
    domain = np.asarray(domain, float)
    return 0.05 * float(np.min(domain[:, 1] - domain[:, 0]) / 2)


def sink_mask(basis, delta: float, equilibrium=None) -> np.ndarray:
    """Centers treated as the absorbing sink: those within delta/2 of the
    equilibrium, or the nearest ones when no center lies that close."""
    eq = np.zeros(basis.dim) if equilibrium is None else np.asarray(equilibrium, float)
    dist = np.linalg.norm(basis.centers - eq, axis=1)
    return dist < max(0.5 * delta, dist.min() + 1e-9)


def collocation_grid(domain, delta: float, counts, equilibrium=None):
    """Midpoint-rule nodes and weights over the box minus the ball B_delta."""
    domain = np.asarray(domain, float)
    counts = np.broadcast_to(np.asarray(counts, int), (domain.shape[0],))
    axes = []
    for (lo, hi), n in zip(domain, counts):
        h = (hi - lo) / n
        axes.append(lo + h * (np.arange(n) + 0.5))
    pts = np.array(list(itertools.product(*axes)))
    eq = np.zeros(domain.shape[0]) if equilibrium is None else np.asarray(equilibrium, float)
    keep = np.linalg.norm(pts - eq, axis=1) >= delta
    cell = box_volume(domain) / np.prod(counts)
    return pts[keep], np.full(int(keep.sum()), cell)


def uniform_density(domain, delta: float, equilibrium=None) -> Callable:
    """Uniform probability density over the box minus B_delta."""
    domain = np.asarray(domain, float)
    n = domain.shape[0]
    eq = np.zeros(n) if equilibrium is None else np.asarray(equilibrium, float)
    ball = math.pi ** (n / 2) / math.gamma(n / 2 + 1) * delta ** n
    level = 1.0 / (box_volume(domain) - ball)

    def h0(x):
        x = np.atleast_2d(x)
        return np.where(np.linalg.norm(x - eq, axis=1) >= delta, level, 0.0)

    return h0


def project_density(basis, h0: Callable, samples) -> np.ndarray:
    """Nonnegative least-squares coefficients m with Psi'm ~ h0 on samples."""
    samples = np.atleast_2d(np.asarray(samples, float))
    target = np.asarray(h0(samples), float).reshape(-1)
    if (target < 0).any():
        raise ValueError("h0 must be nonnegative")
    if not target.any():
        raise ValueError("h0 vanishes on every sample")
    m, _ = nnls(basis(samples), target)
    return m


def state_constraint_row(basis, region: Callable, samples, domain=None) -> np.ndarray:
    """Monte Carlo estimate of the integral of 1_R(x) Psi(x) over the box."""
    samples = np.atleast_2d(np.asarray(samples, float))
    if samples.size == 0:
        raise ValueError("state_constraint_row needs samples")
    inside = np.asarray(region(samples), bool).reshape(-1)
    domain = basis.domain if domain is None else domain
    vol = 1.0 if domain is None else box_volume(domain)
    if not inside.any():
        return np.zeros(basis.K)
    return vol * basis(samples[inside]).sum(axis=0) / samples.shape[0]


# ---------------------------------------------------------------------------
# policy


@dataclass
class DensityPolicy:
    """Feedback u(x) = Psi(x)'w / max(Psi(x)'v, clamp_floor)."""

    basis: object
    v: np.ndarray
    w: np.ndarray
    delta: float
    clamp_floor: float | None = None
    equilibrium: np.ndarray | None = None
    report: SolveReport | None = field(default=None, repr=False, compare=False)
    clamp_count: int = field(default=0, compare=False)

    def __post_init__(self):
        self.v = np.asarray(self.v, float)
        self.w = np.asarray(self.w, float)
        if self.v.min() < -1e-8:
            raise ValueError("density coefficients must be nonnegative")
        self.v = np.maximum(self.v, 0.0)
        if self.equilibrium is None:
            self.equilibrium = np.zeros(self.basis.dim)
        if self.clamp_floor is None:
            peak = float(self.density(self.basis.centers).max()) if hasattr(self.basis, "centers") else 0.0
            self.clamp_floor = max(CLAMP_RATIO * peak, np.finfo(float).tiny)

    def density(self, x) -> np.ndarray:
        return self.basis(x) @ self.v

    def control_density(self, x) -> np.ndarray:
        return self.basis(x) @ self.w

    def __call__(self, x) -> np.ndarray:
        P = self.basis(x)
        rho = P @ self.v
        low = rho < self.clamp_floor
        self.clamp_count += int(low.sum())
        return (P @ self.w) / np.where(low, self.clamp_floor, rho)

    def to_dict(self) -> dict:
        return {"kind": "density", "basis": self.basis.spec(), "basis_fingerprint": self.basis.fingerprint(),
                "v": self.v.tolist(), "w": self.w.tolist(), "delta": self.delta,
                "clamp_floor": self.clamp_floor, "equilibrium": np.asarray(self.equilibrium).tolist()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "DensityPolicy":
        basis = basis_from_spec(d["basis"])
        if basis.fingerprint() != d.get("basis_fingerprint", basis.fingerprint()):
            raise ValueError("basis fingerprint mismatch")
        return cls(basis, np.array(d["v"]), np.array(d["w"]), d["delta"], d["clamp_floor"],
                   np.array(d["equilibrium"]))


def recover_control(policy: DensityPolicy, x) -> np.ndarray:
    return policy(x)


# ---------------------------------------------------------------------------
# optimal control SOCP


@dataclass
class SocpSpec:
    """Data of the density-space optimal control program.

    ``M0`` is the P-F generator of the drift and ``M1`` the generator of the
    control vector field (extracted by linearity), both in ``basis``.
    """

    q: Callable
    r: float
    m: np.ndarray
    basis: object
    M0: np.ndarray
    M1: np.ndarray
    delta: float
    u_max: float | None = None
    forbidden: Callable | None = None
    forbidden_samples: np.ndarray | None = None
    colloc: np.ndarray | None = None
    weights: np.ndarray | None = None
    equilibrium: np.ndarray | None = None
    form: str = "pointwise"
    weight_quadratic_by_r: bool = True

    def __post_init__(self):
        if self.r <= 0:
            raise ValueError("control weight r must be positive")
        self.m = np.asarray(self.m, float)
        if self.m.min() < 0:
            raise ValueError("initial density coefficients must be nonnegative")
        K = self.basis.K
        if self.M0.shape != (K, K) or self.M1.shape != (K, K) or self.m.shape != (K,):
            raise ValueError("generators, m and basis disagree in size")
        if self.equilibrium is None:
            self.equilibrium = np.zeros(self.basis.dim)
        if self.colloc is None:
            counts = {1: 801, 2: 61, 3: 21}.get(self.basis.dim, 11)
            self.colloc, self.weights = collocation_grid(self.basis.domain, self.delta, counts, self.equilibrium)

    def rows(self) -> np.ndarray:
        rows = ~sink_mask(self.basis, self.delta, self.equilibrium)
        if self.forbidden is not None:
            # basis functions forced to zero density carry no balance equation
            rows &= ~np.asarray(self.forbidden(self.basis.centers), bool)
            rows &= self.constraint_row() == 0
        return rows

    def constraint_row(self) -> np.ndarray | None:
        if self.forbidden is None:
            return None
        samples = self.colloc if self.forbidden_samples is None else self.forbidden_samples
        c = state_constraint_row(self.basis, self.forbidden, samples)
        # Gaussian tails make every entry positive; only basis functions with
        # non-negligible mass in the region are excluded.
        return np.where(c >= SUPPORT_TOL * max(c.max(), 1e-300), c, 0.0)

    def program(self) -> PerspectiveProgram:
        d = cost_projection_d(self.basis, self.q, self.colloc, self.weights)
        r = self.r if self.weight_quadratic_by_r else 1.0
        D = None
        if self.form == "kappa":
            P = self.basis(self.colloc)
            D = P.T @ (self.weights[:, None] * P)
        return PerspectiveProgram(d_lin=d, r=r, M0=self.M0, Mg=self.M1, m=self.m,
                                  colloc=self.basis(self.colloc), weights=self.weights, D_quad=D,
                                  s=1.0, rows=self.rows(), u_max=self.u_max, c_R=self.constraint_row(),
                                  form=self.form)


def solve_socp(spec: SocpSpec, tol: float = 1e-8) -> DensityPolicy:
    prog = spec.program()
    rep = solve_perspective(prog, tol=tol)
    if rep.status not in ("optimal", "inaccurate"):
        raise SynthesisError(
            f"density program {rep.status}: the transport equality may have no nonnegative solution, "
            "i.e. the system may not be stabilizable in this basis (try more data, a finer basis or "
            "a larger input bound)")
    pol = DensityPolicy(spec.basis, rep.info["v"], rep.info["w"], spec.delta, equilibrium=spec.equilibrium,
                        report=rep)
    return pol


# ---------------------------------------------------------------------------
# stabilization


def solve_stabilization(M0, M1, eps: float, basis, delta: float, u_max: float | None = None,
                        equilibrium=None, rows=None, tol: float = 1e-8) -> DensityPolicy:
    """Feasibility problem -(M0 v + M1 w) >= eps off the sink, v >= 0, 1'v = 1."""
    if rows is None:
        rows = ~sink_mask(basis, delta, equilibrium)
    rep = solve_feasibility(M0, M1, eps, rows=rows, u_max=u_max, tol=tol)
    if rep.status == "infeasible":
        raise SynthesisError(f"stabilization infeasible at margin {eps:g} "
                             f"(best margin {rep.info['margin']:.3g})")
    if rep.status not in ("optimal", "inaccurate"):
        raise SynthesisError(f"stabilization LP ended with status {rep.status}")
    return DensityPolicy(basis, rep.info["v"], rep.info["w"], delta, equilibrium=equilibrium, report=rep)


# ---------------------------------------------------------------------------
# closed-loop diagnostics


def reach_fraction(system: SdeSystem, policy, x0, horizon: float, dt: float, delta: float,
                   seed: int = 0):
    """Fraction of closed-loop trajectories that enter B_delta before ``horizon``."""
    steps = int(round(horizon / dt))
    tr = simulate_batch(system, x0, policy, dt, steps, seed)
    hit = np.isfinite(tr.first_entry(delta, system.equilibrium))
    return float(hit.mean()), tr


def occupancy_moments(traj_x, policy: DensityPolicy, delta: float, colloc, weights, equilibrium=None):
    """Weak-form occupancy check with the basis functions as test functions.

    Returns (visits, predicted): visits_k sums psi_k over all trajectory
    states outside B_delta; predicted_k is the quadrature of psi_k * rho
    over the box minus B_delta.  Both estimate the time-integrated
    density tested against psi_k, up to a common scale.
    """
    basis = policy.basis
    eq = np.zeros(basis.dim) if equilibrium is None else np.asarray(equilibrium)
    X = np.asarray(traj_x).reshape(-1, basis.dim)
    X = X[np.isfinite(X).all(axis=1) & (np.linalg.norm(X - eq, axis=1) >= delta)]
    visits = np.zeros(basis.K)
    for i in range(0, len(X), 20000):
        visits += basis(X[i:i + 20000]).sum(axis=0)
    predicted = basis(colloc).T @ (np.asarray(weights) * policy.density(colloc))
    return visits, predicted


def occupancy_correlation(traj_x, policy: DensityPolicy, delta: float, colloc, weights,
                          equilibrium=None) -> float:
    """Pearson correlation of the two weak-form occupancy vectors off the sink."""
    visits, predicted = occupancy_moments(traj_x, policy, delta, colloc, weights, equilibrium)
    rows = ~sink_mask(policy.basis, delta, equilibrium)
    return float(np.corrcoef(visits[rows], predicted[rows])[0, 1])


def propagated_mass(Pc, m, rows, steps: int) -> np.ndarray:
    """Mass of P_c^k m outside the sink for k = 0..steps.

    Every Gaussian RBF has the same integral, so the mass carried by the
    ``rows`` coefficients is proportional to their absolute sum.
    """
    out = np.empty(steps + 1)
    h = np.asarray(m, float).copy()
    for k in range(steps + 1):
        out[k] = np.abs(h[rows]).sum()
        h = Pc @ h
    return out
