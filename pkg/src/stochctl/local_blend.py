"""Local LQR from an identified linear model and its blending with a global law."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .operator_approx import dmd_affine_fit
from .sde_sim import SnapshotDataset

log = logging.getLogger(__name__)

RICCATI_TOL = 1e-10
RICCATI_MAX_ITER = 100_000


class LocalDesignError(RuntimeError):
    pass


@dataclass
class LocalController:
    """u = -gain @ (x - equilibrium), active where x'Px <= gamma^(-1/3)."""

    gain: np.ndarray
    P: np.ndarray
    gamma: float
    equilibrium: np.ndarray | None = None
    closed_loop_radius: float | None = None

    def __post_init__(self):
        self.gain = np.atleast_1d(np.asarray(self.gain, float)).reshape(-1)
        self.P = np.atleast_2d(np.asarray(self.P, float))
        if self.equilibrium is None:
            self.equilibrium = np.zeros(self.P.shape[0])
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(x) - self.equilibrium
        return -(x @ self.gain)

    def density(self, x) -> np.ndarray:
        return local_density(self.P, self.gamma, np.atleast_2d(x) - self.equilibrium)

    def ellipsoid_level(self) -> float:
        """x'Px below this level is where the local density is positive."""
        return self.gamma ** (-1.0 / 3.0)

    def ellipsoid_points(self, n: int = 200) -> np.ndarray:
        """Boundary of the 2-D projection (first two coordinates) for plotting."""
        P2 = self.P[:2, :2]
        L = np.linalg.cholesky(P2)
        th = np.linspace(0, 2 * np.pi, n)
        circle = np.sqrt(self.ellipsoid_level()) * np.stack([np.cos(th), np.sin(th)])
        return (np.linalg.solve(L.T, circle)).T + self.equilibrium[:2]

    def to_dict(self) -> dict:
        return {"kind": "lqr", "gain": self.gain.tolist(), "P": self.P.tolist(), "gamma": self.gamma,
                "equilibrium": np.asarray(self.equilibrium).tolist()}


def local_samples(data: SnapshotDataset, domain, equilibrium=None, fraction: float = 0.1):
    """Pairs (x, y) with x inside the box of ``fraction`` x half-width around the equilibrium."""
    domain = np.asarray(domain, float)
    eq = np.zeros(domain.shape[0]) if equilibrium is None else np.asarray(equilibrium, float)
    half = fraction * (domain[:, 1] - domain[:, 0]) / 2
    near = (np.abs(data.x - eq) <= half).all(axis=1)
    X = np.repeat(data.x[near], data.R, axis=0)
    Y = data.y[near].reshape(-1, data.x.shape[1])
    U = np.repeat(data.u[near], data.R)
    return X, Y, U


def identify_local(step: SnapshotDataset, domain, equilibrium=None, fraction: float = 0.1,
                   zero: SnapshotDataset | None = None):
    """Affine one-step model x+ = A x + b u near the equilibrium.

    With only step data (u = amplitude) the fitted offset is b * amplitude;
    if zero-input data is also given, A comes from it and b from the change
    of offset, which removes the bias of any drift offset.
    """
    X1, Y1, U1 = local_samples(step, domain, equilibrium, fraction)
    if len(X1) < X1.shape[1] + 1:
        raise LocalDesignError(f"only {len(X1)} samples in the local box; need at least {X1.shape[1] + 1}")
    amp = float(np.mean(U1))
    if amp == 0:
        raise LocalDesignError("identify_local needs a nonzero step input")
    eq = np.zeros(X1.shape[1]) if equilibrium is None else np.asarray(equilibrium, float)
    A1, c1 = dmd_affine_fit((X1 - eq).T, (Y1 - eq).T)
    if zero is None:
        return A1, c1 / amp
    X0, Y0, _ = local_samples(zero, domain, equilibrium, fraction)
    A0, c0 = dmd_affine_fit((X0 - eq).T, (Y0 - eq).T)
    return A0, (c1 - c0) / amp


def design_lqr(A, b, Q, r: float, gamma: float = 1.0, equilibrium=None,
               tol: float = RICCATI_TOL, max_iter: int = RICCATI_MAX_ITER) -> LocalController:
    """Discrete LQR by fixed-point iteration of the Riccati recursion

        P <- Q + A'PA - A'Pb (r + b'Pb)^{-1} b'PA,   started at P = Q.
    """
    A = np.atleast_2d(np.asarray(A, float))
    n = A.shape[0]
    b = np.asarray(b, float).reshape(n, 1)
    Q = np.atleast_2d(np.asarray(Q, float))
    if r <= 0:
        raise ValueError("r must be positive")
    P = Q.copy()
    for _ in range(max_iter):
        PA = P @ A
        Pb = P @ b
        s = r + (b.T @ Pb).item()
        with np.errstate(over="ignore", invalid="ignore"):
            Pn = Q + A.T @ PA - (A.T @ Pb) @ (Pb.T @ A) / s
        Pn = 0.5 * (Pn + Pn.T)
        if not np.isfinite(Pn).all():
            raise LocalDesignError("local pair not stabilizable: Riccati iteration diverged")
        if np.abs(Pn - P).max() <= tol * max(1.0, np.abs(Pn).max()):
            P = Pn
            break
        P = Pn
    else:
        raise LocalDesignError("local pair not stabilizable: Riccati iteration did not converge")
    gain = ((b.T @ P @ A) / (r + (b.T @ P @ b).item())).reshape(-1)
    rad = float(np.abs(np.linalg.eigvals(A - b @ gain[None, :])).max())
    if rad >= 1:
        raise LocalDesignError(f"designed closed loop has spectral radius {rad:.4g} >= 1")
    if np.linalg.eigvalsh(P).min() <= 0:
        raise LocalDesignError("Riccati solution is not positive definite (Q may be only semidefinite)")
    return LocalController(gain, P, gamma, equilibrium, rad)


def local_density(P, gamma: float, x) -> np.ndarray:
    """max((x'Px)^-3 - gamma, 0); +inf at x'Px = 0."""
    P = np.atleast_2d(P)
    x = np.asarray(x, float).reshape(-1, P.shape[0])
    quad = np.einsum("ij,jk,ik->i", x, P, x)
    with np.errstate(divide="ignore", over="ignore"):
        val = np.where(quad > 0, np.maximum(np.maximum(quad, 1e-300) ** -3.0 - gamma, 0.0), np.inf)
    return val


def blend_weights(rho_local, rho) -> np.ndarray:
    """Weight of the local law; the global law gets one minus this."""
    rho_local = np.asarray(rho_local, float)
    rho = np.maximum(np.asarray(rho, float), 0.0)
    tot = rho_local + rho
    with np.errstate(invalid="ignore", divide="ignore"):
        w = np.where(np.isinf(rho_local), 1.0, np.where(tot > 0, rho_local / np.where(tot > 0, tot, 1), 1.0))
    return w


@dataclass
class BlendedPolicy:
    """u = rho_L/(rho_L + rho) u_local + rho/(rho_L + rho) u_global."""

    local: LocalController
    global_policy: object  # DensityPolicy-like: callable with .density(x)
    fallback_count: int = field(default=0, compare=False)

    def weights(self, x) -> np.ndarray:
        rl = self.local.density(x)
        rho = self.global_policy.density(x)
        both_zero = (rl == 0) & (np.maximum(rho, 0) == 0)
        if both_zero.any():
            self.fallback_count += int(both_zero.sum())
            log.debug("blend: %d points with zero local and global density use the local law",
                      int(both_zero.sum()))
        return blend_weights(rl, rho)

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        wl = self.weights(x)
        u = wl * self.local(x)
        glob = wl < 1
        if glob.any():
            u[glob] += (1 - wl[glob]) * self.global_policy(x[glob])
        return u

    def to_dict(self) -> dict:
        return {"kind": "blend", "local": self.local.to_dict(), "global": self.global_policy.to_dict()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def blend(policy: BlendedPolicy, x) -> np.ndarray:
    return policy(x)
