"""Finite-dimensional Koopman / Perron-Frobenius models from snapshot data."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .convex_kernel import solve_row_stochastic_ls
from .sde_sim import SnapshotDataset, iter_realizations

MARKOV_TOL = 1e-6
NONNEG_TOL = 1e-8


class ProvenanceError(ValueError):
    pass


@dataclass
class OperatorModel:
    matrix: np.ndarray
    dt: float
    kind: str                 # "koopman" | "perron_frobenius"
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("koopman", "perron_frobenius"):
            raise ValueError(f"unknown operator kind {self.kind!r}")

    @property
    def K(self):
        return self.matrix.shape[0]

    def spectral_radius(self) -> float:
        return float(np.abs(np.linalg.eigvals(self.matrix)).max())

    def save(self, path) -> None:
        path = Path(path)
        np.savetxt(path.with_suffix(".csv"), self.matrix, delimiter=",", fmt="%.17g")
        meta = {"dt": self.dt, "kind": self.kind, "source": self.source}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, default=_np_default))

    @classmethod
    def load(cls, path) -> "OperatorModel":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        mat = np.loadtxt(path.with_suffix(".csv"), delimiter=",", ndmin=2)
        return cls(matrix=mat, dt=meta["dt"], kind=meta["kind"], source=meta["source"])


@dataclass
class GeneratorModel:
    matrix: np.ndarray
    dt: float
    kind: str
    source: dict = field(default_factory=dict)


def _np_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))


# ---------------------------------------------------------------------------
# moments


def _chunks(N, K, budget=4_000_000):
    step = max(1, budget // max(K, 1))
    return [slice(i, min(N, i + step)) for i in range(0, N, step)]


def build_moments(basis, data: SnapshotDataset):
    """G = (1/N) sum Psi(x)Psi(x)',  A = (1/(NR)) sum Psi(x)Psi(y)'."""
    if data.x.shape[1] != basis.dim:
        raise ValueError("basis and dataset dimensions disagree")
    N, R = data.N, data.R
    G = np.zeros((basis.K, basis.K))
    A = np.zeros_like(G)
    for sl in _chunks(N, basis.K * max(R, 1)):
        Px = basis(data.x[sl])
        G += Px.T @ Px
        for l in range(R):
            A += Px.T @ basis(data.y[sl, l])
    return G / N, A / (N * R)


def stream_moments(system, basis, N, R, dt, input_kind="zero", seed=0, policy=None, amplitude=1.0,
                   substeps=1):
    """Same result as build_moments(generate_dataset(...)) without storing y."""
    G = np.zeros((basis.K, basis.K))
    A = np.zeros_like(G)
    Px_cache = None
    for x, u, y in iter_realizations(system, N, R, dt, input_kind, seed, policy, amplitude,
                                         substeps=substeps):
        if Px_cache is None:
            Px_cache = [(sl, basis(x[sl])) for sl in _chunks(N, basis.K)]
            for _, Px in Px_cache:
                G += Px.T @ Px
        for sl, Px in Px_cache:
            A += Px.T @ basis(y[sl])
    return G / N, A / (N * R)


# ---------------------------------------------------------------------------
# fits


def default_ridge(G) -> float:
    return 1e-8 * float(np.trace(G)) / G.shape[0]


def edmd_fit(G, A, reg: float | None = None, dt: float = 1.0, source: dict | None = None) -> OperatorModel:
    """K0 = (G + reg I)^{-1} A (ridge-regularized least squares)."""
    reg = default_ridge(G) if reg is None else float(reg)
    if reg < 0:
        raise ValueError("ridge must be nonnegative")
    Greg = G + reg * np.eye(G.shape[0])
    try:
        K0 = np.linalg.solve(Greg, A)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("regularized G is singular; increase the ridge") from exc
    src = dict(source or {}, method="edmd", ridge=reg)
    return OperatorModel(K0, dt, "koopman", src)


@dataclass
class NsdmdFit:
    model: OperatorModel
    P_hat: np.ndarray
    objective: float
    status: str
    iterations: int


def nsdmd_fit(G, A, lam, dt: float = 1.0, source: dict | None = None, tol: float = 1e-10) -> NsdmdFit:
    """Markov-constrained P-F fit: min ||G^ P^ - A^||_F, P^ >= 0, P^ 1 = 1.

    G^ = G Lambda^{-1}, A^ = A Lambda^{-1}; the returned operator is P0 = P^'.
    """
    Li = np.linalg.inv(lam)
    Gh, Ah = G @ Li, A @ Li
    rep = solve_row_stochastic_ls(Gh, Ah, tol=tol)
    P_hat = rep.x
    src = dict(source or {}, method="nsdmd", objective=rep.objective, solver_status=rep.status)
    return NsdmdFit(OperatorModel(P_hat.T.copy(), dt, "perron_frobenius", src), P_hat,
                    rep.objective, rep.status, rep.iterations)


def markov_violation(P_hat) -> tuple[float, float]:
    """(most negative entry, largest |row sum - 1|) of a candidate Markov matrix."""
    return float(P_hat.min()), float(np.abs(P_hat.sum(axis=1) - 1.0).max())


def is_markov(P_hat, nonneg_tol=NONNEG_TOL, sum_tol=MARKOV_TOL) -> bool:
    lo, dev = markov_violation(P_hat)
    return lo >= -nonneg_tol and dev <= sum_tol


def pf_from_koopman(koop: OperatorModel, lam, conserve: bool = True) -> OperatorModel:
    """P0 = Lambda^{-1} K0' Lambda, optionally corrected to conserve mass.

    For RBFs every psi_k integrates to the same constant, so total mass of
    Psi'v is proportional to 1'v.  The correction moves the column-sum
    defect of P0 onto its diagonal, so 1'P0 = 1' exactly: mass leaving the
    box (or lost to projection error) stays where it was instead of
    disappearing.
    """
    P = np.linalg.solve(lam, koop.matrix.T @ lam)
    if conserve:
        P = P - np.diag(P.sum(axis=0) - 1.0)
    src = dict(koop.source, method="edmd_dual" + ("_conservative" if conserve else ""))
    return OperatorModel(P, koop.dt, "perron_frobenius", src)


def generator_of(model: OperatorModel) -> GeneratorModel:
    if model.dt <= 0:
        raise ValueError("dt must be positive")
    return GeneratorModel((model.matrix - np.eye(model.K)) / model.dt, model.dt, model.kind,
                          dict(model.source))


def _key(src):
    return (src.get("basis"), src.get("dt"))


def extract_control_generator(m1: GeneratorModel, m0: GeneratorModel, amplitude: float = 1.0) -> GeneratorModel:
    """Generator of the control vector field by linearity: (M1 - M0) / amplitude."""
    if m1.kind != m0.kind or m1.dt != m0.dt or m1.matrix.shape != m0.matrix.shape:
        raise ProvenanceError("generators differ in kind, dt or size")
    if m1.source.get("basis") != m0.source.get("basis"):
        raise ProvenanceError("generators were fitted on different bases")
    src = dict(m0.source, field="control", amplitude=amplitude)
    return GeneratorModel((m1.matrix - m0.matrix) / amplitude, m0.dt, m0.kind, src)


def dmd_affine_fit(X, Y):
    """Least squares Y ~ A X + b 1' for column-sample data (n, T).

    Accepts (T, n) row-sample arrays too when T != n is unambiguous.
    """
    X = np.atleast_2d(np.asarray(X, float))
    Y = np.atleast_2d(np.asarray(Y, float))
    if X.shape[0] > X.shape[1]:
        X, Y = X.T, Y.T
    n, T = X.shape
    if T < n + 1:
        raise np.linalg.LinAlgError("affine DMD needs at least n + 1 samples")
    Z = np.vstack([X, np.ones((1, T))])
    if np.linalg.matrix_rank(Z) < n + 1:
        raise np.linalg.LinAlgError("affine DMD regressor is rank deficient")
    sol, *_ = np.linalg.lstsq(Z.T, Y.T, rcond=None)
    AB = sol.T
    return AB[:, :n], AB[:, n]
