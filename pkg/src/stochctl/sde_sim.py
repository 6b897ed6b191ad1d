"""Control-affine SDEs and Euler-Maruyama snapshot data.

    dx = (f(x) + g(x) u) dt + sigma * n(x) dW

with a single scalar Wiener channel by default (n maps to R^n) or ``m``
channels when n(x) returns an (n, m) matrix.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

Policy = Callable[[np.ndarray], np.ndarray]


class SimulationError(ValueError):
    pass


class PolyField:
    """Vector field with polynomial components.

    ``terms[i]`` lists (coefficient, exponents) pairs for component i, e.g.
    the Duffing drift is [[(1, [0, 1])], [(1, [1, 0]), (-1, [3, 0]), (-0.5, [0, 1])]].
    """

    def __init__(self, terms, dim: int):
        self.dim = dim
        self.terms = [[(float(c), tuple(int(a) for a in e)) for c, e in comp] for comp in terms]
        for comp in self.terms:
            for _, e in comp:
                if len(e) != dim:
                    raise ValueError(f"exponent {e} does not match state dimension {dim}")

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        out = np.zeros((x.shape[0], len(self.terms)))
        for i, comp in enumerate(self.terms):
            for c, e in comp:
                out[:, i] += c * np.prod(x ** np.asarray(e), axis=1)
        return out

    def to_list(self):
        return [[[c, list(e)] for c, e in comp] for comp in self.terms]


@dataclass(frozen=True)
class SdeSystem:
    dim: int
    drift: Callable
    control_field: Callable
    noise_field: Callable
    sigma: float
    domain: np.ndarray
    equilibrium: np.ndarray = None
    name: str = "system"
    spec: dict = field(default=None, compare=False)
    strict_equilibrium: bool = True  # require f(eq) = n(eq) = 0; off for e.g. additive-noise OU

    def __post_init__(self):
        dom = np.asarray(self.domain, float).reshape(self.dim, 2)
        if not (dom[:, 1] > dom[:, 0]).all():
            raise ValueError("domain must have positive extent on every axis")
        object.__setattr__(self, "domain", dom)
        eq = np.zeros(self.dim) if self.equilibrium is None else np.asarray(self.equilibrium, float)
        object.__setattr__(self, "equilibrium", eq)
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        f0 = self.drift(eq[None])[0]
        if np.abs(f0).max() > 1e-12:
            raise ValueError("drift must vanish at the equilibrium")
        n0 = np.asarray(self.noise_field(eq[None]))
        if self.strict_equilibrium and np.abs(n0).max() > 1e-12:
            raise ValueError("noise field must vanish at the equilibrium "
                             "(set strict_equilibrium=False for additive noise)")

    @classmethod
    def from_spec(cls, spec: dict) -> "SdeSystem":
        """Build from a declarative spec with polynomial coefficient tables."""
        dim = int(spec["dim"])
        return cls(dim=dim, drift=PolyField(spec["drift"], dim),
                   control_field=PolyField(spec["control_field"], dim),
                   noise_field=PolyField(spec["noise_field"], dim),
                   sigma=float(spec["sigma"]), domain=np.asarray(spec["domain"], float),
                   equilibrium=spec.get("equilibrium"), name=spec.get("name", "system"),
                   spec=spec, strict_equilibrium=spec.get("strict_equilibrium", True))

    def with_sigma(self, sigma: float) -> "SdeSystem":
        spec = dict(self.spec, sigma=sigma) if self.spec else None
        return SdeSystem(self.dim, self.drift, self.control_field, self.noise_field, sigma,
                         self.domain, self.equilibrium, self.name, spec, self.strict_equilibrium)

    def in_domain(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        return ((x >= self.domain[:, 0]) & (x <= self.domain[:, 1])).all(axis=1)

    def noise_matrix(self, x) -> np.ndarray:
        """n(x) as an (N, n, m) array."""
        nx = np.asarray(self.noise_field(np.atleast_2d(x)), float)
        return nx[:, :, None] if nx.ndim == 2 else nx

    @property
    def noise_channels(self) -> int:
        return self.noise_matrix(self.equilibrium[None]).shape[2]


def euler_maruyama_step(system: SdeSystem, x, u, dt: float, noise_draw) -> np.ndarray:
    """One EM step for a batch of states (N, n) or a single state (n,)."""
    if dt <= 0:
        raise SimulationError("dt must be positive")
    x = np.asarray(x, float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    xi = np.asarray(noise_draw, float).reshape(X.shape[0], -1)
    U = np.broadcast_to(np.asarray(u, float).reshape(-1), (X.shape[0],))
    if not (np.isfinite(X).all() and np.isfinite(xi).all() and np.isfinite(U).all()):
        raise SimulationError("non-finite state, input or noise passed to euler_maruyama_step")
    Y = _em(system, X, U, dt, xi)
    return Y[0] if single else Y


def _em(system, X, U, dt, xi):
    drift = system.drift(X) + system.control_field(X) * U[:, None]
    Y = X + dt * drift
    if system.sigma:
        Y = Y + system.sigma * np.sqrt(dt) * np.einsum("inm,im->in", system.noise_matrix(X), xi)
    return Y


@dataclass
class SnapshotDataset:
    x: np.ndarray   # (N, n)
    y: np.ndarray   # (N, R, n)
    u: np.ndarray   # (N,)
    dt: float
    seed: int
    input_kind: str

    def __post_init__(self):
        if self.x.ndim != 2 or self.y.ndim != 3 or self.y.shape[0] != self.x.shape[0] \
                or self.y.shape[2] != self.x.shape[1] or self.u.shape != (self.x.shape[0],):
            raise ValueError("inconsistent dataset shapes")

    @property
    def N(self):
        return self.x.shape[0]

    @property
    def R(self):
        return self.y.shape[1]

    def to_csv(self, path) -> None:
        """Columnar CSV (x.., y.., u, realization) plus a JSON sidecar."""
        path = Path(path)
        n = self.x.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{j + 1}" for j in range(n)] + [f"y{j + 1}" for j in range(n)]
                       + ["u", "realization"])
            for i in range(self.N):
                for l in range(self.R):
                    w.writerow([repr(float(v)) for v in self.x[i]] + [repr(float(v)) for v in self.y[i, l]]
                               + [repr(float(self.u[i])), l])
        sidecar = {"dt": self.dt, "seed": self.seed, "input_kind": self.input_kind,
                   "N": self.N, "R": self.R, "dim": n}
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))

    @classmethod
    def from_csv(cls, path) -> "SnapshotDataset":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        N, R, n = meta["N"], meta["R"], meta["dim"]
        data = data.reshape(N, R, 2 * n + 2)
        return cls(x=data[:, 0, :n].copy(), y=data[:, :, n:2 * n].copy(), u=data[:, 0, 2 * n].copy(),
                   dt=meta["dt"], seed=meta["seed"], input_kind=meta["input_kind"])


def _streams(seed: int, R: int):
    """Independent generators: one for initial states, one per realization."""
    children = np.random.SeedSequence(seed).spawn(R + 1)
    return np.random.default_rng(children[0]), [np.random.default_rng(c) for c in children[1:]]


def _inputs(system, x, input_kind, policy, amplitude):
    if input_kind == "zero":
        return np.zeros(x.shape[0])
    if input_kind == "step":
        return np.full(x.shape[0], float(amplitude))
    if input_kind == "feedback":
        if policy is None:
            raise SimulationError("feedback dataset requires a policy")
        return np.asarray(policy(x), float).reshape(-1)
    raise SimulationError(f"unknown input kind {input_kind!r}")


def sample_states(system: SdeSystem, N: int, seed: int) -> np.ndarray:
    rng, _ = _streams(seed, 0)
    lo, hi = system.domain[:, 0], system.domain[:, 1]
    return lo + (hi - lo) * rng.random((N, system.dim))


def iter_realizations(system: SdeSystem, N: int, R: int, dt: float, input_kind: str, seed: int,
                      policy: Policy | None = None, amplitude: float = 1.0, x=None, substeps: int = 1):
    """Yield (x, u, y_l) per realization without storing the full N x R array.

    Initial states come from their own stream (unless supplied), so zero,
    step and feedback datasets with the same seed share both the states and
    every noise draw (common random numbers).  With ``substeps > 1`` the
    successor is reached by that many EM steps of dt/substeps, the input
    being re-evaluated at each intermediate state for feedback data.
    """
    if substeps < 1:
        raise SimulationError("substeps must be >= 1")
    if N < 1 or R < 1:
        raise SimulationError("N and R must be >= 1")
    rng_x, rngs = _streams(seed, R)
    if x is None:
        lo, hi = system.domain[:, 0], system.domain[:, 1]
        x = lo + (hi - lo) * rng_x.random((N, system.dim))
    u = _inputs(system, x, input_kind, policy, amplitude)
    m = system.noise_channels
    h = dt / substeps
    for rng in rngs:
        y, uk = x, u
        for k in range(substeps):
            if k and input_kind == "feedback":
                uk = _inputs(system, y, input_kind, policy, amplitude)
            y = _em(system, y, uk, h, rng.standard_normal((N, m)))
        yield x, u, y


def generate_dataset(system: SdeSystem, N: int, R: int, dt: float, input_kind: str = "zero",
                     seed: int = 0, policy: Policy | None = None, amplitude: float = 1.0,
                     substeps: int = 1) -> SnapshotDataset:
    ys, x, u = [], None, None
    for x, u, y in iter_realizations(system, N, R, dt, input_kind, seed, policy, amplitude,
                                     substeps=substeps):
        ys.append(y)
    return SnapshotDataset(x=x, y=np.stack(ys, axis=1), u=u, dt=dt, seed=seed, input_kind=input_kind)


@dataclass
class Trajectories:
    t: np.ndarray       # (steps+1,)
    x: np.ndarray       # (M, steps+1, n)
    u: np.ndarray       # (M, steps+1)  input applied from each state (last entry repeats)
    left_domain: np.ndarray  # (M,) bool, any state outside the box
    diverged: np.ndarray     # (M,) bool, non-finite or beyond blow-up bound

    def first_entry(self, radius: float, center=None) -> np.ndarray:
        """Time each trajectory first enters the ball of ``radius`` (inf if never)."""
        c = 0.0 if center is None else np.asarray(center)
        dist = np.linalg.norm(self.x - c, axis=-1)
        inside = dist < radius
        hit = inside.any(axis=1)
        idx = np.argmax(inside, axis=1)
        return np.where(hit, self.t[idx], np.inf)


def simulate_batch(system: SdeSystem, x0, policy: Policy, dt: float, steps: int, seed: int = 0,
                   blowup: float = 1e6) -> Trajectories:
    """Closed-loop EM trajectories for a batch of initial states.

    States leaving the domain are recorded and flagged, never clamped.  A
    trajectory whose state becomes non-finite or exceeds ``blowup`` is
    frozen from then on and flagged as diverged.
    """
    if steps < 1:
        raise SimulationError("steps must be >= 1")
    X = np.atleast_2d(np.asarray(x0, float)).copy()
    M = X.shape[0]
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    m = system.noise_channels
    xs = np.empty((M, steps + 1, system.dim))
    us = np.zeros((M, steps + 1))
    xs[:, 0] = X
    alive = np.ones(M, bool)
    left = ~system.in_domain(X)
    for k in range(steps):
        xi = rng.standard_normal((M, m))
        u = np.zeros(M)
        if alive.any():
            u[alive] = np.asarray(policy(X[alive]), float).reshape(-1)
        us[:, k] = u
        Xn = X.copy()
        Xn[alive] = _em(system, X[alive], u[alive], dt, xi[alive])
        bad = alive & (~np.isfinite(Xn).all(axis=1) | (np.abs(Xn).max(axis=1) > blowup))
        Xn[bad] = X[bad]
        alive &= ~bad
        X = Xn
        xs[:, k + 1] = X
        left |= ~system.in_domain(X)
    us[:, -1] = us[:, -2]
    return Trajectories(t=dt * np.arange(steps + 1), x=xs, u=us, left_domain=left, diverged=~alive)


def simulate_trajectory(system: SdeSystem, x0, policy: Policy, dt: float, steps: int,
                        seed: int = 0) -> np.ndarray:
    """Single closed-loop trajectory; returns all states including x0."""
    tr = simulate_batch(system, np.asarray(x0, float).reshape(1, -1), policy, dt, steps, seed)
    return tr.x[0]


def zero_policy(x):
    return np.zeros(np.atleast_2d(x).shape[0])
