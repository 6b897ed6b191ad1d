"""Experiment pipelines: generate -> fit -> synthesize -> simulate -> emit."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import koopman_pi as kpi
from ..basis import basis_from_spec
from ..local_blend import BlendedPolicy, LocalController, design_lqr, identify_local
from ..operator_approx import (OperatorModel, edmd_fit, generator_of, is_markov, markov_violation,
                               nsdmd_fit, pf_from_koopman, stream_moments)
from ..pf_control import (DensityPolicy, SocpSpec, collocation_grid, default_delta, occupancy_moments,
                          project_density, propagated_mass, reach_fraction, sink_mask, solve_socp,
                          solve_stabilization, uniform_density)
from ..sde_sim import SdeSystem, generate_dataset, simulate_batch
from . import emit
from .configs import config_hash

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"[{stage}] {type(exc).__name__}: {exc}")
        self.stage = stage
        self.cause = exc


class _stage:
    def __init__(self, name, timings):
        self.name, self.timings = name, timings

    def __enter__(self):
        self.t0 = time.perf_counter()
        log.info("stage %s", self.name)

    def __exit__(self, et, ev, tb):
        self.timings[self.name] = time.perf_counter() - self.t0
        if ev is not None and not isinstance(ev, StageError):
            raise StageError(self.name, ev) from ev
        return False


@dataclass
class RunReport:
    name: str
    method: str
    config_hash: str
    metrics: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    wall_time: float = 0.0
    policy_path: str | None = None

    def to_dict(self) -> dict:
        return {"name": self.name, "method": self.method, "config_hash": self.config_hash,
                "metrics": _jsonable(self.metrics), "artifacts": self.artifacts, "timings": self.timings,
                "wall_time": self.wall_time, "policy_path": self.policy_path}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def _jsonable(o):
    if isinstance(o, dict):
        return {k: _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.ndarray):
        return _jsonable(o.tolist())
    if isinstance(o, (np.floating, float)):
        v = float(o)
        return v if np.isfinite(v) else str(v)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, np.bool_):
        return bool(o)
    return o


# ---------------------------------------------------------------------------
# building blocks


def quadratic_cost(weights):
    w = np.asarray(weights, float)

    def q(x):
        x = np.atleast_2d(x)
        return (x ** 2) @ w

    return q


def build_system(cfg) -> SdeSystem:
    return SdeSystem.from_spec(cfg["system"])


def build_basis(cfg, system):
    return basis_from_spec(cfg["basis"], domain=system.domain.tolist())


def scalar_optimal_control(x, a: float, r: float):
    """Deterministic optimal feedback for dx = a x^3 + u, cost x^2 + r u^2."""
    x = np.asarray(x, float)
    return -a * x ** 3 - x * np.sqrt(a ** 2 * x ** 4 + 1.0 / r)


def scalar_optimal_value(x, a: float, r: float):
    """Deterministic optimal value for the same problem: V' = 2r(a x^3 + x sqrt(a^2 x^4 + 1/r)),
    integrated in closed form with V(0) = 0."""
    x = np.asarray(x, float)
    s = x ** 2
    # with s = x^2: integral of 2r x sqrt(a^2 x^4 + 1/r) dx = r s root / 2 + asinh(a sqrt(r) s) / (2a)
    root = np.sqrt(a ** 2 * s ** 2 + 1.0 / r)
    return 0.5 * r * a * s ** 2 + 0.5 * r * s * root + np.arcsinh(a * np.sqrt(r) * s) / (2 * a)


@dataclass
class OperatorBundle:
    G0: np.ndarray
    A0: np.ndarray
    G1: np.ndarray
    A1: np.ndarray
    lam: np.ndarray
    K0: OperatorModel
    K1: OperatorModel
    P0: OperatorModel
    P1: OperatorModel
    M0: np.ndarray
    Mg: np.ndarray
    nsdmd: dict


def fit_operators(system, basis, data: dict, generator: str = "edmd_conservative",
                  run_nsdmd: bool = True) -> OperatorBundle:
    N, R, dt, seed = data["N"], data["R"], data["dt"], data["seed"]
    amp = data.get("amplitude", 1.0)
    G0, A0 = stream_moments(system, basis, N, R, dt, "zero", seed)
    G1, A1 = stream_moments(system, basis, N, R, dt, "step", seed, amplitude=amp)
    lam = basis.gram_lambda()
    src = {"basis": basis.fingerprint(), "dt": dt, "N": N, "R": R, "seed": seed}
    K0 = edmd_fit(G0, A0, dt=dt, source=dict(src, input="zero"))
    K1 = edmd_fit(G1, A1, dt=dt, source=dict(src, input="step"))
    ns = {}
    fits = {}
    if run_nsdmd or generator == "nsdmd":
        for tag, (G, A) in {"zero": (G0, A0), "step": (G1, A1)}.items():
            fit = nsdmd_fit(G, A, lam, dt=dt, source=dict(src, input=tag))
            lo, dev = markov_violation(fit.P_hat)
            fits[tag] = fit
            ns[tag] = {"objective": fit.objective, "status": fit.status, "iterations": fit.iterations,
                       "min_entry": lo, "row_sum_dev": dev, "markov": is_markov(fit.P_hat)}
    if generator == "nsdmd":
        P0, P1 = fits["zero"].model, fits["step"].model
    elif generator in ("edmd_conservative", "edmd_dual"):
        cons = generator == "edmd_conservative"
        P0, P1 = pf_from_koopman(K0, lam, cons), pf_from_koopman(K1, lam, cons)
    else:
        raise ValueError(f"unknown generator source {generator!r}")
    M0 = generator_of(P0).matrix
    Mg = (P1.matrix - P0.matrix) / (dt * amp)
    return OperatorBundle(G0, A0, G1, A1, lam, K0, K1, P0, P1, M0, Mg, ns)


def control_operator(ops: OperatorBundle, data: dict, kind: str = "difference") -> np.ndarray:
    """Operator multiplying the control-density coefficients w.

    ``difference`` is the generator of the control vector field,
    (P1 - P0) / (dt * amplitude); ``literal`` is the generator of the
    step-input system itself, (P1 - I) / dt.
    """
    if kind == "difference":
        return ops.Mg
    if kind == "literal":
        return generator_of(ops.P1).matrix
    raise ValueError(f"unknown control_operator {kind!r}; use 'difference' or 'literal'")


def local_controller(cfg, system, basis_delta=None) -> LocalController:
    loc = cfg["local"]
    data = cfg["data"]
    dom = system.domain
    half = loc.get("fraction", 0.1) * (dom[:, 1] - dom[:, 0]) / 2
    eq = system.equilibrium
    box = np.stack([eq - half, eq + half], axis=1)
    local_sys = SdeSystem(system.dim, system.drift, system.control_field, system.noise_field, system.sigma,
                          box, eq, system.name)
    step = generate_dataset(local_sys, loc.get("N", 2000), loc.get("R", 20), data["dt"], "step",
                            loc.get("seed", 11), amplitude=data.get("amplitude", 1.0))
    zero = generate_dataset(local_sys, loc.get("N", 2000), loc.get("R", 20), data["dt"], "zero",
                            loc.get("seed", 11))
    A, b = identify_local(step, box, eq, fraction=1.0, zero=zero)
    qw = np.asarray(cfg["cost"]["q_weights"], float)
    Q = np.asarray(loc["Q"], float) if loc.get("Q") is not None else 2.0 * np.diag(qw)  # Hessian of q at 0
    r = float(loc.get("r", cfg["cost"]["r"]))
    dt = data["dt"]
    return design_lqr(A, b, Q * dt, r * dt, gamma=float(loc["gamma"]), equilibrium=eq)


def start_points(cfg, system):
    ev = cfg["evaluation"]
    box = np.asarray(ev.get("start_box") or system.domain.tolist(), float)
    rng = np.random.default_rng(np.random.SeedSequence([ev.get("seed", 1), 99]))
    return box[:, 0] + (box[:, 1] - box[:, 0]) * rng.random((ev["starts"], system.dim))


def load_policy(path_or_dict):
    d = path_or_dict
    if not isinstance(d, dict):
        d = json.loads(Path(d).read_text())
    kind = d["kind"]
    if kind == "density":
        return DensityPolicy.from_dict(d)
    if kind == "koopman":
        return kpi.KoopmanPolicy.from_dict(d)
    if kind == "lqr":
        return LocalController(np.array(d["gain"]), np.array(d["P"]), d["gamma"], np.array(d["equilibrium"]))
    if kind == "blend":
        return BlendedPolicy(load_policy(d["local"]), load_policy(d["global"]))
    raise ValueError(f"unknown policy kind {kind!r}")


# ---------------------------------------------------------------------------
# pipelines


def run(cfg: dict, out=None, dump_problem: bool = False, stages=None) -> RunReport:
    """Run a config end to end.  ``stages`` limits work ("synthesize" stops
    before closed-loop evaluation)."""
    t0 = time.perf_counter()
    out = Path(out or Path("runs") / cfg["name"])
    out.mkdir(parents=True, exist_ok=True)
    rep = RunReport(cfg["name"], cfg["method"], config_hash(cfg))
    (out / "config.json").write_text(json.dumps(cfg, indent=2))
    with _stage("setup", rep.timings):
        system = build_system(cfg)
        basis = build_basis(cfg, system)
    if cfg["method"] == "kpi":
        _run_kpi(cfg, system, basis, out, rep, stages)
    else:
        _run_density(cfg, system, basis, out, rep, dump_problem, stages)
    rep.wall_time = time.perf_counter() - t0
    rep.save(out / "report.json")
    return rep


def _run_density(cfg, system, basis, out, rep, dump_problem, stages):
    syn = cfg.get("synthesis", {})
    q = quadratic_cost(cfg["cost"]["q_weights"])
    r = float(cfg["cost"]["r"])
    delta = syn.get("delta") or default_delta(system.domain)
    eq = system.equilibrium
    with _stage("fit", rep.timings):
        ops = fit_operators(system, basis, cfg["data"], syn.get("generator", "edmd_conservative"),
                            run_nsdmd=syn.get("nsdmd_checks", True))
    rep.metrics["nsdmd"] = ops.nsdmd
    rep.metrics["delta"] = delta
    Mu = control_operator(ops, cfg["data"], syn.get("control_operator", "difference"))
    with _stage("synthesize", rep.timings):
        if cfg["method"] == "pf_socp":
            colloc, weights = collocation_grid(system.domain, delta, syn.get("colloc_counts", 801), eq)
            m = project_density(basis, uniform_density(system.domain, delta, eq), colloc)
            spec = SocpSpec(q=q, r=r, m=m, basis=basis, M0=ops.M0, M1=Mu, delta=delta,
                            u_max=syn.get("u_max"), colloc=colloc, weights=weights, equilibrium=eq,
                            form=syn.get("form", "pointwise"),
                            weight_quadratic_by_r=syn.get("weight_quadratic_by_r", True))
            if dump_problem:
                (out / "problem.json").write_text(spec.program().to_json())
            glob = solve_socp(spec)
            rep.metrics["objective"] = glob.report.objective
            rep.metrics["equality_residual"] = glob.report.info["equality_residual"]
        else:
            rows = ~sink_mask(basis, delta, eq)
            if dump_problem:
                (out / "problem.json").write_text(json.dumps(
                    {"M0": ops.M0.tolist(), "M1": Mu.tolist(), "eps": syn.get("eps", 1e-3),
                     "rows": rows.tolist(), "u_max": syn.get("u_max")}))
            glob = solve_stabilization(ops.M0, Mu, syn.get("eps", 1e-3), basis, delta,
                                       u_max=syn.get("u_max"), equilibrium=eq)
            rep.metrics["margin"] = glob.report.info["margin"]
            m = None
        rep.metrics["solver_status"] = glob.report.status
        rep.metrics["solver_iterations"] = glob.report.iterations
        rep.metrics["kkt"] = glob.report.info.get("kkt")
        policy = glob
        if cfg.get("local", {}).get("enabled"):
            local = local_controller(cfg, system)
            policy = BlendedPolicy(local, glob)
            rep.metrics["local"] = {"gain": local.gain, "closed_loop_radius": local.closed_loop_radius,
                                    "ellipsoid_level": local.ellipsoid_level()}
            if system.dim >= 2:
                emit.write_csv(out / "ellipsoid.csv", ["x1", "x2"], local.ellipsoid_points())
                rep.artifacts["ellipsoid"] = "ellipsoid.csv"
        pol_path = out / "policy.json"
        pol_path.write_text(json.dumps(policy.to_dict()))
        rep.policy_path = str(pol_path)
    if stages == "synthesize":
        return
    ev = cfg["evaluation"]
    with _stage("evaluate", rep.timings):
        if system.dim == 1 and "control_grid" in ev:
            lo, hi, n = ev["control_grid"]
            xs = np.linspace(lo, hi, int(n))
            xs = xs[np.abs(xs - eq[0]) >= delta][:, None]
            u_data = glob(xs)
            a = cfg["system"]["drift"][0][0][0]
            u_true = scalar_optimal_control(xs[:, 0], a, r)
            rel = (u_data - u_true) / u_true
            rep.metrics["control_rms_rel_error"] = float(np.sqrt(np.mean(rel ** 2)))
            emit.write_control_curve(out / "control_curve.csv", xs, u_data, u_true)
            rep.artifacts["control_curve"] = "control_curve.csv"
        x0 = start_points(cfg, system)
        frac, tr = reach_fraction(system, policy, x0, ev["horizon"], ev["dt"], delta, ev.get("seed", 1))
        rep.metrics["reach_fraction"] = frac
        rep.metrics["reached"] = int(round(frac * len(x0)))
        rep.metrics["starts"] = len(x0)
        rep.metrics["diverged"] = int(tr.diverged.sum())
        rep.metrics["final_distance"] = np.linalg.norm(tr.x[:, -1] - eq, axis=1)
        rep.metrics["clamp_activations"] = glob.clamp_count
        emit.write_trajectories(out / "trajectories.csv", tr)
        rep.artifacts["trajectories"] = "trajectories.csv"
        if ev.get("occupancy_trajectories"):
            rng = np.random.default_rng(np.random.SeedSequence([ev.get("seed", 1), 5]))
            lo, hi = system.domain[:, 0], system.domain[:, 1]
            xo = lo + (hi - lo) * rng.random((ev["occupancy_trajectories"], system.dim))
            steps = int(round(ev.get("occupancy_horizon", ev["horizon"]) / ev["dt"]))
            tro = simulate_batch(system, xo, policy, ev["dt"], steps, ev.get("seed", 1) + 7)
            X = tro.x[~tro.diverged & ~tro.left_domain]
            counts = {1: 801, 2: 61, 3: 21}.get(system.dim, 11)
            colloc, weights = collocation_grid(system.domain, delta, counts, eq)
            visits, predicted = occupancy_moments(X, glob, delta, colloc, weights, eq)
            rows = ~sink_mask(basis, delta, eq)
            rep.metrics["occupancy_correlation"] = float(np.corrcoef(visits[rows], predicted[rows])[0, 1])
            emit.write_occupancy(out / "occupancy.csv", basis.centers, glob.density(basis.centers),
                                 visits, predicted)
            rep.artifacts["occupancy"] = "occupancy.csv"
        if ev.get("decay"):
            rep.metrics["decay"] = closed_loop_decay(system, basis, policy, ev["decay"], delta,
                                                     cfg["data"]["dt"])


def closed_loop_decay(system, basis, policy, dcfg, delta, dt):
    """Fit a Markov P-F model of the closed loop over a coarse interval and
    track the mass of P_c^k m outside the sink."""
    interval = dt * dcfg.get("substeps", 20)
    G, A = stream_moments(system, basis, dcfg["N"], dcfg["R"], interval, "feedback", dcfg.get("seed", 21),
                          policy=policy, substeps=dcfg.get("substeps", 20))
    lam = basis.gram_lambda()
    fit = nsdmd_fit(G, A, lam, dt=interval)
    eq = system.equilibrium
    colloc, _ = collocation_grid(system.domain, delta, 41, eq)
    m = project_density(basis, uniform_density(system.domain, delta, eq), colloc)
    rows = ~sink_mask(basis, delta, eq)
    norms = propagated_mass(fit.model.matrix, m, rows, dcfg.get("steps", 20))
    return {"interval": interval, "norms": norms, "markov_min_entry": markov_violation(fit.P_hat)[0],
            "markov_row_sum_dev": markov_violation(fit.P_hat)[1]}


def initial_policy(cfg, system):
    k0 = cfg["kpi"]["k0"]
    if k0["kind"] == "zero":
        return lambda x: np.zeros(np.atleast_2d(x).shape[0])
    if k0["kind"] == "lqr":
        # scalar linearization x' = u: gain sqrt(Q/R)
        gain = np.sqrt(float(k0["Q"]) / float(k0["R"]))
        return lambda x: -gain * np.atleast_2d(x)[:, 0]
    if k0["kind"] == "linear":
        K = np.asarray(k0["gain"], float)
        return lambda x: -(np.atleast_2d(x) @ K)
    raise ValueError(f"unknown initial policy {k0['kind']!r}")


def _run_kpi(cfg, system, basis, out, rep, stages):
    kc = cfg["kpi"]
    d = cfg["data"]
    q = quadratic_cost(cfg["cost"]["q_weights"])
    r = float(cfg["cost"]["r"])
    kcfg = kpi.KpiConfig(N=d["N"], R=d["R"], dt=d["dt"], seed=d["seed"], amplitude=d.get("amplitude", 1.0),
                         terms=kc.get("terms"), horizon=kc.get("horizon"),
                         cost_samples=kc.get("cost_samples", 2000), mc_trajectories=kc.get("mc_trajectories", 100),
                         mc_horizon=kc.get("mc_horizon", 10.0), incremental=kc.get("incremental", False))
    with _stage("kpi", rep.timings):
        state = kpi.run_kpi(system, basis, q, r, initial_policy(cfg, system), kc["iterations"], kcfg)
    labels = basis.labels()
    emit.write_value_history(out / "value_history.csv", state.history, labels)
    rep.artifacts["value_history"] = "value_history.csv"
    if state.value is not None:
        rep.metrics["value_coefficients"] = state.value.coefficients()
    rep.metrics["history"] = [{"iteration": h.iteration, "spectral_radius": h.spectral_radius,
                               "cost": h.cost, "cost_stderr": h.cost_se} for h in state.history]
    policy = state.policy
    if hasattr(policy, "to_dict"):
        pol_path = out / "policy.json"
        pol_path.write_text(policy.to_json())
        rep.policy_path = str(pol_path)
    if stages == "synthesize":
        return
    ev = cfg["evaluation"]
    with _stage("evaluate", rep.timings):
        lo, hi, n = ev["control_grid"]
        g = np.linspace(lo, hi, int(n))
        if system.dim == 1:
            X = g[:, None]
            a = cfg["system"]["drift"][0][0][0]
            u_ref = scalar_optimal_control(g, a, r)
        else:
            X = np.array(np.meshgrid(g, g, indexing="ij")).reshape(2, -1).T
            u_ref = -X[:, 0] * X[:, 1] if cfg["system"].get("name") == "stable-2d" else None
        u = policy(X)
        if u_ref is not None:
            rep.metrics["control_max_abs_error"] = float(np.max(np.abs(u - u_ref)))
        emit.write_control_curve(out / "control_curve.csv", X, u, u_ref)
        rep.artifacts["control_curve"] = "control_curve.csv"
        if system.dim == 1 and state.value is not None:
            v_ref = scalar_optimal_value(g, a, r)
            emit.write_csv(out / "value_curve.csv", ["x", "V_data", "V_analytic"],
                           np.column_stack([g, state.value(X), v_ref]))
            rep.artifacts["value_curve"] = "value_curve.csv"
        x0 = start_points(cfg, system)
        steps = int(round(ev["horizon"] / ev["dt"]))
        tr = simulate_batch(system, x0, policy, ev["dt"], steps, ev.get("seed", 1))
        rep.metrics["final_distance"] = np.linalg.norm(tr.x[:, -1] - system.equilibrium, axis=1)
        emit.write_trajectories(out / "trajectories.csv", tr)
        rep.artifacts["trajectories"] = "trajectories.csv"
