"""Declarative experiment configs.

A config is a JSON-compatible dict:

    name, method ("pf_socp" | "stabilize" | "kpi"), scale ("desk" | "paper")
    system     SdeSystem spec: dim, drift, control_field, noise_field
               (polynomial term tables), sigma, domain, equilibrium
    basis      basis spec (see basis.basis_from_spec)
    data       N, R, dt, seed, amplitude
    cost       q_weights (q(x) = sum_i q_i x_i^2), r
    synthesis  delta, u_max, eps, form, colloc_counts, generator,
               control_operator ("difference" | "literal"), weight_quadratic_by_r
    local      enabled, gamma, fraction, N, R, seed
    evaluation starts, start_box, horizon, dt, seed, control_grid, ...
    kpi        iterations, k0, horizon, cost_samples, mc_*
    scales     {"paper": {...overrides}} deep-merged when scale = "paper"

Built-in configs are below; a JSON file with the same layout can be passed
instead of a name.
"""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

SCALAR_SYSTEM = {
    "name": "scalar-cubic", "dim": 1,
    "drift": [[[0.01, [3]]]], "control_field": [[[1.0, [0]]]], "noise_field": [[[1.0, [1]]]],
    "sigma": 0.5, "domain": [[-10.0, 10.0]],
}

DUFFING_SYSTEM = {
    "name": "duffing", "dim": 2,
    "drift": [[[1.0, [0, 1]]], [[1.0, [1, 0]], [-1.0, [3, 0]], [-0.5, [0, 1]]]],
    "control_field": [[], [[1.0, [0, 0]]]],
    "noise_field": [[], [[1.0, [1, 0]]]],
    "sigma": 0.5, "domain": [[-2.0, 2.0], [-2.0, 2.0]],
}

VDP3_SYSTEM = {
    "name": "vanderpol-3d", "dim": 3,
    "drift": [[[1.0, [0, 1, 0]]],
              [[-1.0, [1, 0, 0]], [1.0, [0, 1, 0]], [-1.0, [0, 0, 1]], [-1.0, [2, 1, 0]]],
              [[1.0, [0, 0, 1]], [-1.0, [0, 0, 2]]]],
    "control_field": [[], [], [[0.5, [0, 0, 0]]]],
    "noise_field": [[], [], [[1.0, [1, 0, 0]]]],
    "sigma": 0.5, "domain": [[-1.0, 1.0], [-1.0, 1.0], [-1.0, 1.0]],
}

STABLE2D_SYSTEM = {
    "name": "stable-2d", "dim": 2,
    "drift": [[[-1.0, [1, 0]], [1.0, [0, 1]]],
              [[-0.5, [1, 0]], [-0.5, [0, 1]], [0.5, [2, 1]]]],
    "control_field": [[], [[1.0, [1, 0]]]],
    "noise_field": [[], [[1.0, [1, 0]]]],
    "sigma": 0.1, "domain": [[-1.0, 1.0], [-1.0, 1.0]],
}

CONFIGS = {
    "scalar-pf": {
        "name": "scalar-pf", "method": "pf_socp",
        "system": SCALAR_SYSTEM,
        "basis": {"kind": "gaussian_rbf", "counts": [45], "width_factor": 0.5},
        "data": {"N": 500, "R": 200, "dt": 0.01, "seed": 0, "amplitude": 1.0},
        "cost": {"q_weights": [1.0], "r": 0.1},
        "synthesis": {"delta": None, "u_max": None, "form": "pointwise", "colloc_counts": [801],
                      "generator": "edmd_conservative"},
        "local": {"enabled": True, "gamma": 2e7, "fraction": 0.1, "N": 2000, "R": 20, "seed": 11},
        "evaluation": {"starts": 10, "start_box": [[-10.0, 10.0]], "horizon": 20.0, "dt": 0.01, "seed": 1,
                       "control_grid": [-8.0, 8.0, 321], "occupancy_trajectories": 200,
                       "occupancy_horizon": 20.0},
        "scales": {"paper": {"basis": {"counts": [75]},
                             "data": {"N": 5000, "R": 2000}}},
    },
    "duffing": {
        "name": "duffing", "method": "stabilize",
        "system": DUFFING_SYSTEM,
        "basis": {"kind": "gaussian_rbf", "counts": [11, 11], "width_factor": 0.5},
        "data": {"N": 20000, "R": 100, "dt": 0.01, "seed": 0, "amplitude": 1.0},
        "cost": {"q_weights": [1.0, 1.0], "r": 1.0},
        "synthesis": {"delta": 0.1, "u_max": 5.0, "eps": 1e-3, "generator": "edmd_conservative"},
        "local": {"enabled": True, "gamma": 1000.0, "fraction": 0.1, "N": 4000, "R": 20, "seed": 11},
        "evaluation": {"starts": 8, "start_box": None, "horizon": 30.0, "dt": 0.01, "seed": 1,
                       "decay": {"N": 20000, "R": 20, "substeps": 20, "steps": 20, "seed": 21}},
        "scales": {"paper": {"basis": {"counts": [15, 15]},
                             "data": {"N": 200000, "R": 1000}}},
    },
    "vdp3": {
        "name": "vdp3", "method": "stabilize",
        "system": VDP3_SYSTEM,
        "basis": {"kind": "gaussian_rbf", "counts": [6, 6, 6], "width_factor": 0.5},
        "data": {"N": 50000, "R": 100, "dt": 0.01, "seed": 0, "amplitude": 1.0},
        "cost": {"q_weights": [1.0, 1.0, 1.0], "r": 1.0},
        "synthesis": {"delta": 0.05, "u_max": 10.0, "eps": 2e-4, "generator": "edmd_conservative"},
        "local": {"enabled": True, "gamma": 100.0, "fraction": 0.1, "N": 4000, "R": 20, "seed": 11},
        "evaluation": {"starts": 5, "start_box": None, "horizon": 30.0, "dt": 0.01, "seed": 1},
        "scales": {"paper": {"basis": {"counts": [8, 8, 8]},
                             "data": {"N": 500000, "R": 1000}}},
    },
    "stable2d-kpi": {
        "name": "stable2d-kpi", "method": "kpi",
        "system": STABLE2D_SYSTEM,
        "basis": {"kind": "monomial", "max_degree": 3, "min_degree": 1},
        "data": {"N": 3000, "R": 50, "dt": 0.01, "seed": 0, "amplitude": 1.0},
        "cost": {"q_weights": [1.0, 1.0], "r": 1.0},
        "kpi": {"iterations": 10, "k0": {"kind": "zero"}, "horizon": 20.0, "cost_samples": 2000,
                "mc_trajectories": 100, "mc_horizon": 10.0, "incremental": False},
        "evaluation": {"starts": 10, "start_box": None, "horizon": 10.0, "dt": 0.01, "seed": 1,
                       "control_grid": [-1.0, 1.0, 41]},
        "scales": {"paper": {"basis": {"max_degree": 4},
                             "data": {"N": 30000, "R": 100}}},
    },
    "scalar-kpi": {
        "name": "scalar-kpi", "method": "kpi",
        "system": dict(SCALAR_SYSTEM, sigma=0.1, domain=[[-5.0, 5.0]]),
        "basis": {"kind": "monomial", "max_degree": 3, "min_degree": 0},
        "data": {"N": 500, "R": 100, "dt": 0.01, "seed": 0, "amplitude": 1.0},
        "cost": {"q_weights": [1.0], "r": 0.1},
        "kpi": {"iterations": 10, "k0": {"kind": "lqr", "Q": 1.0, "R": 0.1}, "horizon": 5.0,
                "cost_samples": 2000, "mc_trajectories": 100, "mc_horizon": 10.0, "incremental": False},
        "evaluation": {"starts": 10, "start_box": None, "horizon": 10.0, "dt": 0.01, "seed": 1,
                       "control_grid": [-5.0, 5.0, 201]},
        "scales": {"paper": {}},
    },
}

ALIASES = {"vdp": "vdp3", "vanderpol": "vdp3", "stable2d": "stable2d-kpi", "scalar": "scalar-pf"}

NON_SEMANTIC = ("out", "description")


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(name_or_path: str, scale: str = "desk", overrides: dict | None = None) -> dict:
    """Resolve a built-in name or a JSON file into a concrete config."""
    key = ALIASES.get(name_or_path, name_or_path)
    if key in CONFIGS:
        cfg = copy.deepcopy(CONFIGS[key])
    else:
        path = Path(name_or_path)
        if not path.exists():
            raise KeyError(f"unknown experiment {name_or_path!r}; built-ins: {sorted(CONFIGS)}")
        cfg = json.loads(path.read_text())
    if scale not in ("desk", "paper"):
        raise ValueError("scale must be 'desk' or 'paper'")
    if scale == "paper":
        cfg = deep_merge(cfg, cfg.get("scales", {}).get("paper", {}))
    cfg.pop("scales", None)
    cfg["scale"] = scale
    if overrides:
        cfg = deep_merge(cfg, overrides)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    for key in ("name", "method", "system", "basis", "data", "cost"):
        if key not in cfg:
            raise ValueError(f"config is missing {key!r}")
    if cfg["method"] not in ("pf_socp", "stabilize", "kpi"):
        raise ValueError(f"unknown method {cfg['method']!r}")
    if cfg["cost"]["r"] <= 0:
        raise ValueError("cost.r must be positive")
    d = cfg["data"]
    if d["N"] < 1 or d["R"] < 1 or d["dt"] <= 0:
        raise ValueError("data.N, data.R must be >= 1 and data.dt > 0")


def _canonical(obj):
    if isinstance(obj, dict):
        return {k: _canonical(v) for k, v in sorted(obj.items()) if k not in NON_SEMANTIC}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    if isinstance(obj, bool) or obj is None or isinstance(obj, str):
        return obj
    if isinstance(obj, (int, float)):
        return repr(float(obj))
    return obj


def config_hash(cfg: dict) -> str:
    """Hash of the semantic content: numbers compare by value (1 == 1.0) and
    output locations are ignored."""
    blob = json.dumps(_canonical(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
