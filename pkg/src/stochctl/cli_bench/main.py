"""Command line interface.

    stochctl simulate      --config NAME --policy policy.json
    stochctl fit-operators --config NAME
    stochctl solve-pf      --config NAME
    stochctl stabilize     --config NAME
    stochctl kpi           --config NAME
    stochctl reproduce     NAME

Common flags: --scale {desk,paper}, --seed N, --out DIR, --dump-problem.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import emit
from .configs import CONFIGS, config_hash, load_config
from .runner import (StageError, build_basis, build_system, fit_operators, load_policy, run,
                     start_points)
from ..sde_sim import simulate_batch

METHOD_OF = {"solve-pf": "pf_socp", "stabilize": "stabilize", "kpi": "kpi"}


def _common(p):
    p.add_argument("--scale", choices=("desk", "paper"), default="desk")
    p.add_argument("--seed", type=int, default=None, help="override the data seed")
    p.add_argument("--out", default=None, help="output directory (default runs/<name>)")
    p.add_argument("--dump-problem", action="store_true", help="write the convex program as JSON")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stochctl", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("reproduce", help="run a built-in example end to end")
    p.add_argument("example", help=f"one of {sorted(CONFIGS)} or a config JSON path")
    _common(p)
    for name in ("solve-pf", "stabilize", "kpi", "fit-operators"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="built-in name or config JSON path")
        _common(p)
    p = sub.add_parser("simulate", help="closed-loop trajectories of a saved policy")
    p.add_argument("--config", required=True)
    p.add_argument("--policy", default=None, help="policy JSON (omit for zero input)")
    p.add_argument("--starts", type=int, default=None)
    p.add_argument("--horizon", type=float, default=None)
    _common(p)
    return ap


def _config(args):
    over = {}
    if args.seed is not None:
        over["data"] = {"seed": args.seed}
    name = getattr(args, "example", None) or args.config
    return load_config(name, args.scale, over or None)


def _out(args, cfg, suffix=""):
    return Path(args.out or Path("runs") / (cfg["name"] + suffix))


def cmd_reproduce(args):
    cfg = _config(args)
    rep = run(cfg, _out(args, cfg), dump_problem=args.dump_problem)
    print(json.dumps(rep.to_dict()["metrics"], indent=2, default=str))
    return 0


def cmd_synthesize(args):
    cfg = _config(args)
    want = METHOD_OF[args.command]
    if cfg["method"] != want:
        raise SystemExit(f"config {cfg['name']!r} uses method {cfg['method']!r}, not {want!r}")
    rep = run(cfg, _out(args, cfg), dump_problem=args.dump_problem, stages="synthesize")
    print(json.dumps({"policy": rep.policy_path, "config_hash": rep.config_hash,
                      "metrics": rep.to_dict()["metrics"]}, indent=2, default=str))
    return 0


def cmd_fit_operators(args):
    cfg = _config(args)
    out = _out(args, cfg, "-operators")
    out.mkdir(parents=True, exist_ok=True)
    system = build_system(cfg)
    basis = build_basis(cfg, system)
    syn = cfg.get("synthesis", {})
    if basis.kind == "monomial":
        from ..koopman_pi import KpiConfig, identify_control_generators
        d = cfg["data"]
        L0, L1 = identify_control_generators(system, basis, KpiConfig(N=d["N"], R=d["R"], dt=d["dt"],
                                                                      seed=d["seed"]))
        np.savetxt(out / "L0.csv", L0, delimiter=",")
        np.savetxt(out / "L1.csv", L1, delimiter=",")
        summary = {"kind": "koopman_generators", "files": ["L0.csv", "L1.csv"]}
    else:
        ops = fit_operators(system, basis, cfg["data"], syn.get("generator", "edmd_conservative"))
        ops.K0.save(out / "koopman_zero")
        ops.K1.save(out / "koopman_step")
        ops.P0.save(out / "pf_zero")
        ops.P1.save(out / "pf_step")
        np.savetxt(out / "gram_lambda.csv", ops.lam, delimiter=",")
        summary = {"kind": "operators", "nsdmd": ops.nsdmd,
                   "markov_ok": all(v["markov"] for v in ops.nsdmd.values())}
    summary["config_hash"] = config_hash(cfg)
    (out / "operators.json").write_text(json.dumps(summary, indent=2, default=str))
    print(json.dumps(summary, indent=2, default=str))
    return 0


def cmd_simulate(args):
    cfg = _config(args)
    system = build_system(cfg)
    ev = dict(cfg.get("evaluation", {"starts": 10, "horizon": 10.0, "dt": cfg["data"]["dt"], "seed": 1}))
    if args.starts is not None:
        ev["starts"] = args.starts
    if args.horizon is not None:
        ev["horizon"] = args.horizon
    cfg = dict(cfg, evaluation=ev)
    policy = load_policy(args.policy) if args.policy else (lambda x: np.zeros(np.atleast_2d(x).shape[0]))
    x0 = start_points(cfg, system)
    steps = int(round(ev["horizon"] / ev["dt"]))
    tr = simulate_batch(system, x0, policy, ev["dt"], steps, ev.get("seed", 1))
    out = _out(args, cfg, "-simulate")
    path = emit.write_trajectories(out / "trajectories.csv", tr)
    print(json.dumps({"trajectories": str(path), "diverged": int(tr.diverged.sum()),
                      "final_distance": np.linalg.norm(tr.x[:, -1] - system.equilibrium, axis=1).tolist()}))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"reproduce": cmd_reproduce, "fit-operators": cmd_fit_operators, "simulate": cmd_simulate,
               "solve-pf": cmd_synthesize, "stabilize": cmd_synthesize, "kpi": cmd_synthesize}[args.command]
    try:
        return handler(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
