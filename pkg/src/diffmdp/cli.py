"""Command-line front end.

    diffmdp <command> --config exp.yaml [--seed N] [--out DIR]

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import platform
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import config as C
from .errors import ConfigError, DiffMdpError, NumericalError
from .evaluation import (SweepSettings, coupling_experiment, grid_feedback, rollout_discounted,
                         rollout_ergodic, value_convergence_sweep, write_coupling_csv, write_sweep_csv)
from .lyapunov import (certificate_problems, check_continuous_drift, check_discrete_drift,
                       empirical_invariant_measure, invariant_measure_convergence, write_invariant_csv)
from .mdp import (TransitionKernel, assemble_mdp, estimate_kernel_mc, estimate_kernel_quadrature_1d,
                  load_kernel, save_kernel)
from .sde import RandomSource
from .solvers import load_solution, relative_value_iteration, save_solution, value_iteration

log = logging.getLogger("diffmdp")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _finite(v):
    """JSON has no inf/nan: map them to None."""
    return v if isinstance(v, (int, float)) and math.isfinite(v) else None


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, float):
        return _finite(obj)
    return obj


# ---- shared pipeline pieces -------------------------------------------------


def _build_kernel(lc: C.LoadedConfig, rng: RandomSource, h: float) -> TransitionKernel:
    cfg = lc.cfg
    if cfg.tabular is not None:
        mdp = C.tabular_mdp(cfg)
        grid = C.tabular_grid(cfg, mdp.n_states)
        return TransitionKernel(mdp.h, mdp.kernel.matrices, grid, None, {"estimator": "tabular"})
    model = C.build_model(cfg)
    grid = C.build_grid_for(cfg, model, h)
    actions = C.build_actions_for(cfg, model)
    k = cfg.kernel
    if k.estimator == "mc":
        return estimate_kernel_mc(model, grid, actions, h, k.substeps, k.samples,
                                  rng.derive("kernel", h), workers=cfg.workers)
    return estimate_kernel_quadrature_1d(model, grid, actions, h, rule=k.rule)


def _kernel(lc: C.LoadedConfig, rng: RandomSource, h: float) -> TransitionKernel:
    if lc.cfg.kernel.file:
        return load_kernel(lc.require_file(lc.cfg.kernel.file, "kernel.file"))
    return _build_kernel(lc, rng, h)


def _mdp(lc: C.LoadedConfig, kernel: TransitionKernel):
    cfg = lc.cfg
    if cfg.tabular is not None:
        mdp = C.tabular_mdp(cfg)
        if kernel.n_states != mdp.n_states or kernel.n_actions != mdp.n_actions:
            raise ConfigError("kernel.file does not match the tabular fixture")
        mdp.kernel = kernel
        return mdp
    if kernel.grid is None or kernel.actions is None:
        raise ConfigError("kernel.file has no grid/action net; it cannot be paired with a model")
    return assemble_mdp(C.build_model(cfg), kernel.grid, kernel.actions, kernel, cfg.alpha)


def _solve(lc: C.LoadedConfig, mdp, kind: str):
    cfg = lc.cfg
    if kind == "discounted":
        return value_iteration(mdp, cfg.solver.vi_tol, max_iter=cfg.solver.max_iter)
    anchor = 0
    if mdp.grid is not None:
        ax = cfg.solver.anchor_x if cfg.solver.anchor_x is not None else C.x0_of(cfg, mdp.grid.dim)
        anchor = int(mdp.grid.nearest_index(np.asarray(ax, dtype=float)))
    return relative_value_iteration(mdp, cfg.solver.rvi_tol, anchor=anchor, max_iter=cfg.solver.max_iter)


# ---- commands --------------------------------------------------------------


def cmd_build_kernel(lc, rng, out: Path, args) -> dict:
    kernel = _build_kernel(lc, rng, C.require_h(lc.cfg))
    path = out / "kernel.bin"
    save_kernel(kernel, path)
    return {"kernel": str(path), "n_states": kernel.n_states, "n_actions": kernel.n_actions,
            "max_row_deviation": kernel.meta.get("max_row_deviation")}


def cmd_solve(lc, rng, out: Path, args) -> dict:
    kernel = _kernel(lc, rng, C.require_h(lc.cfg))
    mdp = _mdp(lc, kernel)
    sol, policy = _solve(lc, mdp, args.kind)
    path = out / f"solution_{args.kind}.json"
    save_solution(path, sol, policy)
    return {"solution": str(path), "residual": sol.residual, "iterations": sol.iterations,
            "gain": sol.gain}


def cmd_sweep(lc, rng, out: Path, args) -> dict:
    cfg = lc.cfg
    model = C.build_model(cfg)
    settings = SweepSettings(
        box=C.state_box(cfg, model).tolist(),
        action_counts=C.action_counts(cfg),
        estimator=cfg.kernel.estimator, samples=cfg.kernel.samples, substeps=cfg.kernel.substeps,
        grid_counts=tuple(cfg.grid.counts) if cfg.grid is not None and cfg.grid.counts else None,
        vi_tol=cfg.solver.vi_tol, rvi_tol=cfg.solver.rvi_tol, anchor_x=cfg.solver.anchor_x,
        dt_ratio=cfg.rollout.dt_ratio, disc_replications=cfg.rollout.replications,
        disc_tol=cfg.rollout.tol, erg_T=cfg.rollout.erg_T, erg_burn_in=cfg.rollout.erg_burn_in,
        erg_replications=cfg.rollout.erg_replications,
        coupling_policy=C.feedback_policy(cfg.coupling.policy) if lc.has("coupling") else None,
        coupling_horizon=cfg.coupling.horizon, coupling_replications=cfg.coupling.replications,
        timings=False, workers=cfg.workers,
    )
    t0 = time.perf_counter()
    rows = value_convergence_sweep(model, cfg.alpha, C.x0_of(cfg, model.dim), C.require_h_list(cfg),
                                   settings, rng)
    csv_path = out / "sweep.csv"
    write_sweep_csv(rows, csv_path)
    manifest = _manifest(lc, args)
    manifest["wall_time_s"] = time.perf_counter() - t0
    manifest["rows"] = [_clean(asdict(r)) for r in rows]
    _write_json(out / "sweep_manifest.json", manifest)
    return {"csv": str(csv_path)}


def _policy_for_rollout(lc, rng, model):
    cfg = lc.cfg
    if cfg.rollout.policy == "lipschitz":
        return C.feedback_policy("lipschitz"), {}
    h = C.require_h(cfg)
    kind = cfg.rollout.policy
    if cfg.rollout.solution:
        sol, policy = load_solution(lc.require_file(cfg.rollout.solution, "rollout.solution"))
        kernel = _kernel(lc, rng, sol.h)
    else:
        kernel = _kernel(lc, rng, h)
        sol, policy = _solve(lc, _mdp(lc, kernel), kind)
    if kernel.grid is None or kernel.actions is None:
        raise ConfigError("rollout needs a kernel with grid and action net")
    if len(policy) != kernel.grid.size:
        raise ConfigError("rollout.solution does not match the kernel grid")
    info = {"solution_kind": sol.kind, "solution_h": sol.h, "gain": sol.gain}
    return grid_feedback(kernel.grid, kernel.actions, policy), info


def cmd_rollout(lc, rng, out: Path, args) -> dict:
    cfg = lc.cfg
    model = C.build_model(cfg)
    feedback, info = _policy_for_rollout(lc, rng, model)
    h = info.get("solution_h") or C.require_h(cfg)
    dt = C.dt_for(h, cfg.rollout.dt_ratio)
    x0 = C.x0_of(cfg, model.dim)
    r = cfg.rollout
    disc = rollout_discounted(model, feedback, x0, cfg.alpha, h, dt, r.replications,
                              rng.derive("rollout_disc", h), horizon=r.horizon, tol=r.tol,
                              workers=cfg.workers)
    erg = rollout_ergodic(model, feedback, x0, r.erg_T, r.erg_burn_in, h, dt, r.erg_replications,
                          rng.derive("rollout_erg", h), workers=cfg.workers)
    record = {"policy": r.policy, "h": h, "dt": dt, "x0": x0.tolist(), "alpha": cfg.alpha,
              "master_seed": cfg.master_seed, "discounted": asdict(disc), "ergodic": asdict(erg), **info}
    _write_json(out / "rollout.json", _clean(record))
    return {"report": str(out / "rollout.json")}


def cmd_lyapunov(lc, rng, out: Path, args) -> dict:
    cfg = lc.cfg
    cert = C.build_certificate(cfg)
    reports = []
    if cfg.tabular is not None:
        kernel = _kernel(lc, rng, cfg.tabular.h)
        if kernel.grid is None:
            raise ConfigError("grid: a tabular drift check needs `grid` to place the states")
        rep = check_discrete_drift(kernel, cert)
        rep.flags = certificate_problems(cert, kernel.grid) + rep.flags
        reports.append(rep)
    else:
        model = C.build_model(cfg)
        h_list = cfg.h_list or [C.require_h(cfg)]
        actions = C.build_actions_for(cfg, model)
        grid = C.build_grid_for(cfg, model, h_list[-1])
        reports.append(check_continuous_drift(model, cert, grid.nodes, actions.actions, grid=grid))
        for h in h_list:
            reports.append(check_discrete_drift(_kernel(lc, rng, h), cert))
    record = {"master_seed": cfg.master_seed, "reports": [_clean(r.to_record()) for r in reports],
              "passed": all(r.passed for r in reports)}
    if lc.has("invariant") and cfg.tabular is None:
        record["invariant"] = _invariant(lc, rng, out)
    _write_json(out / "lyapunov.json", record)
    return {"report": str(out / "lyapunov.json"), "passed": record["passed"]}


def _invariant(lc, rng, out: Path) -> dict:
    cfg = lc.cfg
    inv = cfg.invariant
    model = C.build_model(cfg)
    h_list = C.require_h_list(cfg)
    policy = C.feedback_policy("lipschitz")
    dt = C.dt_for(h_list[-1], inv.dt_ratio)
    spacing = inv.spacing or h_list[-1]
    box = C.state_box(cfg, model)
    mu_v = empirical_invariant_measure(model, policy, inv.T, inv.burn_in, dt, rng.derive("invariant"),
                                       spacing, box=box, replicas=inv.replicas)
    measures = {}
    rows = invariant_measure_convergence(model, policy, h_list, mu_v, rng, estimator=inv.estimator,
                                         samples=cfg.kernel.samples, substeps=cfg.kernel.substeps,
                                         workers=cfg.workers, measures=measures)
    write_invariant_csv(rows, out / "invariant.csv")
    mu_v.save_csv(out / "measure_diffusion.csv")
    for h, mu in measures.items():
        mu.save_csv(out / f"measure_chain_h{h:g}.csv")
    d = [r.bl_distance for r in rows]
    return {"csv": str(out / "invariant.csv"), "bl_distance": d,
            "nonincreasing": all(b <= a for a, b in zip(d, d[1:]))}


def cmd_coupling(lc, rng, out: Path, args) -> dict:
    cfg = lc.cfg
    model = C.build_model(cfg)
    h_list = C.require_h_list(cfg)
    cp = cfg.coupling
    dt = C.dt_for(h_list[-1], cp.dt_ratio)
    res = coupling_experiment(model, C.feedback_policy(cp.policy), h_list, cp.horizon, dt,
                              cp.replications, rng.derive("coupling"), x0=C.x0_of(cfg, model.dim),
                              workers=cfg.workers)
    write_coupling_csv(res, cfg.master_seed, out / "coupling.csv")
    record = _clean({"h": res.h, "Z": res.Z, "slope": res.slope, "horizon": res.horizon, "dt": res.dt,
                     "replications": res.replications, "master_seed": cfg.master_seed,
                     "monotone": all(b < a for a, b in zip(res.Z, res.Z[1:]))})
    _write_json(out / "coupling.json", record)
    return {"csv": str(out / "coupling.csv"), "slope": res.slope}


def _manifest(lc: C.LoadedConfig, args) -> dict:
    return {
        "config": str(lc.path), "config_sha256": lc.sha256, "master_seed": lc.cfg.master_seed,
        "command": args.command, "versions": {
            "diffmdp": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__,
        },
    }


COMMANDS = {
    "build-kernel": (cmd_build_kernel, "estimate the h-step transition kernel"),
    "solve": (cmd_solve, "solve the discounted or average-cost MDP"),
    "sweep": (cmd_sweep, "value/gain convergence sweep over h_list (CSV)"),
    "rollout": (cmd_rollout, "roll a policy out on the diffusion"),
    "lyapunov": (cmd_lyapunov, "continuous and discrete drift checks"),
    "coupling": (cmd_coupling, "synchronous-coupling error Z(h) over h_list"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffmdp", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True, help="YAML experiment file")
        sp.add_argument("--seed", type=int, default=None, help="override master_seed")
        sp.add_argument("--out", default=None, help="output directory (overrides output_dir)")
        sp.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
        if name == "solve":
            sp.add_argument("--kind", choices=["discounted", "average"], default="discounted")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(logging.WARNING if args.quiet else logging.INFO)
    log.propagate = False
    try:
        lc = C.load_config(args.config, seed=args.seed)
        out = Path(args.out) if args.out else lc.resolve(lc.cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        rng = RandomSource(lc.cfg.master_seed)
        result = COMMANDS[args.command][0](lc, rng, out, args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DiffMdpError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps(_clean(result), sort_keys=True, default=_json_default))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
