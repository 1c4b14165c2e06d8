"""Command-line interface for the mean-field solver pipeline.

Subcommands
-----------
``validate``      check a model document and print dimensions and assumptions
``riccati``       solve both gain sweeps, write P.csv / Pi.csv
``cc``            solve the consistency system, write m/X/psi CSVs + residuals
``simulate``      run one finite population, write agents.csv + summary.json
``nash-sweep``    gap metrics over a population-size ladder with decay fits
``cash-example``  full report bundle for the cash-management scenario

Conventions
-----------
Exit code 0 on success, 1 on domain errors (a single-line JSON payload
``{"error", "module", "detail"}`` goes to stderr), 2 on usage errors.
Every run prints a manifest (with wall time) to stdout; subcommands with an
output directory also write ``manifest.json`` without the timing field, so
reruns are byte-identical. Seed precedence: ``--seed`` flag, then the
``MFG_SEED`` environment variable, then 0.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
import time

import numpy as np

from . import errors, figures
from .cash import CASH_DEFAULT_N, CASH_DEFAULT_STEPS, run_cash_experiment
from .consistency import solve_cc_auto
from .model import TimeGrid, dump_model_dict, load_model_dict, validate
from .nash import scaling_sweep
from .population import SimConfig, simulate_population
from .riccati import check_monotonicity, solve_P, solve_Pi
from .serialize import (RunManifest, config_digest, write_csv, write_json,
                        write_manifest, write_path_csv)

__all__ = ["main", "build_parser"]

SWEEP_COLUMNS = ("N", "replicate", "state_gap", "cost_gap", "avg_gap")


# ---------------------------------------------------------------------------
# Argument handling
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lqmfg",
        description="Decentralized near-equilibrium solver pipeline for "
                    "linear-quadratic mean-field models with partial "
                    "observation and control-average coupling.")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add_model(p):
        p.add_argument("--model", required=True,
                       help="path to a model JSON document")
        p.add_argument("--steps", type=int, default=None,
                       help="override the grid step count from the document")

    p = sub.add_parser("validate", help="check a model document")
    add_model(p)

    p = sub.add_parser("riccati", help="solve both gain sweeps")
    add_model(p)
    p.add_argument("--out-dir", default=".", help="output directory")

    p = sub.add_parser("cc", help="solve the consistency system")
    add_model(p)
    p.add_argument("--out-dir", default=".", help="output directory")

    p = sub.add_parser("simulate", help="run one finite population")
    add_model(p)
    p.add_argument("--N", type=int, default=100, help="population size")
    p.add_argument("--seed", type=int, default=None,
                   help="noise seed (precedence: flag > MFG_SEED > 0)")
    p.add_argument("--out-dir", default=".", help="output directory")

    p = sub.add_parser("nash-sweep",
                       help="gap metrics over a population-size ladder")
    add_model(p)
    p.add_argument("--Ns", required=True,
                   help="comma-separated population sizes, e.g. 4,8,16,32")
    p.add_argument("--replicates", type=int, default=20,
                   help="replicates per ladder size")
    p.add_argument("--seed", type=int, default=None,
                   help="noise seed (precedence: flag > MFG_SEED > 0)")
    p.add_argument("--out", default="scaling",
                   help="output stem (or .csv path); writes stem.csv, "
                        "stem.json, stem.png")
    p.add_argument("--threads", type=int, default=None,
                   help="worker-thread cap (default: available parallelism)")

    p = sub.add_parser("cash-example",
                       help="full report bundle for the cash scenario")
    p.add_argument("--steps", type=int, default=CASH_DEFAULT_STEPS,
                   help="grid step count")
    p.add_argument("--N", type=int, default=CASH_DEFAULT_N,
                   help="population size for the sampled-path stages")
    p.add_argument("--seed", type=int, default=None,
                   help="noise seed (precedence: flag > MFG_SEED > 0)")
    p.add_argument("--out-dir", default=".", help="output directory")
    p.add_argument("--threads", type=int, default=None,
                   help="worker-thread cap (default: available parallelism)")
    return parser


def resolve_seed(flag_value) -> int:
    """Seed precedence: explicit flag, then MFG_SEED, then 0."""
    if flag_value is not None:
        return int(flag_value)
    env = os.environ.get("MFG_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise errors.UsageError(
            f"MFG_SEED must be an integer, got {env!r}") from None


def _resolve_threads(flag_value) -> int:
    if flag_value is None:
        return os.cpu_count() or 1
    if flag_value < 1:
        raise errors.UsageError(f"--threads must be >= 1, got {flag_value}")
    return flag_value


def _parse_sizes(text: str) -> tuple:
    try:
        sizes = tuple(int(tok) for tok in text.split(",") if tok.strip())
    except ValueError:
        raise errors.UsageError(
            f"--Ns must be comma-separated integers, got {text!r}") from None
    if not sizes:
        raise errors.UsageError("--Ns must name at least one population size")
    return sizes


def _load_model(path: str, steps):
    if not os.path.isfile(path):
        raise errors.UsageError(f"model file not found: {path}")
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise errors.ModelFormatError(
                f"model file {path} is not valid JSON: {exc}") from exc
    params = load_model_dict(doc)
    if steps is not None:
        if steps < 1:
            raise errors.UsageError(f"--steps must be >= 1, got {steps}")
        params = dataclasses.replace(
            params, horizon=TimeGrid(T=params.horizon.T, n_steps=steps))
    return params, validate(params)


def _json_safe(obj):
    """Replace non-finite floats with null so documents stay strict JSON."""
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        val = float(obj)
        return val if math.isfinite(val) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    return obj


# ---------------------------------------------------------------------------
# Subcommand handlers (each returns a RunManifest or None)
# ---------------------------------------------------------------------------

def _cmd_validate(args):
    params, model = _load_model(args.model, args.steps)
    grid = model.grid
    lines = [
        f"dims: n={model.n} k={model.k}",
        f"grid: T={grid.T:g} n_steps={grid.n_steps} dt={grid.dt:g} "
        f"nodes={grid.n_nodes}",
        "shape and symmetry checks: passed",
        "R positive definite on all nodes: yes",
        "Q, M positive semidefinite: yes",
        "H invertible on all nodes: yes",
        "I - K invertible: yes",
        f"affine extension: {'present' if model.has_affine else 'absent'}",
    ]
    report = check_monotonicity(model, solve_P(model))
    lines.append(
        "coupling monotonicity (sufficient condition, reported only): "
        f"lambda1_bound={report.lambda1_bound:.6g} "
        f"lambda2_bound={report.lambda2_bound:.6g} "
        f"satisfied={report.satisfied}")
    print("\n".join(lines))
    return None


def _cmd_riccati(args):
    start = time.perf_counter()
    params, model = _load_model(args.model, args.steps)
    os.makedirs(args.out_dir, exist_ok=True)
    P = solve_P(model)
    Pi = solve_Pi(model)
    outputs = [
        {"path": "P.csv",
         "rows": write_path_csv(os.path.join(args.out_dir, "P.csv"), "P", P)},
        {"path": "Pi.csv",
         "rows": write_path_csv(os.path.join(args.out_dir, "Pi.csv"), "Pi",
                                Pi)},
    ]
    digest = config_digest({"subcommand": "riccati",
                            "model": dump_model_dict(params)})
    manifest = RunManifest("riccati", digest, tuple(outputs),
                           time.perf_counter() - start)
    write_manifest(os.path.join(args.out_dir, "manifest.json"), manifest)
    return manifest


def _cmd_cc(args):
    start = time.perf_counter()
    params, model = _load_model(args.model, args.steps)
    os.makedirs(args.out_dir, exist_ok=True)
    P = solve_P(model)
    sol = solve_cc_auto(model, P)
    outputs = []
    for name, path_obj in (("m", sol.m), ("X", sol.X), ("psi", sol.psi)):
        rows = write_path_csv(os.path.join(args.out_dir, f"{name}.csv"),
                              name, path_obj)
        outputs.append({"path": f"{name}.csv", "rows": rows})
    residuals = dict(sol.residual)
    residuals["method"] = sol.method
    residuals["iterations"] = sol.iterations
    write_json(os.path.join(args.out_dir, "residuals.json"),
               _json_safe(residuals))
    outputs.append({"path": "residuals.json", "rows": None})
    digest = config_digest({"subcommand": "cc",
                            "model": dump_model_dict(params)})
    manifest = RunManifest("cc", digest, tuple(outputs),
                           time.perf_counter() - start)
    write_manifest(os.path.join(args.out_dir, "manifest.json"), manifest)
    return manifest


def _cmd_simulate(args):
    start = time.perf_counter()
    params, model = _load_model(args.model, args.steps)
    seed = resolve_seed(args.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    P = solve_P(model)
    Pi = solve_Pi(model)
    cc = solve_cc_auto(model, P)
    cfg = SimConfig(N=args.N, seed=seed, grid=model.grid, record_paths=True)
    pop = simulate_population(model, P, Pi, cc, cfg)

    t = model.grid.nodes()
    header = (["agent", "t"]
              + [f"X_{i + 1}" for i in range(model.n)]
              + [f"Xhat_{i + 1}" for i in range(model.n)]
              + [f"u_{j + 1}" for j in range(model.k)])
    blocks = []
    for idx, agent in enumerate(pop.agents, start=1):
        blocks.append(np.column_stack([
            np.full(model.grid.n_nodes, idx), t,
            agent.X.values, agent.Xhat.values, agent.u.values,
        ]))
    rows = write_csv(os.path.join(args.out_dir, "agents.csv"), header,
                     np.vstack(blocks))

    summary = {
        "N": args.N,
        "seed": seed,
        "costs": [float(c) for c in pop.costs],
        "limiting_costs": [float(c) for c in pop.limiting_costs],
        "gap_metrics": _json_safe(pop.gap_metrics),
        "control_avg_sup_gap": float(
            np.max(np.abs(pop.control_avg.values - cc.m.values))),
    }
    write_json(os.path.join(args.out_dir, "summary.json"), summary)
    outputs = [{"path": "agents.csv", "rows": rows},
               {"path": "summary.json", "rows": None}]
    digest = config_digest({"subcommand": "simulate",
                            "model": dump_model_dict(params),
                            "N": args.N, "seed": seed})
    manifest = RunManifest("simulate", digest, tuple(outputs),
                           time.perf_counter() - start)
    write_manifest(os.path.join(args.out_dir, "manifest.json"), manifest)
    return manifest


def _cmd_nash_sweep(args):
    start = time.perf_counter()
    params, model = _load_model(args.model, args.steps)
    seed = resolve_seed(args.seed)
    threads = _resolve_threads(args.threads)
    sizes = _parse_sizes(args.Ns)
    stem = args.out[:-4] if args.out.endswith(".csv") else args.out
    parent = os.path.dirname(stem)
    if parent:
        os.makedirs(parent, exist_ok=True)

    P = solve_P(model)
    Pi = solve_Pi(model)
    cc = solve_cc_auto(model, P)
    report = scaling_sweep(model, P, Pi, cc, sizes, args.replicates, seed,
                           threads=threads)

    csv_rows = [[cell[col] for col in SWEEP_COLUMNS] for cell in report.cells]
    rows = write_csv(stem + ".csv", SWEEP_COLUMNS, csv_rows)
    payload = _json_safe({
        "Ns": list(report.Ns),
        "replicates": args.replicates,
        "seed": seed,
        "replicate_seeds": list(report.replicates),
        "per_N": {"state_gap": report.state_gap.tolist(),
                  "cost_gap": report.cost_gap.tolist(),
                  "avg_gap": report.avg_gap.tolist()},
        "slopes": report.slopes,
    })
    write_json(stem + ".json", payload)
    figures.save_loglog(
        stem + ".png", np.asarray(report.Ns, dtype=float),
        [("state_gap", report.state_gap), ("cost_gap", report.cost_gap),
         ("avg_gap", report.avg_gap)],
        reference_slope=-1.0, ylabel="replicate-mean gap",
        title="Gap decay across population sizes")

    outputs = [{"path": stem + ".csv", "rows": rows},
               {"path": stem + ".json", "rows": None},
               {"path": stem + ".png", "rows": None}]
    digest = config_digest({"subcommand": "nash-sweep",
                            "model": dump_model_dict(params),
                            "Ns": list(sizes),
                            "replicates": args.replicates, "seed": seed})
    return RunManifest("nash-sweep", digest, tuple(outputs),
                       time.perf_counter() - start)


def _cmd_cash_example(args):
    seed = resolve_seed(args.seed)
    threads = _resolve_threads(args.threads)
    return run_cash_experiment(n_steps=args.steps, N=args.N, seed=seed,
                               out_dir=args.out_dir, threads=threads)


_DISPATCH = {
    "validate": _cmd_validate,
    "riccati": _cmd_riccati,
    "cc": _cmd_cc,
    "simulate": _cmd_simulate,
    "nash-sweep": _cmd_nash_sweep,
    "cash-example": _cmd_cash_example,
}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _emit_error(payload: dict) -> None:
    sys.stderr.write(json.dumps(payload) + "\n")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse already printed usage/help; keep its exit code.
        code = exc.code
        return 0 if code in (None, 0) else int(code)
    try:
        manifest = _DISPATCH[args.subcommand](args)
    except errors.UsageError as exc:
        _emit_error(exc.payload())
        return 2
    except errors.LqmfgError as exc:
        _emit_error(exc.payload())
        return 1
    except OSError as exc:
        _emit_error({"error": type(exc).__name__, "module": "cli",
                     "detail": str(exc)})
        return 1
    if manifest is not None:
        print(json.dumps(_json_safe(manifest.stdout_payload()), indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
