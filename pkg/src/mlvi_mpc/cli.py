"""Command-line front end.

Subcommands: ``run``, ``sweep``, ``compare``, ``mlvi-table``, ``check-thm1``.
Settings come from an optional INI file (``--config``) and are overridden by
flags. Exit codes: 0 ok, 2 config error, 3 solver abort, 4 I/O error; failures
print a JSON object to stderr.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from mlvi_mpc import analysis
from mlvi_mpc.errors import ContractViolation, MlviMpcError, SolverAbort
from mlvi_mpc.fh_solver import SolverOptions
from mlvi_mpc.loop import RunConfig, run
from mlvi_mpc.model import build_model
from mlvi_mpc.traceio import emit_trace, write_json, write_table

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4
OUTPUT_ENV = "MLVI_MPC_OUTPUT_DIR"
DEFAULT_OUTPUT = "mlvi_out"


class ConfigError(MlviMpcError):
    """Invalid configuration file or command-line arguments."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _vector(text: str) -> tuple:
    try:
        return tuple(float(v) for v in str(text).replace(" ", "").split(",") if v != "")
    except ValueError:
        raise ConfigError(f"cannot parse vector {text!r}") from None


def _matrix(text: str) -> list:
    return [list(_vector(row)) for row in str(text).split(";")]


def parse_grid(text: str, min_points: int = 2) -> tuple[float, float, int]:
    """``lo:hi:n`` -> ``(lo, hi, n)``. With ``min_points=1``, ``x:x:1`` is the single point ``x``."""
    try:
        lo, hi, n = str(text).split(":")
        lo, hi, n = float(lo), float(hi), int(n)
    except ValueError:
        raise ConfigError(f"grid must look like lo:hi:n, got {text!r}") from None
    if min_points <= 1 and n == 1 and hi == lo:
        return lo, hi, n
    if n < max(min_points, 2) or not hi > lo:
        raise ConfigError(f"grid needs hi > lo and at least {max(min_points, 2)} points per axis")
    return lo, hi, n


# config key -> (RunConfig field, parser)
_RUN_KEYS = {
    "model": ("model", str),
    "x0": ("x0", _vector),
    "n": ("horizon", int),
    "horizon": ("horizon", int),
    "basis": ("basis", str),
    "w0": ("w0", _vector),
    "abar": ("abar", float),
    "eta": ("eta", lambda s: None if str(s).strip().lower() in ("", "auto", "none") else float(s)),
    "eps_w": ("eps_w", float),
    "fit_max_iters": ("fit_max_iters", int),
    "tail_input": ("tail_input", float),
    "n_sim": ("n_sim", int),
    "stop_radius": ("stop_radius", float),
    "mode": ("mode", str),
    "v_next_policy": ("v_next_policy", str),
}
_SOLVER_KEYS = {"tol_grad": float, "max_iter": int, "u_bound": float, "fd_step": float}


def load_config(path: Optional[str]) -> configparser.ConfigParser:
    cfg = configparser.ConfigParser()
    if path:
        try:
            with open(path) as fh:
                cfg.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"config parse error: {exc}") from None
    return cfg


def build_run_config(cfg: configparser.ConfigParser, args: argparse.Namespace, require_x0: bool = True) -> RunConfig:
    values: dict = {}
    if cfg.has_section("run"):
        for key, raw in cfg.items("run"):
            if key not in _RUN_KEYS:
                raise ConfigError(f"unknown key [run] {key}")
            field_name, conv = _RUN_KEYS[key]
            try:
                values[field_name] = conv(raw)
            except ValueError:
                raise ConfigError(f"bad value for [run] {key}: {raw!r}") from None
    if cfg.has_section("model.params"):
        # configparser lowercases keys; single-letter matrix names (A, B, P, Q, R) are upper case
        values["model_params"] = {(k.upper() if len(k) == 1 else k): _matrix(v)
                                  for k, v in cfg.items("model.params")}
    flag_map = {
        "model": "model", "x0": "x0", "N": "horizon", "basis": "basis", "abar": "abar", "eta": "eta",
        "eps_w": "eps_w", "tail_input": "tail_input", "n_sim": "n_sim", "stop_radius": "stop_radius",
        "mode": "mode", "v_next": "v_next_policy", "w0": "w0",
    }
    for flag, field_name in flag_map.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[field_name] = v
    solver = {}
    if cfg.has_section("solver"):
        for key, raw in cfg.items("solver"):
            if key not in _SOLVER_KEYS:
                raise ConfigError(f"unknown key [solver] {key}")
            solver[key] = _SOLVER_KEYS[key](raw)
    if solver:
        values["solver"] = SolverOptions(**solver)
    if "x0" not in values:
        if require_x0:
            raise ConfigError("an initial state is required (--x0 or [run] x0)")
        values["x0"] = (0.0, 0.0)
    try:
        return RunConfig(**values)
    except (ContractViolation, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def output_dir(cfg: configparser.ConfigParser, args: argparse.Namespace) -> Path:
    d = args.out_dir or cfg.get("output", "dir", fallback=None) or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT
    return Path(d)


def _section_value(cfg, section, key, conv, flag_value=None, default=None):
    if flag_value is not None:
        return flag_value
    if cfg.has_option(section, key):
        try:
            return conv(cfg.get(section, key))
        except ValueError:
            raise ConfigError(f"bad value for [{section}] {key}") from None
    return default


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _print_step(rec, out=None):
    print(json.dumps({
        "t": rec.t, "x": rec.x.tolist(), "u": rec.u.tolist(), "l": rec.l, "V_N": rec.V_N,
        "alpha_hat": None if rec.alpha_hat != rec.alpha_hat else rec.alpha_hat,
        "w_next": rec.weights_next.tolist(), "fallback": rec.fallback,
    }), file=out or sys.stdout)


def cmd_run(args, cfg) -> int:
    config = build_run_config(cfg, args)
    model = build_model(config.model, config.model_params)
    trace = run(config, model)
    if args.verbose:
        for rec in trace.records:
            _print_step(rec)
    out = output_dir(cfg, args)
    csv_path, summary_path = emit_trace(trace, out / f"{args.name}.csv", model.oracle)
    summary = json.loads(summary_path.read_text())
    print(json.dumps(summary))
    if trace.status != "ok":
        raise SolverAbort(trace.error)
    return EXIT_OK


_SWEEP_HEADER = ["x1", "x2", "mode", "status", "J_inf", "V_inf", "suboptimality", "estimate", "alpha0", "sum_b",
                 "certificate_valid", "steps", "error"]


def _sweep_rows(table: analysis.SweepTable) -> list:
    return [[c.x0[0], c.x0[1], c.mode, c.status, c.J_inf, c.v_inf, c.suboptimality, c.estimate, c.alpha0, c.sum_b,
             c.certificate_valid, c.steps, c.error] for c in table.cells]


def _grid(cfg, args, default: str) -> tuple:
    return parse_grid(_section_value(cfg, "grid", "range", str, args.grid, default), min_points=1)


def _jobs(cfg, args) -> int:
    return int(_section_value(cfg, "grid", "jobs", int, args.jobs, 1))


def cmd_sweep(args, cfg) -> int:
    base = build_run_config(cfg, args, require_x0=False)
    lo, hi, n = _grid(cfg, args, "-4:4:9")
    table = analysis.sweep(analysis.grid_configs(base, lo, hi, n), jobs=_jobs(cfg, args))
    out = output_dir(cfg, args)
    write_table(out / f"{args.name}.csv", _SWEEP_HEADER, _sweep_rows(table))
    summary = {
        "N": base.horizon, "mode": base.mode, "grid": [lo, hi, n], "cells": len(table.cells),
        "min_suboptimality": table.min(), "mean_suboptimality": table.mean(),
        "failures": [list(c.x0) for c in table.failures()],
    }
    write_json(out / f"{args.name}.summary.json", summary)
    print(json.dumps(summary))
    return EXIT_SOLVER if table.failures() else EXIT_OK


def cmd_compare(args, cfg) -> int:
    base = build_run_config(cfg, args, require_x0=False)
    lo, hi, n = _grid(cfg, args, "-1:1:9")
    comp = analysis.compare(base, lo, hi, n, jobs=_jobs(cfg, args))
    imp = comp.improvements()
    rows = []
    for a, s, r in zip(comp.adaptive.cells, comp.static.cells, imp):
        rows.append([a.x0[0], a.x0[1], a.J_inf, s.J_inf, a.suboptimality, s.suboptimality, r])
    out = output_dir(cfg, args)
    write_table(out / f"{args.name}.csv",
                ["x1", "x2", "J_mlvi", "J_static", "subopt_mlvi", "subopt_static", "improvement"], rows)
    finite = imp[np.isfinite(imp)]
    summary = {
        "N": base.horizon, "grid": [lo, hi, n], "cells": len(rows),
        "dominates": bool(np.all(finite >= 0.0)),
        "min_improvement": float(finite.min()) if finite.size else None,
        "cells_improved_over_1pct": int(np.sum(finite > 0.01)),
        "failures": [list(c.x0) for c in comp.adaptive.failures() + comp.static.failures()],
    }
    write_json(out / f"{args.name}.summary.json", summary)
    print(json.dumps(summary))
    return EXIT_SOLVER if summary["failures"] else EXIT_OK


def cmd_mlvi_table(args, cfg) -> int:
    base = build_run_config(cfg, args, require_x0=False)
    model = build_model(base.model, base.model_params)
    lo, hi, n = parse_grid(_section_value(cfg, "tabular", "grid", str, args.grid, "-1:1:11"))
    N = int(_section_value(cfg, "tabular", "n", int, args.N, 2))
    iters = int(_section_value(cfg, "tabular", "iterations", int, args.iterations, 3))
    penalty = None if model.oracle is None else model.oracle.P
    fns = analysis.tabular_mlvi(model, analysis.TabularValueFn.zeros(lo, hi, n, penalty), N, iters)
    nodes = fns[0].nodes()
    v_inf = None if model.oracle is None else np.array([model.oracle.cost(x) for x in nodes])
    rows = []
    for i, f in enumerate(fns):
        for k, (x, v, fl) in enumerate(zip(nodes, f.values.ravel(), f.flags.ravel())):
            rows.append([i, x[0], x[1], v, int(fl), None if v_inf is None else v_inf[k]])
    out = output_dir(cfg, args)
    write_table(out / f"{args.name}.csv", ["iteration", "x1", "x2", "value", "flag", "V_inf"], rows)
    diffs = [float(np.min(b.values - a.values)) for a, b in zip(fns[1:], fns[2:])]
    summary = {
        "N": N, "grid": [lo, hi, n], "iterations": iters,
        "min_successive_increase": diffs,
        "monotone": bool(all(d >= -1e-7 for d in diffs)),
        "max_excess_over_oracle": None if v_inf is None else
        [float(np.max(f.values.ravel() - v_inf)) for f in fns[1:]],
        "interpolation_bound": 10.0 * fns[0].spacing ** 2,
        "flagged_nodes": [int(np.count_nonzero(f.flags)) for f in fns[1:]],
    }
    write_json(out / f"{args.name}.summary.json", summary)
    print(json.dumps(summary))
    return EXIT_OK


def cmd_check_thm1(args, cfg) -> int:
    config = build_run_config(cfg, args)
    model = build_model(config.model, config.model_params)
    trace = run(config, model)
    trace.raise_for_status()
    alpha = _section_value(cfg, "thm1", "alpha", float, args.alpha)
    if alpha is None:
        raise ConfigError("--alpha is required")
    variant = _section_value(cfg, "thm1", "variant", str, args.variant, "printed")
    gamma = _section_value(cfg, "thm1", "gamma", float, args.gamma)
    try:
        if gamma is None:
            best, reports = analysis.gamma_scan(trace, alpha, variant=variant, oracle=model.oracle)
            payload = {"alpha": alpha, "variant": variant, "best_gamma": best,
                       "scan": [{"gamma": r.gamma, "valid": r.valid, "oracle_check": r.oracle_check}
                                for r in reports]}
        else:
            payload = analysis.check_theorem1(trace, alpha, gamma, variant, model.oracle).to_dict()
    except ContractViolation as exc:
        raise ConfigError(str(exc)) from None
    out = output_dir(cfg, args)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / f"{args.name}.json", payload)
    print(json.dumps({k: payload[k] for k in payload if k not in ("c", "e", "slack", "satisfied")}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--out-dir", dest="out_dir", help=f"output directory (default ${OUTPUT_ENV} or ./{DEFAULT_OUTPUT})")
    common.add_argument("--name", help="output file stem")
    common.add_argument("--model")
    common.add_argument("--x0", type=_vector)
    common.add_argument("--N", type=int, help="prediction horizon (number of inputs)")
    common.add_argument("--basis")
    common.add_argument("--w0", type=_vector)
    common.add_argument("--abar", type=float)
    common.add_argument("--eta", type=float)
    common.add_argument("--eps-w", dest="eps_w", type=float)
    common.add_argument("--tail-input", dest="tail_input", type=float)
    common.add_argument("--n-sim", dest="n_sim", type=int)
    common.add_argument("--stop-radius", dest="stop_radius", type=float)
    common.add_argument("--mode", choices=("mlvi_mpc", "static_mpc"))
    common.add_argument("--v-next", dest="v_next", choices=("upper", "sharp"))

    parser = _Parser(prog="mlvi-mpc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("run", parents=[common], help="single closed-loop run")
    p.add_argument("-v", "--verbose", action="store_true", help="print the applied input and new weights per step")
    p.set_defaults(func=cmd_run, default_name="trace")
    for name, func, default_name, help_ in (("sweep", cmd_sweep, "sweep", "suboptimality over a grid of x0"),
                                           ("compare", cmd_compare, "compare", "MLVI-MPC versus static MPC on a grid")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--grid", help="lo:hi:n per axis")
        p.add_argument("--jobs", type=int)
        p.set_defaults(func=func, default_name=default_name)
    p = sub.add_parser("mlvi-table", parents=[common], help="tabular multi-step value iteration")
    p.add_argument("--grid", help="lo:hi:n per axis (default -1:1:11)")
    p.add_argument("--iterations", type=int)
    p.set_defaults(func=cmd_mlvi_table, default_name="tabular")
    p = sub.add_parser("check-thm1", parents=[common], help="convolved-decay certificate along a run")
    p.add_argument("--alpha", type=float)
    p.add_argument("--gamma", type=float, help="omit to scan gamma")
    p.add_argument("--variant", choices=analysis.E_VARIANTS)
    p.set_defaults(func=cmd_check_thm1, default_name="thm1")
    return parser


def _fail(code: int, exc: BaseException) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}), file=sys.stderr)
    return code


_NEGATIVE_VALUE_FLAGS = ("--x0", "--w0", "--grid")


def _join_negative_values(argv: list) -> list:
    """``--grid -1:1:9`` -> ``--grid=-1:1:9`` so argparse does not read the value as an option."""
    out, i = [], 0
    while i < len(argv):
        tok = argv[i]
        if tok in _NEGATIVE_VALUE_FLAGS and i + 1 < len(argv) and argv[i + 1].startswith("-"):
            out.append(f"{tok}={argv[i + 1]}")
            i += 2
        else:
            out.append(tok)
            i += 1
    return out


def main(argv=None) -> int:
    argv = _join_negative_values(list(sys.argv[1:] if argv is None else argv))
    try:
        args = build_parser().parse_args(argv)
        args.name = args.name or args.default_name
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except (ConfigError, ContractViolation) as exc:
        return _fail(EXIT_CONFIG, exc)
    except SolverAbort as exc:
        return _fail(EXIT_SOLVER, exc)
    except OSError as exc:
        return _fail(EXIT_IO, exc)
    except MlviMpcError as exc:
        return _fail(EXIT_SOLVER, exc)


if __name__ == "__main__":
    sys.exit(main())
