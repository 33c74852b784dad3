"""Trace, sweep and report serialization (CSV with full-precision floats, JSON summaries)."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Optional

import numpy as np

from mlvi_mpc.loop import ClosedLoopTrace
from mlvi_mpc.model import QuadraticIhOracle


def _fmt(v) -> str:
    """``repr`` of a Python float round-trips exactly; ``nan`` marks undefined entries."""
    return repr(float(v))


def trace_columns(trace: ClosedLoopTrace) -> list:
    n = len(trace.states[0])
    m = len(trace.records[0].u) if trace.records else 1
    nw = len(trace.records[0].weights) if trace.records else (3 if trace.config.w0 is None else len(trace.config.w0))
    xs = [f"x{i + 1}" for i in range(n)]
    us = ["u"] if m == 1 else [f"u{i + 1}" for i in range(m)]
    ws = [f"w{i + 1}" for i in range(nw)]
    return ["t", *xs, *us, "l", "V_N", "Vbar_next", "alpha_hat", *ws, "b_t"]


def trace_rows(trace: ClosedLoopTrace) -> list:
    rows = []
    for r in trace.records:
        rows.append([str(r.t), *map(_fmt, r.x), *map(_fmt, r.u), _fmt(r.l), _fmt(r.V_N), _fmt(r.Vbar_next),
                     _fmt(r.alpha_hat), *map(_fmt, r.weights), _fmt(r.b)])
    return rows


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o).__name__}")


def _clean(obj):
    """Replace non-finite floats by ``None`` so the JSON stays standard."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def write_json(path, payload: dict, drop_wall_clock: bool = False):
    payload = _clean(json.loads(json.dumps(payload, default=_json_default)))
    if drop_wall_clock:
        payload.pop("wall_clock_s", None)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=False) + "\n")


def emit_trace(trace: ClosedLoopTrace, path, oracle: Optional[QuadraticIhOracle] = None) -> tuple[Path, Path]:
    """Write ``<path>`` (CSV, one row per applied input) and ``<stem>.summary.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(trace_columns(trace))
        w.writerows(trace_rows(trace))
    summary_path = path.with_suffix(".summary.json")
    summary = trace.summary(oracle)
    if trace.error:
        summary["error"] = trace.error
    write_json(summary_path, summary)
    return path, summary_path


def read_trace(path) -> dict:
    """Parse an emitted trace CSV into ``{column: np.ndarray}`` (``t`` as integers)."""
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    out = {}
    for j, name in enumerate(header):
        col = [row[j] for row in rows]
        out[name] = np.array([int(v) for v in col], dtype=int) if name == "t" else np.array([float(v) for v in col])
    return out


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (str, bool, int, np.integer)):
        return str(v)
    return _fmt(v)


def write_table(path, header: list, rows: list):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])
