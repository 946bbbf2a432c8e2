"""Artifact serialization: 17-significant-digit CSV and atomic file writes."""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

from .hjb import ValueField
from .measures import MeasureFlow
from .mfg import MFGSolution
from .trajectory import Curve

FLOAT_FMT = "%.17g"


def atomic_write_text(path, text: str):
    """Write via a temp file in the same directory, then rename."""
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", text=True)
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv(header: str, columns) -> str:
    rows = np.column_stack(columns)
    lines = [header]
    fmt = ",".join([FLOAT_FMT] * rows.shape[1])
    lines.extend(fmt % tuple(r) for r in rows)
    return "\n".join(lines) + "\n"


def value_csv(field: ValueField) -> str:
    g = field.grid
    if field.is_phase:
        T, X, V = np.meshgrid(g.t, g.x, g.v, indexing="ij")
        return _csv("t,x,v,u", (T.ravel(), X.ravel(), V.ravel(), field.values.ravel()))
    T, X = np.meshgrid(g.t, g.x, indexing="ij")
    return _csv("t,x,u", (T.ravel(), X.ravel(), field.values.ravel()))


def flow_csv(flow: MeasureFlow) -> str:
    """Ensemble rows `t,x,v,w`; marginal flows carry nan in the v column."""
    n_t, n = flow.positions.shape
    T = np.repeat(flow.times, n)
    X = flow.positions.ravel()
    if flow.velocities is None:
        V = np.full(T.shape, np.nan)
    else:
        V = flow.velocities.ravel()
    W = np.tile(flow.weights, n_t)
    return _csv("t,x,v,w", (T, X, V, W))


def curve_csv(curve: Curve) -> str:
    return _csv(
        "t,gamma,dgamma,ddgamma",
        (curve.t, curve.x, curve.velocity, curve.acceleration),
    )


def write_solution_dir(out_dir, solution: MFGSolution, config_dict=None, extra_meta=None):
    """Write value.csv, flow.csv, meta.json for a solver run."""
    os.makedirs(out_dir, exist_ok=True)
    atomic_write_text(os.path.join(out_dir, "value.csv"), value_csv(solution.value))
    atomic_write_text(os.path.join(out_dir, "flow.csv"), flow_csv(solution.flow))
    meta = {
        "kind": solution.kind,
        "eps": solution.value.eps,
        "iterations": solution.iterations,
        "fixed_point_gap": solution.fixed_point_gap,
        "gap_history": list(solution.gap_history),
        "converged": bool(solution.converged),
    }
    if config_dict is not None:
        meta["config"] = config_dict
    if extra_meta:
        meta.update(extra_meta)
    atomic_write_text(
        os.path.join(out_dir, "meta.json"), json.dumps(meta, indent=2, sort_keys=True) + "\n"
    )
