"""Serialization of solver results: ``result.json``, ``trace.csv`` and plot tables."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict
from pathlib import Path
from typing import Any, Hashable, Iterable, Sequence

import numpy as np

from .hedge import SimplexPoint, SolverConfig, SolverResult

SCHEMA_VERSION = 1
TRACE_VECTOR_LIMIT = 32


def _jsonable(x: Any) -> Any:
    if isinstance(x, (tuple, list)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x.tolist()]
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return None if math.isnan(x) else x
    return x


def _tupled(x: Any) -> Hashable:
    """Undo JSON's tuple-to-list conversion of theta ids."""
    if isinstance(x, list):
        return tuple(_tupled(v) for v in x)
    return x


def _float(x: Any) -> float:
    return math.nan if x is None else float(x)


def result_to_dict(result: SolverResult) -> dict[str, Any]:
    return {
        "p_epsilon": _jsonable(result.p_epsilon.weights),
        "lfd_support": [[_jsonable(theta), int(n)] for theta, n in result.lfd_support],
        "v_bar_epsilon": result.v_bar_epsilon,
        "lower_bound": _jsonable(result.lower_bound),
        "upper_bound": _jsonable(result.upper_bound),
        "epochs_run": result.epochs_run,
        "scheduled_epochs": result.scheduled_epochs,
        "eta": result.eta,
        "delta_max": result.delta_max,
        "certified": result.certified,
        "in_expectation": result.in_expectation,
        "stopped_early": result.stopped_early,
        "config": asdict(result.config),
    }


def result_from_dict(doc: dict[str, Any]) -> SolverResult:
    return SolverResult(
        p_epsilon=SimplexPoint(np.array(doc["p_epsilon"], dtype=float)),
        lfd_support=tuple((_tupled(theta), int(n)) for theta, n in doc["lfd_support"]),
        v_bar_epsilon=float(doc["v_bar_epsilon"]),
        lower_bound=_float(doc["lower_bound"]),
        upper_bound=_float(doc["upper_bound"]),
        epochs_run=int(doc["epochs_run"]),
        scheduled_epochs=int(doc["scheduled_epochs"]),
        eta=float(doc["eta"]),
        delta_max=float(doc["delta_max"]),
        certified=bool(doc["certified"]),
        in_expectation=bool(doc["in_expectation"]),
        stopped_early=bool(doc["stopped_early"]),
        config=SolverConfig(**doc["config"]),
    )


def write_result(
    path: str | Path, result: SolverResult, extra: dict[str, Any] | None = None
) -> None:
    """Write a versioned ``result.json``; ``extra`` holds problem metadata."""
    doc = {"schema_version": SCHEMA_VERSION, "result": result_to_dict(result)}
    if extra:
        doc.update(_jsonable_tree(extra))
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, allow_nan=False)
        fh.write("\n")


def _jsonable_tree(x: Any) -> Any:
    if isinstance(x, dict):
        return {str(k): _jsonable_tree(v) for k, v in x.items()}
    if isinstance(x, (tuple, list, np.ndarray)):
        return [_jsonable_tree(v) for v in (x.tolist() if isinstance(x, np.ndarray) else x)]
    return _jsonable(x)


def read_result(path: str | Path) -> SolverResult:
    with open(path) as fh:
        doc = json.load(fh)
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValueError(f"unsupported result schema_version {version!r}")
    return result_from_dict(doc["result"])


def results_equal(a: SolverResult, b: SolverResult) -> bool:
    """Field-wise equality treating NaN bounds as equal."""

    def same(x: float, y: float) -> bool:
        return (math.isnan(x) and math.isnan(y)) or x == y

    return (
        a.p_epsilon == b.p_epsilon
        and a.lfd_support == b.lfd_support
        and same(a.lower_bound, b.lower_bound)
        and same(a.upper_bound, b.upper_bound)
        and a.v_bar_epsilon == b.v_bar_epsilon
        and (a.epochs_run, a.scheduled_epochs, a.eta, a.delta_max)
        == (b.epochs_run, b.scheduled_epochs, b.eta, b.delta_max)
        and (a.certified, a.in_expectation, a.stopped_early)
        == (b.certified, b.in_expectation, b.stopped_early)
        and a.config == b.config
    )


def write_trace(path: str | Path, result: SolverResult) -> None:
    """Per-epoch CSV; iterates ``p_t`` are included for small menus while still in the trace window."""
    trace = result.trace
    I = len(result.p_epsilon)
    with_vectors = I <= TRACE_VECTOR_LIMIT
    header = ["schema_version", "epoch", "achieved_value", "delta", "theta_id", "lower_bound", "upper_bound"]
    if with_vectors:
        header += [f"p_{i + 1}" for i in range(I)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        if trace is None:
            return
        gaps = {t: (lo, hi) for t, lo, hi in trace.gap_checks}
        for rec in trace.records():
            lo, hi = gaps.get(rec.epoch, ("", ""))
            row = [
                SCHEMA_VERSION,
                rec.epoch,
                repr(rec.achieved_value),
                repr(rec.delta),
                json.dumps(_jsonable(rec.theta_id)),
                lo if lo == "" else repr(lo),
                hi if hi == "" else repr(hi),
            ]
            if with_vectors:
                row += [""] * I if rec.p is None else [repr(float(v)) for v in rec.p]
            w.writerow(row)


def write_table(path: str | Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["schema_version", *header])
        for row in rows:
            w.writerow([SCHEMA_VERSION, *[repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row]])
