"""Trial tables: one row per trial plus per-setting aggregate rows, as CSV or JSON.

Column order (fixed)::

    kind, setting, shape_id, iteration, n_landmarks, rmse_mm,
    axis_deviation_deg, converged, seed, baseline_rmse_mm, flag, view,
    n_trials, rmse_median, rmse_iqr, rmse_mean, rmse_std,
    axis_median, axis_iqr, axis_mean, axis_std

Trial rows leave the aggregate columns empty. Aggregate rows have
``shape_id = "*"`` and ``iteration = "aggregate"``; ``view`` is
``"signed"`` for the per-setting group and ``"magnitude"`` for the
``|setting|`` regrouping emitted for displacement experiments. Flagged
trials whose flag starts with ``skipped`` carry empty metrics and are
left out of aggregates; other flags are notes on otherwise valid trials.
"""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import numpy as np

from ..exceptions import ArgumentError
from ..mesh.io import atomic_write_bytes

TRIAL_COLUMNS = [
    "kind", "setting", "shape_id", "iteration", "n_landmarks", "rmse_mm",
    "axis_deviation_deg", "converged", "seed", "baseline_rmse_mm", "flag",
]
AGGREGATE_COLUMNS = [
    "view", "n_trials", "rmse_median", "rmse_iqr", "rmse_mean", "rmse_std",
    "axis_median", "axis_iqr", "axis_mean", "axis_std",
]
COLUMNS = TRIAL_COLUMNS + AGGREGATE_COLUMNS


def _stats(values):
    v = np.asarray([x for x in values if x is not None and not math.isnan(x)], dtype=np.float64)
    if v.size == 0:
        return [None] * 4
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    std = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return [float(med), float(q3 - q1), float(v.mean()), std]


def _aggregate(kind, setting, view, group):
    valid = [t for t in group if not t.flag.startswith("skipped")]
    row = dict.fromkeys(COLUMNS)
    row.update(kind=kind, setting=setting, shape_id="*", iteration="aggregate", view=view,
               n_trials=len(valid), flag="")
    row["n_landmarks"] = group[0].n_landmarks if len({t.n_landmarks for t in group}) == 1 else None
    row["converged"] = all(t.converged for t in group)
    row["seed"] = group[0].seed
    row["rmse_median"], row["rmse_iqr"], row["rmse_mean"], row["rmse_std"] = _stats([t.rmse_mm for t in valid])
    (row["axis_median"], row["axis_iqr"], row["axis_mean"],
     row["axis_std"]) = _stats([t.axis_deviation_deg for t in valid])
    return row


def report_rows(results):
    """Rows (dicts keyed by :data:`COLUMNS`) in emission order."""
    results = list(results)
    if not results:
        raise ArgumentError("no results to report")
    rows = []
    for t in results:
        row = dict.fromkeys(COLUMNS)
        row.update({c: getattr(t, c) for c in TRIAL_COLUMNS})
        for c in ("rmse_mm", "axis_deviation_deg", "baseline_rmse_mm"):
            if row[c] is not None and math.isnan(row[c]):
                row[c] = None
        rows.append(row)
    groups = {}
    for t in results:
        groups.setdefault((t.kind, t.setting), []).append(t)
    for (kind, setting), group in groups.items():
        rows.append(_aggregate(kind, setting, "signed", group))
    if any(t.kind == "displacement" for t in results):
        mags = {}
        for t in results:
            if t.kind == "displacement":
                mags.setdefault(abs(t.setting), []).append(t)
        for mag in sorted(mags):
            rows.append(_aggregate("displacement", mag, "magnitude", mags[mag]))
    return rows


def _csv_value(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def render_csv(rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        w.writerow([_csv_value(r[c]) for c in COLUMNS])
    return buf.getvalue().encode("utf-8")


def render_json(rows, metadata=None) -> bytes:
    doc = {"columns": COLUMNS, "rows": [[r[c] for c in COLUMNS] for r in rows], "metadata": metadata or {}}
    return (json.dumps(doc, indent=1, sort_keys=False, allow_nan=False) + "\n").encode("utf-8")


def emit_report(results, path, format=None, metadata=None):
    """Write ``results`` to ``path`` as CSV or JSON (inferred from the suffix when ``format`` is None).

    CSV output carries ``metadata`` in a sibling ``<name>.meta.json``.
    """
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    rows = report_rows(results)
    if fmt == "csv":
        atomic_write_bytes(path, render_csv(rows))
        if metadata is not None:
            meta = path.with_name(path.stem + ".meta.json")
            atomic_write_bytes(meta, (json.dumps(metadata, indent=2, sort_keys=True) + "\n").encode())
    elif fmt == "json":
        atomic_write_bytes(path, render_json(rows, metadata))
    else:
        raise ArgumentError(f"unknown report format {fmt!r} (use csv or json)")
    return rows


def read_csv_rows(path):
    """Parse a report CSV back into typed rows (helper for checks and tests)."""
    out = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            row = {}
            for c in COLUMNS:
                v = rec[c]
                if v == "":
                    row[c] = None
                elif v in ("true", "false"):
                    row[c] = v == "true"
                else:
                    try:
                        row[c] = int(v)
                    except ValueError:
                        try:
                            row[c] = float(v)
                        except ValueError:
                            row[c] = v
            out.append(row)
    return out
