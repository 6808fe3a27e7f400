"""CSV emission and parsing for traces, sweeps and reports.

Files are RFC-4180 CSV with a mandatory header row and LF line endings.
Floats are written with ``repr`` so they parse back bit-exactly; missing
values are ``nan`` and unbounded boundaries ``inf``.

Trace columns, for a network of ``L`` layers::

    step, loss, dist_to_pretrained_0..L-1, lambda_value_0..L-1, boundary_0..L-1

Sweep summary columns::

    variant, axis, multiplier, final_loss, final_distance,
    final_distance_0..L-1, diverged, diverged_step

``final_distance`` is the largest per-layer distance.
"""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path
from typing import Iterable

from .trainkit import SweepRun, TraceRecord


def fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return ""
    return str(value)


def to_csv(header: list[str], rows: Iterable[Iterable]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path: str | Path, header: list[str], rows: Iterable[Iterable]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(to_csv(header, rows))
    return path


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def trace_header(n_layers: int) -> list[str]:
    cols = ["step", "loss"]
    for prefix in ("dist_to_pretrained", "lambda_value", "boundary"):
        cols += [f"{prefix}_{i}" for i in range(n_layers)]
    return cols


def trace_rows(trace: list[TraceRecord]) -> list[list]:
    return [
        [rec.step, float(rec.loss), *map(float, rec.dist_to_pretrained), *map(float, rec.lambda_value),
         *map(float, rec.boundary)]
        for rec in trace
    ]


def write_trace(path: str | Path, trace: list[TraceRecord], n_layers: int) -> Path:
    return write_csv(path, trace_header(n_layers), trace_rows(trace))


def parse_trace(path: str | Path) -> list[TraceRecord]:
    rows = read_csv(path)
    if not rows:
        return []
    n = sum(1 for k in rows[0] if k.startswith("dist_to_pretrained_"))
    out = []
    for row in rows:
        out.append(
            TraceRecord(
                int(row["step"]),
                float(row["loss"]),
                tuple(float(row[f"dist_to_pretrained_{i}"]) for i in range(n)),
                tuple(float(row[f"lambda_value_{i}"]) for i in range(n)),
                tuple(float(row[f"boundary_{i}"]) for i in range(n)),
            )
        )
    return out


def sweep_header(n_layers: int) -> list[str]:
    return [
        "variant", "axis", "multiplier", "final_loss", "final_distance",
        *[f"final_distance_{i}" for i in range(n_layers)], "diverged", "diverged_step",
    ]


def sweep_rows(runs: list[SweepRun]) -> list[list]:
    rows = []
    for r in runs:
        dists = [float(x) for x in r.final_distance]
        finite = [x for x in dists if not math.isnan(x)]
        rows.append([str(r.variant), r.axis, float(r.multiplier), float(r.final_loss),
                     max(finite) if finite else math.nan, *dists, r.diverged, r.diverged_step])
    return rows


NORMS_HEADER = ["label", "rows", "cols", "mean_column_norm", "std_column_norm"]


def parse_norms(path: str | Path) -> list[dict]:
    rows = read_csv(path)
    if rows and list(rows[0]) != NORMS_HEADER:
        raise ValueError(f"unexpected norms header {list(rows[0])}")
    return [
        {"label": r["label"], "rows": int(r["rows"]), "cols": int(r["cols"]),
         "mean_column_norm": float(r["mean_column_norm"]), "std_column_norm": float(r["std_column_norm"])}
        for r in rows
    ]


def aligned_table(header: list[str], rows: list[list]) -> str:
    """Plain fixed-width rendering for terminal output."""
    def cell(v):
        if isinstance(v, float):
            return f"{v:.3e}"
        return fmt(v)

    cells = [[cell(v) for v in row] for row in rows]
    widths = [max(len(h), *(len(r[i]) for r in cells)) if cells else len(h) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in cells]
    return "\n".join(lines)
