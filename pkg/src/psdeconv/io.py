"""CSV and JSON serialization for curves, maps and reports.

Series files carry ``voxel_id, time_s, concentration`` and optionally
``row, col``. Times are seconds on disk and minutes in memory. Floats are
written with a fixed format so identical inputs give identical bytes.
"""
from __future__ import annotations

import csv
import json
import math
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .signal_core import CtcRecord, TimeGrid

SCHEMA_PREFIX = "psdeconv"
CTC_COLUMNS = ("voxel_id", "time_s", "concentration")
FLOAT_FMT = "{:.10g}"


class InputFormatError(ValueError):
    """Malformed input file; ``line`` is 1-based and counts the header."""

    def __init__(self, message, path=None, line=None):
        where = f"{path}:{line}: " if line is not None else (f"{path}: " if path else "")
        super().__init__(where + message)
        self.path = path
        self.line = line


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        return FLOAT_FMT.format(x)
    return str(x)


def read_ctc_csv(path, refine: int = 4) -> list[CtcRecord]:
    """Read every voxel from a series CSV; records come back sorted by id."""
    path = Path(path)
    rows = OrderedDict()
    cells = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in CTC_COLUMNS if c not in header]
        if missing:
            raise InputFormatError(f"missing columns {missing}", path, 1)
        for line, row in enumerate(reader, start=2):
            vid = (row.get("voxel_id") or "").strip()
            if not vid:
                raise InputFormatError("empty voxel_id", path, line)
            try:
                ts = float(row["time_s"])
                c = float(row["concentration"])
            except (TypeError, ValueError):
                raise InputFormatError("time_s and concentration must be numbers", path, line) from None
            if not (math.isfinite(ts) and math.isfinite(c)):
                raise InputFormatError("non-finite value", path, line)
            if ts < 0:
                raise InputFormatError("negative time", path, line)
            series = rows.setdefault(vid, [])
            if series and ts <= series[-1][0]:
                raise InputFormatError(f"time_s not increasing for voxel {vid!r}", path, line)
            series.append((ts, c))
            if vid not in cells and row.get("row") not in (None, "") and row.get("col") not in (None, ""):
                try:
                    cells[vid] = (int(row["row"]), int(row["col"]))
                except ValueError:
                    raise InputFormatError("row and col must be integers", path, line) from None
    records = []
    for vid in sorted(rows):
        arr = np.array(rows[vid], dtype=float)
        if arr.shape[0] < 2:
            raise InputFormatError(f"voxel {vid!r} has fewer than two samples", path)
        grid = TimeGrid.from_observations(arr[:, 0] / 60.0, refine=refine)
        r, c = cells.get(vid, (None, None))
        records.append(CtcRecord(voxel_id=vid, grid=grid, values=arr[:, 1], row=r, col=c))
    return records


def write_ctc_csv(path, records) -> None:
    with_cells = any(r.row is not None for r in records)
    header = list(CTC_COLUMNS) + (["row", "col"] if with_cells else [])
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for rec in records:
            for tau, c in zip(rec.grid.tau, rec.values):
                row = [rec.voxel_id, fmt(tau * 60.0), fmt(c)]
                if with_cells:
                    row += [fmt(rec.row), fmt(rec.col)]
                w.writerow(row)


def write_table(path, header, rows) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_table(path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        # JSON has no NaN; null marks undefined values
        return float(fmt(x)) if math.isfinite(x) else None
    return obj


def write_json(path, kind: str, payload: dict) -> None:
    doc = {"schema": f"{SCHEMA_PREFIX}.{kind}/1", **_jsonable(payload)}
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    Path(path).write_text(text, encoding="utf-8")


def read_json(path, kind: str | None = None) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputFormatError(f"invalid JSON ({exc.msg})", path, exc.lineno) from None
    if kind is not None and not str(doc.get("schema", "")).startswith(f"{SCHEMA_PREFIX}.{kind}/"):
        raise InputFormatError(f"expected a {kind} document, got schema {doc.get('schema')!r}", path)
    return doc
