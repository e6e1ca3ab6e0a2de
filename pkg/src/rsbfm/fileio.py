"""CSV and key=value config files."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import StructuralError

CSV_FORMAT_VERSION = 1


def format_float(x) -> str:
    """Round-trip exact decimal text (17 significant digits)."""
    x = float(x)
    if math.isnan(x) or math.isinf(x):
        return repr(x)
    return format(x, ".17g")


def _parse_cell(text: str, row: int, col: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise StructuralError(f"row {row}, column {col}: non-numeric cell {text!r}") from None
    if not math.isfinite(value):
        raise StructuralError(f"row {row}, column {col}: non-finite value {text!r}")
    return value


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def read_table(path) -> tuple[np.ndarray, Optional[list]]:
    """Numeric CSV to (matrix, column names).

    A first line with any non-numeric cell is taken as the header.  Row and
    column numbers in error messages are 1-based file coordinates.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [(i, r) for i, r in enumerate(csv.reader(fh), start=1) if any(c.strip() for c in r)]
    if not rows:
        raise StructuralError(f"{path}: no data")
    names = None
    first_line, first = rows[0]
    if not all(_is_number(c.strip()) for c in first):
        names = [c.strip() for c in first]
        rows = rows[1:]
    if not rows:
        raise StructuralError(f"{path}: header but no data rows")
    width = len(names) if names is not None else len(rows[0][1])
    out = np.empty((len(rows), width))
    for r, (line, cells) in enumerate(rows):
        if len(cells) != width:
            raise StructuralError(f"row {line}: expected {width} columns, found {len(cells)}")
        for c, cell in enumerate(cells):
            out[r, c] = _parse_cell(cell.strip(), line, c + 1)
    return out, names


def write_table(path, matrix, names=None) -> Path:
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if names is not None:
            writer.writerow(names)
        for row in matrix:
            writer.writerow([format_float(v) for v in row])
    return path


def write_records(path, columns, records) -> Path:
    """CSV with a header; floats are written round-trip exact, None as empty."""
    path = Path(path)

    def cell(v):
        if v is None:
            return ""
        if isinstance(v, (float, np.floating)):
            return format_float(v)
        return str(v)

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for rec in records:
            writer.writerow([cell(rec.get(c)) for c in columns])
    return path


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n",
                    encoding="utf-8")
    return path


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; '#' starts a comment.  Values stay strings."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise StructuralError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if not key:
                raise StructuralError(f"{path}:{lineno}: empty key")
            values[key.replace("-", "_")] = value
    return values
