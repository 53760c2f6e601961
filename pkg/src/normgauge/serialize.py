"""Deterministic JSON and CSV writers.

Model bundles must survive a save/load round trip bit-for-bit, so every float
is written with enough decimal digits to reconstruct the exact IEEE-754 double:
JSON values use 17 significant digits, CSV cells use repr() (shortest exact
form). Nothing here writes timestamps or other run-dependent noise.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import InputError, SchemaError


def format_float17(x: float) -> str:
    """Decimal text with 17 significant digits; parses back to the same double."""
    if not math.isfinite(x):
        raise ValueError(f"non-finite value cannot be serialized: {x!r}")
    return format(float(x), ".16e")


def _render(obj: Any, indent: int, level: int) -> str:
    # stdlib json hardcodes float.__repr__ in both encoders, so floats are
    # rendered here to guarantee the 17-significant-digit contract
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return format_float17(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        pad = " " * (indent * (level + 1))
        inner = (",\n" + pad).join(_render(v, indent, level + 1) for v in obj)
        return "[\n" + pad + inner + "\n" + " " * (indent * level) + "]"
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        pad = " " * (indent * (level + 1))
        items = (",\n" + pad).join(
            f"{json.dumps(str(k))}: {_render(v, indent, level + 1)}"
            for k, v in obj.items()
        )
        return "{\n" + pad + items + "\n" + " " * (indent * level) + "}"
    raise TypeError(f"cannot serialize object of type {type(obj).__name__}")


def dump_json(obj: Any, path: str | Path, indent: int = 2) -> None:
    """Write obj as JSON with floats at 17 significant digits."""
    Path(path).write_text(_render(obj, indent, 0) + "\n", encoding="utf-8")


def load_json(path: str | Path) -> Any:
    path = Path(path)
    if not path.exists():
        raise InputError(f"file not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"invalid JSON in {path}: {exc}") from None


def format_cell(value: Any) -> str:
    """Canonical CSV cell text: repr for floats, empty string for missing."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        return "" if math.isnan(v) else repr(v)
    return str(value)


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(header))
        for row in rows:
            writer.writerow([format_cell(v) for v in row])


def write_matrix_csv(
    path: str | Path,
    ids: Sequence[str],
    columns: Sequence[str],
    values: np.ndarray,
) -> None:
    """Write an id-keyed numeric matrix: header `id,<col>,...`, one row per id."""
    values = np.asarray(values, dtype=float)
    if values.shape != (len(ids), len(columns)):
        raise ValueError(
            f"matrix shape {values.shape} does not match "
            f"{len(ids)} ids x {len(columns)} columns"
        )
    write_csv(path, ["id", *columns], ([sid, *row] for sid, row in zip(ids, values)))


def read_matrix_csv(path: str | Path) -> tuple[list[str], list[str], np.ndarray]:
    """Read an id-keyed numeric matrix; returns (ids, columns, values)."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "id":
            raise SchemaError(f"{path}: expected header starting with 'id'")
        columns = header[1:]
        if len(set(columns)) != len(columns):
            raise SchemaError(f"{path}: duplicate column names in header")
        ids: list[str] = []
        rows: list[list[float]] = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise SchemaError(
                    f"{path} row {line_no}: expected {len(header)} cells, got {len(row)}"
                )
            ids.append(row[0])
            parsed = []
            for col_name, cell in zip(columns, row[1:]):
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise InputError(
                        f"{path} row {line_no}, column '{col_name}': "
                        f"cannot parse '{cell}' as a number"
                    ) from None
            rows.append(parsed)
    values = np.asarray(rows, dtype=float).reshape(len(ids), len(columns))
    return ids, columns, values
