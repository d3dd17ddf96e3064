"""Result tables: a delimited text table plus a machine-readable JSON copy.

Two layouts:

* ``table1`` — rows are datasets, column groups are methods/configs, metrics
  are Top-1 / Macro-F1 / AUC. ``results[dataset][method] = {"top1": x,
  "macro_f1": y, "auc": z-or-None}``.
* ``table2`` — rows are source datasets, each method contributes a target
  descriptor and an accuracy. ``results[source][method] = {"target": str,
  "accuracy": x}``.

Missing values render as an em dash. Floats are written with ``repr`` so
parsing the table back reproduces them exactly.
"""

from __future__ import annotations

import json
from pathlib import Path

from .errors import ParameterError

_MISSING = "—"   # em dash
_T1_METRICS = ("top1", "macro_f1", "auc")
_T2_FIELDS = ("target", "accuracy")

LAYOUTS = ("table1", "table2")


def _check_name(name: str) -> str:
    if "\t" in name or "\n" in name or "/" in name:
        raise ParameterError(
            f"names in reports must not contain tabs, newlines or slashes: {name!r}")
    return name


def _format(value) -> str:
    if value is None:
        return _MISSING
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, int):
        return repr(float(value))
    return str(value)


def _methods_in_order(results: dict) -> list:
    methods = []
    for row in results.values():
        for method in row:
            if method not in methods:
                methods.append(method)
    return methods


def emit_report(results: dict, layout: str, path) -> Path:
    """Write the table to ``path`` and its JSON copy to ``path + ".json"``."""
    if layout not in LAYOUTS:
        raise ParameterError(f"layout must be one of {LAYOUTS}, got {layout!r}")
    path = Path(path)
    methods = _methods_in_order(results)
    fields = _T1_METRICS if layout == "table1" else _T2_FIELDS
    key_col = "dataset" if layout == "table1" else "source"
    header = [key_col] + [f"{m}/{f}" for m in methods for f in fields]
    lines = ["\t".join(header)]
    for row_name, row in results.items():
        _check_name(str(row_name))
        cells = [str(row_name)]
        for method in methods:
            _check_name(str(method))
            entry = row.get(method)
            for f in fields:
                cells.append(_format(entry.get(f)) if entry is not None else _MISSING)
        lines.append("\t".join(cells))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    Path(str(path) + ".json").write_text(
        json.dumps({"layout": layout, "results": results}, indent=2, sort_keys=True)
        + "\n", encoding="utf-8")
    return path


def _parse_cell(text: str, field: str):
    if text == _MISSING:
        return None
    if field == "target":
        return text
    return float(text)


def parse_report(path):
    """Read a report table back into ``(layout, results)`` with exact floats."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ParameterError(f"report {path} is empty")
    header = lines[0].split("\t")
    if len(header) < 1 or header[0] not in ("dataset", "source"):
        raise ParameterError(
            f"report {path} has an unrecognized header: {header[:3]}")
    layout = "table1" if header[0] == "dataset" else "table2"
    fields = _T1_METRICS if layout == "table1" else _T2_FIELDS
    columns = []
    for col in header[1:]:
        method, sep, f = col.rpartition("/")
        if not sep or f not in fields:
            raise ParameterError(f"report {path}: bad column {col!r}")
        columns.append((method, f))
    results: dict = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split("\t")
        if len(cells) != len(columns) + 1:
            raise ParameterError(
                f"report {path}: line {lineno} has {len(cells)} cells, "
                f"expected {len(columns) + 1}")
        row: dict = {}
        for (method, f), cell in zip(columns, cells[1:]):
            row.setdefault(method, {})[f] = _parse_cell(cell, f)
        results[cells[0]] = row
    return layout, results


def metrics_to_row(metrics) -> dict:
    """Project a Metrics object onto the table1 cell mapping."""
    return {"top1": metrics.top1, "macro_f1": metrics.macro_f1, "auc": metrics.auc}
