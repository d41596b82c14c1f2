"""Report serialization: JSON with a shipped schema, metrics and matrix CSVs."""

from __future__ import annotations

import copy
import csv
import json
from importlib import resources
from pathlib import Path
from typing import Iterable

import jsonschema

from .errors import FormatError

VOLATILE_FIELDS = ("wall_clock_seconds",)
METRIC_COLUMNS = ("method", "strategy", "seed", "A", "F", "FT")


def load_schema() -> dict:
    text = resources.files("cassle").joinpath("schemas/report.schema.json").read_text("utf-8")
    return json.loads(text)


def validate_report(report: dict) -> None:
    try:
        jsonschema.validate(report, load_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise FormatError(f"report invalid at {where}: {exc.message}") from None


def canonical_report(report: dict) -> dict:
    """Copy with wall-clock and other volatile fields blanked."""
    out = copy.deepcopy(report)
    for key in VOLATILE_FIELDS:
        if key in out:
            out[key] = 0.0
    return out


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True, allow_nan=False)


def _cell(value) -> str:
    return "" if value is None else repr(float(value))


def _parse_cell(text: str):
    return None if text == "" else float(text)


def metrics_row(report: dict) -> dict:
    m = report.get("metrics") or {}
    return {
        "method": report["method"],
        "strategy": report["strategy"],
        "seed": report["seed"],
        "A": _cell(m.get("average_accuracy")),
        "F": _cell(m.get("forgetting")),
        "FT": _cell(m.get("forward_transfer")),
    }


def write_metrics_csv(reports: Iterable[dict], path) -> None:
    """One row per (strategy, seed); floats written with round-trip precision."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        for report in reports:
            writer.writerow(metrics_row(report))


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["seed"] = int(row["seed"])
        for key in ("A", "F", "FT"):
            row[key] = _parse_cell(row[key])
    return rows


def write_matrix_csv(matrix, path) -> None:
    width = len(matrix[0]) if matrix else 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"task_{k + 1}" for k in range(width)])
        for row in matrix:
            writer.writerow([_cell(v) for v in row])


def read_matrix_csv(path) -> list[list[float]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return [[_parse_cell(v) for v in row] for row in rows[1:]]


def write_report(report: dict, out_dir, *, canonical: bool = False) -> Path:
    """Write ``report.json``, ``metrics.csv`` and ``matrix.csv`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if canonical:
        report = canonical_report(report)
    if report.get("complete"):
        validate_report(report)
    (out / "report.json").write_text(dumps_report(report) + "\n", encoding="utf-8")
    write_metrics_csv([report], out / "metrics.csv")
    write_matrix_csv(report["accuracy_matrix"], out / "matrix.csv")
    return out / "report.json"


def load_report(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None
