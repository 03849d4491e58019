"""Deterministic JSON/CSV report emission and the curation report schema."""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import jsonschema

from .errors import AquaCurateError, FormatError

FLOAT_DIGITS = 9

_QUALITY = {"type": "object", "additionalProperties": {"type": "number"}}

CURATION_REPORT_SCHEMA = {
    "type": "object",
    "required": ["version", "run_config", "weights", "images"],
    "properties": {
        "version": {"type": "string"},
        "run_config": {"type": "object"},
        "weights": {
            "type": "object",
            "required": ["depth", "normal"],
            "properties": {"depth": _QUALITY, "normal": _QUALITY},
        },
        "images": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["rgb", "candidates", "selected_model", "skipped"],
                "properties": {
                    "rgb": {"type": "string"},
                    "skipped": {"type": "boolean"},
                    "selected_model": {"type": ["string", "null"]},
                    "excluded": {"type": "array"},
                    "candidates": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "required": [
                                "model", "depth_path", "normal_path", "depth_quality",
                                "normal_quality", "depth_score", "normal_score", "combined_score",
                            ],
                            "properties": {
                                "model": {"type": "string"},
                                "depth_path": {"type": "string"},
                                "normal_path": {"type": "string"},
                                "depth_quality": _QUALITY,
                                "normal_quality": _QUALITY,
                                "depth_score": {"type": "number"},
                                "normal_score": {"type": "number"},
                                "combined_score": {"type": "number"},
                            },
                        },
                    },
                },
            },
        },
    },
}


class ReportIOError(AquaCurateError, OSError):
    pass


def round_floats(obj):
    """Round every float to 9 significant digits, recursively."""
    if isinstance(obj, float):
        if not math.isfinite(obj):
            raise FormatError(f"non-finite value {obj!r} cannot be serialised")
        return float(f"{obj:.{FLOAT_DIGITS}g}")
    if isinstance(obj, dict):
        return {k: round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [round_floats(v) for v in obj]
    return obj


def to_json(report: dict) -> str:
    return json.dumps(round_floats(report), indent=2) + "\n"


def _fmt_cell(v):
    if isinstance(v, float):
        return f"{v:.{FLOAT_DIGITS}g}"
    return "" if v is None else v


def to_csv(rows: list) -> str:
    """Rows of flat dicts; the column order is that of the first row."""
    buf = io.StringIO()
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt_cell(v) for k, v in row.items()})
    return buf.getvalue()


def curation_rows(report: dict) -> list:
    rows = []
    for im in report["images"]:
        for c in im["candidates"]:
            row = {"rgb": im["rgb"], "model": c["model"], "selected": c["model"] == im["selected_model"]}
            row.update({f"depth_{k}": v for k, v in c["depth_quality"].items()})
            row.update({f"normal_{k}": v for k, v in c["normal_quality"].items()})
            row.update(depth_score=c["depth_score"], normal_score=c["normal_score"],
                       combined_score=c["combined_score"])
            rows.append(row)
    return rows


def render(report: dict, fmt: str) -> str:
    if fmt == "json":
        return to_json(report)
    if fmt == "csv":
        rows = report["rows"] if "rows" in report else curation_rows(report)
        return to_csv(rows)
    raise FormatError(f"unknown report format {fmt!r}")


def write_report(report: dict, path, fmt: str = "json") -> None:
    """Write ``report`` to ``path``; identical reports give identical bytes."""
    text = render(report, fmt)
    path = Path(path)
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise ReportIOError(f"cannot write report {path}: {exc}") from exc


def read_report(path) -> dict:
    """Load and schema-check a curation report."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read report {path}: {exc}") from exc
    try:
        jsonschema.validate(data, CURATION_REPORT_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise FormatError(f"{path}: report does not match schema: {exc.message}") from exc
    return data
