"""
Report Emission

Writes a MetricReport as JSON with a stable key order (model field order) and
metric floats printed with six decimals, so identical results give identical
bytes. The echoed run config keeps the shortest exact form of each float
so it can be read back unchanged. Non-finite floats become null.
"""

import json
import logging
import math
from pathlib import Path
from typing import Any, Union

from app.models.schemas import MetricReport

logger = logging.getLogger(__name__)

_INDENT = "  "

# top-level sections echoed without rounding
EXACT_SECTIONS = frozenset({"config"})


def _emit(value: Any, depth: int, exact: bool = False) -> str:
    pad, inner = _INDENT * depth, _INDENT * (depth + 1)
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if not math.isfinite(value):
            return "null"
        return repr(value) if exact else f"{value:.6f}"
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, dict):
        if not value:
            return "{}"
        items = [
            f"{inner}{json.dumps(str(k))}: {_emit(v, depth + 1, exact or (depth == 0 and k in EXACT_SECTIONS))}"
            for k, v in value.items()
        ]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(value, (list, tuple)):
        if not value:
            return "[]"
        items = [f"{inner}{_emit(v, depth + 1, exact)}" for v in value]
        return "[\n" + ",\n".join(items) + "\n" + pad + "]"
    if hasattr(value, "item"):
        return _emit(value.item(), depth, exact)
    raise TypeError(f"cannot serialise {type(value).__name__} in a report")


def format_report(report: Union[MetricReport, dict]) -> str:
    data = report.model_dump() if isinstance(report, MetricReport) else report
    return _emit(data, 0) + "\n"


def write_report(report: Union[MetricReport, dict], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_report(report), encoding="utf-8")
    logger.info(f"Wrote report to {path}")
    return path
