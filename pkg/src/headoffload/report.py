"""Text serializations shared by the CLI: aligned tables, CSV and JSON.

Every emitter keeps the caller's column order, so identical inputs always
produce identical bytes.
"""

from __future__ import annotations

import csv
import io
import json
from typing import Iterable, Mapping, Sequence

FORMATS = ("table", "json", "csv")

_SI = ((1e15, "P"), (1e12, "T"), (1e9, "G"), (1e6, "M"), (1e3, "K"))


def si(value: float) -> str:
    """Compact decimal-prefix rendering, e.g. ``1.03e14 -> '103T'``."""
    mag = abs(value)
    for scale, suffix in _SI:
        if mag >= scale:
            return f"{value / scale:.3g}{suffix}"
    return f"{value:.3g}"


def _cell(value) -> str:
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def table(rows: Sequence[Mapping], columns: Sequence[str], formatters: Mapping | None = None) -> str:
    formatters = formatters or {}
    body = [[formatters.get(c, _cell)(r[c]) for c in columns] for r in rows]
    widths = [max([len(c)] + [len(line[i]) for line in body]) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for line in body:
        lines.append("  ".join(v.ljust(w) for v, w in zip(line, widths)).rstrip())
    return "\n".join(lines) + "\n"


def to_csv(rows: Iterable[Mapping], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for r in rows:
        writer.writerow([r[c] for c in columns])
    return buf.getvalue()


def to_json(obj) -> str:
    return json.dumps(obj, indent=2) + "\n"


def emit_rows(rows: Sequence[Mapping], columns: Sequence[str], fmt: str,
              formatters: Mapping | None = None) -> str:
    rows = [{c: r[c] for c in columns} for r in rows]
    if fmt == "json":
        return to_json(rows)
    if fmt == "csv":
        return to_csv(rows, columns)
    if fmt == "table":
        return table(rows, columns, formatters)
    raise ValueError(f"unknown format {fmt!r}")


def emit_record(record: Mapping, fmt: str) -> str:
    """One flat record: a two-column table, a JSON object or a one-row CSV."""
    if fmt == "json":
        return to_json(dict(record))
    if fmt == "csv":
        return to_csv([record], list(record))
    if fmt == "table":
        width = max(len(k) for k in record)
        return "".join(f"{k.ljust(width)}  {_cell(v)}\n" for k, v in record.items())
    raise ValueError(f"unknown format {fmt!r}")
