"""Aligned plain-text tables and JSON reports."""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Sequence


def _cell(value) -> str:
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return f"{value:.6g}"
    return str(value)


def format_table(rows: Sequence[dict], columns: Sequence[str] | None = None) -> str:
    """Columns padded to their widest cell; numbers right-aligned, text left-aligned."""
    if not rows:
        return ""
    columns = list(columns or rows[0].keys())
    cells = [[_cell(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    numeric = [all(isinstance(r.get(c), (int, float)) for r in rows) for c in columns]

    def line(values):
        parts = [v.rjust(w) if num else v.ljust(w) for v, w, num in zip(values, widths, numeric)]
        return "  ".join(parts).rstrip()

    out = [line(columns), "  ".join("-" * w for w in widths)]
    out += [line(row) for row in cells]
    return "\n".join(out) + "\n"


def write_report(out_dir, name: str, payload: dict, rows: Sequence[dict],
                 columns: Sequence[str] | None = None) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path = out / f"{name}.json"
    txt_path = out / f"{name}.txt"
    json_path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    txt_path.write_text(format_table(rows, columns))
    return json_path, txt_path
