"""Flat record files in CSV or NDJSON."""

from __future__ import annotations

import csv
import json
import os
from typing import Iterable, Sequence


def write_table(records: Iterable[dict], header: Sequence[str], path: str | os.PathLike, fmt: str = "csv") -> int:
    n = 0
    with open(path, "w", newline="", encoding="utf-8") as f:
        if fmt == "csv":
            w = csv.writer(f, lineterminator="\n")
            w.writerow(header)
            for r in records:
                w.writerow([_cell(r[k]) for k in header])
                n += 1
        elif fmt == "ndjson":
            for r in records:
                f.write(json.dumps({k: r[k] for k in header}, separators=(",", ":")) + "\n")
                n += 1
        else:
            raise ValueError(f"unknown table format {fmt!r}")
    return n


def _cell(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return repr(v)
    return v


def read_table(path: str | os.PathLike, header: Sequence[str] | None = None) -> list[dict]:
    """Read a CSV or NDJSON table; the format is sniffed from the first byte."""
    with open(path, encoding="utf-8", newline="") as f:
        text = f.read()
    if text.lstrip().startswith("{"):
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
        if header is not None and rows and list(rows[0]) != list(header):
            raise ValueError(f"{path}: expected fields {','.join(header)}")
        return [{k: ("" if v is None else str(v)) if not isinstance(v, str) else v for k, v in r.items()} for r in rows]
    reader = csv.DictReader(text.splitlines())
    if header is not None and reader.fieldnames != list(header):
        raise ValueError(f"{path}: expected header {','.join(header)}")
    return list(reader)
