"""Nested NMF rows: NDJSON serialization and un-nesting into labeled cells.

One line per (geocode, query)::

    {"geocode":"10244007010101","level":"OBG","query":"total_dpq","value":[12],"variance":4.0}

Keys appear in exactly that order; extra keys (``filled`` from hole filling,
or anything unknown) follow and are carried through verbatim. Reading a
Parquet release would only need to yield ``NoisyMeasurement`` objects; the
rest of the pipeline never touches the container.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .model import ABSENT, Codebook, CodingError, Workload, bin_index, bin_labels, default_codebook, default_workload
from .spine import GeoLevel

KEYS = ("geocode", "level", "query", "value", "variance")


class NMFFormatError(ValueError):
    """A line of an NMF file could not be parsed."""


class SchemaError(ValueError):
    """A row does not match the workload (unknown query or wrong length)."""


@dataclass(frozen=True)
class NoisyMeasurement:
    geocode: str
    level: GeoLevel
    query: str
    value: tuple[int, ...]
    variance: float
    extra: dict = field(default_factory=dict, compare=True, hash=False)

    def __post_init__(self):
        if not isinstance(self.value, tuple):
            object.__setattr__(self, "value", tuple(int(v) for v in self.value))
        if not self.variance > 0:
            raise SchemaError(f"{self.geocode}/{self.query}: variance must be positive")

    @property
    def filled(self) -> bool:
        return bool(self.extra.get("filled", 0))

    def to_json(self) -> str:
        d = {
            "geocode": self.geocode,
            "level": self.level.name,
            "query": self.query,
            "value": list(self.value),
            "variance": float(self.variance),
        }
        d.update(self.extra)
        return json.dumps(d, separators=(",", ":"), ensure_ascii=False)


def check_row(row: NoisyMeasurement, workload: Workload, codebook: Codebook) -> None:
    try:
        q = workload.query(row.query)
    except CodingError:
        raise SchemaError(f"{row.geocode}/{row.query}: unknown query") from None
    n = q.bin_count(codebook)
    if len(row.value) != n:
        raise SchemaError(f"{row.geocode}/{row.query}: value has {len(row.value)} bins, expected {n}")


def parse_line(line: str, lineno: int = 0) -> NoisyMeasurement:
    try:
        d = json.loads(line)
    except json.JSONDecodeError as e:
        raise NMFFormatError(f"line {lineno}: invalid JSON ({e.msg})") from None
    if not isinstance(d, dict) or list(d)[:5] != list(KEYS):
        raise NMFFormatError(f"line {lineno}: expected keys {', '.join(KEYS)} in that order")
    value = d["value"]
    if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
        raise NMFFormatError(f"line {lineno}: value must be a list of integers")
    if not isinstance(d["variance"], (int, float)) or isinstance(d["variance"], bool):
        raise NMFFormatError(f"line {lineno}: variance must be a number")
    try:
        level = GeoLevel.parse(d["level"])
        extra = {k: v for k, v in d.items() if k not in KEYS}
        return NoisyMeasurement(str(d["geocode"]), level, str(d["query"]), tuple(value), float(d["variance"]), extra)
    except (ValueError, TypeError) as e:
        raise NMFFormatError(f"line {lineno}: {e}") from None


def iter_nmf(path: str | os.PathLike, workload: Workload | None = None,
             codebook: Codebook | None = None) -> Iterator[NoisyMeasurement]:
    workload = workload or default_workload()
    codebook = codebook or default_codebook()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            row = parse_line(line, lineno)
            check_row(row, workload, codebook)
            yield row


def read_nmf(path, workload: Workload | None = None, codebook: Codebook | None = None) -> list[NoisyMeasurement]:
    return list(iter_nmf(path, workload, codebook))


def write_nmf(rows: Iterable[NoisyMeasurement], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in rows:
            f.write(row.to_json())
            f.write("\n")


# --- un-nesting ----------------------------------------------------------------


@dataclass(frozen=True)
class LabeledCell:
    geocode: str
    level: GeoLevel
    query: str
    labels: tuple[str, ...]  # one per codebook attribute, ABSENT where not a dimension
    value: int
    variance: float


def labeled_header(codebook: Codebook) -> list[str]:
    return ["geocode", "level", "query", *codebook.names, "value", "variance"]


def unnest(rows: Iterable[NoisyMeasurement], codebook: Codebook | None = None,
           workload: Workload | None = None) -> Iterator[LabeledCell]:
    """One labeled cell per (row, bin), bins in value-vector order."""
    codebook = codebook or default_codebook()
    workload = workload or default_workload()
    cache: dict[str, list[tuple[str, ...]]] = {}
    for row in rows:
        if row.query not in cache:
            try:
                q = workload.query(row.query)
            except CodingError:
                raise SchemaError(f"{row.geocode}/{row.query}: unknown query") from None
            axes = [codebook.axis(n) for n in q.attribute_names]
            full = []
            for b in bin_labels(q, codebook):
                labels = [ABSENT] * len(codebook.names)
                for ax, lab in zip(axes, b.labels):
                    labels[ax] = lab
                full.append(tuple(labels))
            cache[row.query] = full
        labels = cache[row.query]
        if len(labels) != len(row.value):
            raise SchemaError(f"{row.geocode}/{row.query}: value has {len(row.value)} bins, expected {len(labels)}")
        for lab, v in zip(labels, row.value):
            yield LabeledCell(row.geocode, row.level, row.query, lab, v, row.variance)


def renest(cells: Iterable[LabeledCell], codebook: Codebook | None = None,
           workload: Workload | None = None) -> list[NoisyMeasurement]:
    """Group labeled cells back into value vectors, ordered by ``bin_index``."""
    codebook = codebook or default_codebook()
    workload = workload or default_workload()
    groups: dict[tuple[str, str], dict] = {}
    for c in cells:
        q = workload.query(c.query)
        codes = {}
        for name in q.attribute_names:
            codes[name] = codebook.attribute(name).code_for_label(c.labels[codebook.axis(name)])
        g = groups.setdefault((c.geocode, c.query), {"level": c.level, "variance": c.variance,
                                                      "value": [None] * q.bin_count(codebook)})
        g["value"][bin_index(q, codes, codebook)] = c.value
    out = []
    for (geocode, query), g in groups.items():
        if any(v is None for v in g["value"]):
            raise SchemaError(f"{geocode}/{query}: incomplete set of labeled cells")
        out.append(NoisyMeasurement(geocode, g["level"], query, tuple(g["value"]), g["variance"]))
    return out


def write_labeled(cells: Iterable[LabeledCell], path, codebook: Codebook | None = None) -> int:
    codebook = codebook or default_codebook()
    n = 0
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(labeled_header(codebook))
        for c in cells:
            w.writerow([c.geocode, c.level.name, c.query, *c.labels, c.value, repr(float(c.variance))])
            n += 1
    return n


def read_labeled(path, codebook: Codebook | None = None) -> list[LabeledCell]:
    codebook = codebook or default_codebook()
    header = labeled_header(codebook)
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        if next(reader) != header:
            raise NMFFormatError(f"{path}: expected header {','.join(header)}")
        k = len(codebook.names)
        return [
            LabeledCell(r[0], GeoLevel.parse(r[1]), r[2], tuple(r[3 : 3 + k]), int(r[3 + k]), float(r[4 + k]))
            for r in reader
        ]


def values_array(row: NoisyMeasurement) -> np.ndarray:
    return np.asarray(row.value, dtype=np.int64)


def index_rows(rows: Sequence[NoisyMeasurement]) -> dict[tuple[str, str], NoisyMeasurement]:
    return {(r.geocode, r.query): r for r in rows}
