"""Query-to-statistic aggregation and inverse-variance pooling.

A query's value vector ``m`` maps to statistic estimates ``A @ m`` with a 0/1
aggregation matrix ``A``. Bins are independent with common variance ``s2``,
so estimate ``r`` has variance ``A[r].sum() * s2``. For a general matrix the
covariance would be ``A @ diag(s2) @ A.T``; only the 0/1 case is needed here.
"""

from __future__ import annotations

import csv
import enum
import os
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .model import (Codebook, QuerySpec, StatisticSpec, Workload, bin_labels, default_codebook,
                    default_workload, statistic_supported_by)
from .nmfio import NoisyMeasurement
from .spine import GeoLevel


class AggregationError(ValueError):
    pass


class PoolMode(enum.Enum):
    POOL_ALL = "pool-all"
    MIN_VARIANCE_ONLY = "min-var"

    @classmethod
    def parse(cls, value: "str | PoolMode") -> "PoolMode":
        if isinstance(value, PoolMode):
            return value
        for m in cls:
            if value in (m.value, m.name, m.name.lower()):
                return m
        raise ValueError(f"unknown pooling mode {value!r} (use pool-all or min-var)")


@dataclass(frozen=True)
class AggregationMatrix:
    query: str
    statistics: tuple[str, ...]
    entries: np.ndarray  # int8, shape (len(statistics), bins)

    @property
    def row_sums(self) -> np.ndarray:
        return self.entries.sum(axis=1).astype(np.int64)


@dataclass(frozen=True)
class StatEstimate:
    geocode: str
    statistic: str
    query: str
    estimate: int
    variance: float
    level: GeoLevel | None = None


@dataclass(frozen=True)
class PooledEstimate:
    geocode: str
    statistic: str
    estimate: float
    variance: float
    sources: tuple[str, ...]
    level: GeoLevel | None = None


def build_aggregation_matrix(query: QuerySpec, stats: Sequence[StatisticSpec],
                             codebook: Codebook | None = None) -> AggregationMatrix:
    codebook = codebook or default_codebook()
    if not stats:
        raise AggregationError(f"{query.name}: at least one statistic is required")
    for s in stats:
        if not statistic_supported_by(s, query, codebook):
            missing = sorted(set(s.constrained(codebook)) - set(query.attribute_names))
            raise AggregationError(f"statistic {s.name!r} needs dimension {missing[0]!r}, absent from {query.name}")
    labels = bin_labels(query, codebook)
    entries = np.zeros((len(stats), len(labels)), dtype=np.int8)
    for c, b in enumerate(labels):
        codes = dict(zip(query.attribute_names, b.codes))
        for r, s in enumerate(stats):
            entries[r, c] = s.matches(codes)
    return AggregationMatrix(query.name, tuple(s.name for s in stats), entries)


def apply_aggregation(A: AggregationMatrix, row: NoisyMeasurement) -> list[StatEstimate]:
    if row.query != A.query:
        raise AggregationError(f"matrix for {A.query} applied to a {row.query} row")
    if len(row.value) != A.entries.shape[1]:
        raise AggregationError(f"{row.geocode}/{row.query}: {len(row.value)} bins, matrix has {A.entries.shape[1]}")
    est = A.entries.astype(np.int64) @ np.asarray(row.value, dtype=np.int64)
    var = A.row_sums * row.variance
    return [
        StatEstimate(row.geocode, s, row.query, int(e), float(v), row.level)
        for s, e, v in zip(A.statistics, est, var)
    ]


def _check_group(estimates: Sequence[StatEstimate]) -> None:
    if not estimates:
        raise AggregationError("cannot pool an empty set of estimates")
    keys = {(e.geocode, e.statistic) for e in estimates}
    if len(keys) > 1:
        raise AggregationError(f"pooling mixes geographies/statistics: {sorted(keys)}")
    for e in estimates:
        if not e.variance > 0:
            raise AggregationError(f"{e.geocode}/{e.statistic}/{e.query}: variance must be positive")


def pool(estimates: Sequence[StatEstimate]) -> PooledEstimate:
    """Inverse-variance weighted mean of estimates of one (geocode, statistic)."""
    _check_group(estimates)
    first = estimates[0]
    if len(estimates) == 1:
        return PooledEstimate(first.geocode, first.statistic, float(first.estimate), first.variance,
                              (first.query,), first.level)
    w = np.array([1.0 / e.variance for e in estimates])
    x = np.array([e.estimate for e in estimates], dtype=float)
    return PooledEstimate(first.geocode, first.statistic, float(w @ x / w.sum()), float(1.0 / w.sum()),
                          tuple(e.query for e in estimates), first.level)


def pool_mode_select(estimates: Sequence[StatEstimate], mode: PoolMode | str = PoolMode.POOL_ALL) -> PooledEstimate:
    mode = PoolMode.parse(mode)
    if mode is PoolMode.POOL_ALL:
        return pool(estimates)
    _check_group(estimates)
    best = min(estimates, key=lambda e: (e.variance, e.query))
    return pool([best])


# --- pipeline helpers -------------------------------------------------------------


def aggregation_matrices(workload: Workload | None = None, codebook: Codebook | None = None,
                         stats: Sequence[StatisticSpec] | None = None) -> dict[str, AggregationMatrix]:
    """One matrix per query over every statistic that query supports."""
    codebook = codebook or default_codebook()
    workload = workload or default_workload()
    stats = workload.statistics if stats is None else stats
    out = {}
    for q in workload.queries:
        supported = [s for s in stats if statistic_supported_by(s, q, codebook)]
        if supported:
            out[q.name] = build_aggregation_matrix(q, supported, codebook)
    return out


def aggregate_rows(rows: Iterable[NoisyMeasurement], matrices: dict[str, AggregationMatrix]) -> list[StatEstimate]:
    out = []
    for row in rows:
        A = matrices.get(row.query)
        if A is not None:
            out.extend(apply_aggregation(A, row))
    return out


def pool_all(estimates: Iterable[StatEstimate], mode: PoolMode | str = PoolMode.POOL_ALL) -> list[PooledEstimate]:
    """Pool every (geocode, statistic) group, preserving first-seen order."""
    groups: dict[tuple[str, str], list[StatEstimate]] = defaultdict(list)
    for e in estimates:
        groups[(e.geocode, e.statistic)].append(e)
    return [pool_mode_select(g, mode) for g in groups.values()]


# --- file formats -----------------------------------------------------------------

JOIN_HEADER = ["query", "bin_index", "statistic"]
ESTIMATE_HEADER = ["geocode", "level", "statistic", "query", "estimate", "variance"]
POOLED_HEADER = ["geocode", "level", "statistic", "estimate", "variance", "mode"]


def join_table(matrices: dict[str, AggregationMatrix]) -> list[tuple[str, int, str]]:
    """Aggregation specification as joinable ``(query, bin_index, statistic)`` rows."""
    out = []
    for A in matrices.values():
        for r, c in zip(*np.nonzero(A.entries)):
            out.append((A.query, int(c), A.statistics[r]))
    out.sort(key=lambda t: (t[0], t[1], t[2]))
    return out


def matrices_from_join_table(rows: Iterable[tuple[str, int, str]], workload: Workload,
                             codebook: Codebook) -> dict[str, AggregationMatrix]:
    by_query: dict[str, dict[str, list[int]]] = defaultdict(lambda: defaultdict(list))
    for q, b, s in rows:
        by_query[q][s].append(int(b))
    order = [s.name for s in workload.statistics]
    out = {}
    for qname, stats in by_query.items():
        names = sorted(stats, key=lambda s: order.index(s) if s in order else len(order))
        entries = np.zeros((len(names), workload.query(qname).bin_count(codebook)), dtype=np.int8)
        for r, s in enumerate(names):
            entries[r, stats[s]] = 1
        out[qname] = AggregationMatrix(qname, tuple(names), entries)
    return out


def write_join_table(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(JOIN_HEADER)
        w.writerows(rows)


def read_join_table(path) -> list[tuple[str, int, str]]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != JOIN_HEADER:
            raise AggregationError(f"{path}: expected header {','.join(JOIN_HEADER)}")
        return [(r["query"], int(r["bin_index"]), r["statistic"]) for r in reader]


def estimate_records(estimates: Iterable[StatEstimate]) -> list[dict]:
    return [
        {"geocode": e.geocode, "level": e.level.name if e.level is not None else "", "statistic": e.statistic,
         "query": e.query, "estimate": e.estimate, "variance": e.variance}
        for e in estimates
    ]


def estimates_from_records(records: Iterable[dict]) -> list[StatEstimate]:
    return [
        StatEstimate(r["geocode"], r["statistic"], r["query"], int(r["estimate"]), float(r["variance"]),
                     GeoLevel.parse(r["level"]) if r["level"] != "" else None)
        for r in records
    ]


def pooled_records(pooled: Iterable[PooledEstimate], mode: PoolMode | str) -> list[dict]:
    mode = PoolMode.parse(mode)
    return [
        {"geocode": p.geocode, "level": p.level.name if p.level is not None else "", "statistic": p.statistic,
         "estimate": p.estimate, "variance": p.variance, "mode": mode.value}
        for p in pooled
    ]


def pooled_from_records(records: Iterable[dict]) -> tuple[list[PooledEstimate], set[str]]:
    out, modes = [], set()
    for r in records:
        modes.add(r["mode"])
        out.append(PooledEstimate(r["geocode"], r["statistic"], float(r["estimate"]), float(r["variance"]), (),
                                  GeoLevel.parse(r["level"]) if r["level"] != "" else None))
    return out, modes
