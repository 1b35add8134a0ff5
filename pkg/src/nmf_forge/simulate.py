"""Miniature disclosure avoidance run: microdata, tabulation, noise, collapse.

``run_das`` measures every (unit, query) pair with i.i.d. discrete Gaussian
noise per bin. A unit that is the only child of its parent is not measured;
its precision is added to the nearest measured ancestor, whose variance
becomes ``1 / sum(1 / variance)`` over the merged units.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .model import Codebook, Workload, default_codebook, default_workload
from .nmfio import NoisyMeasurement
from .noise import derive_seed, discrete_gaussian_array, rho_to_variance, substream
from .spine import GeoLevel, Spine, split_geocode

log = logging.getLogger(__name__)


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class Person:
    block_geocode: str
    codes: tuple[int, ...]  # one per codebook attribute, canonical order


_RACES = (0.60, 0.13, 0.02, 0.06, 0.005, 0.10)
_DEFAULT_WEIGHTS = {
    "voting_age": {0: 0.23, 1: 0.77},
    "hispanic": {0: 0.81, 1: 0.19},
    "hhgq": {0: 0.97, **{k: 0.03 / 7 for k in range(1, 8)}},
}


def _category_weights(attr) -> np.ndarray:
    if attr.name in _DEFAULT_WEIGHTS and set(_DEFAULT_WEIGHTS[attr.name]) == set(attr.codes):
        w = np.array([_DEFAULT_WEIGHTS[attr.name][c] for c in attr.codes])
    elif attr.name == "race" and attr.codes == tuple(range(1, 64)):
        multi = (1.0 - sum(_RACES)) / 57
        w = np.array([_RACES[c.bit_length() - 1] if c & (c - 1) == 0 else multi for c in attr.codes])
    else:
        w = np.ones(attr.size)
    return w / w.sum()


def generate_microdata(spine: Spine, mean: float = 10.0, seed: int = 0, vacant_fraction: float = 0.0,
                       codebook: Codebook | None = None) -> list[Person]:
    """Synthetic person records for every populated spine block.

    Block sizes are Poisson(``mean``); a ``vacant_fraction`` of blocks is forced
    to zero persons (housing but no residents). Structural-zero blocks are not
    on the spine and so receive nobody.
    """
    codebook = codebook or default_codebook()
    rng = np.random.default_rng(seed)
    weights = [_category_weights(a) for a in codebook.attributes]
    people: list[Person] = []
    for block in spine.blocks:
        vacant = rng.random() < vacant_fraction
        n = int(rng.poisson(mean))
        if vacant or n == 0:
            continue
        cols = [np.asarray(a.codes)[rng.choice(a.size, size=n, p=w)] for a, w in zip(codebook.attributes, weights)]
        for codes in zip(*cols):
            people.append(Person(block.geocode, tuple(int(c) for c in codes)))
    return people


class GroundTruth:
    """Exact counts for every spine unit, stored as full cross-tabulations."""

    def __init__(self, cells: Mapping[str, np.ndarray], codebook: Codebook, workload: Workload):
        self.cells = dict(cells)
        self.codebook = codebook
        self.workload = workload
        self._marginals: dict[tuple[str, str], np.ndarray] = {}

    def counts(self, geocode: str, query: str) -> np.ndarray:
        key = (geocode, query)
        if key not in self._marginals:
            q = self.workload.query(query)
            axes = tuple(i for i, n in enumerate(self.codebook.names) if n not in q.attribute_names)
            m = self.cells[geocode].sum(axis=axes).ravel().astype(np.int64)
            m.flags.writeable = False
            self._marginals[key] = m
        return self._marginals[key]

    def __getitem__(self, key: tuple[str, str]) -> np.ndarray:
        return self.counts(*key)

    def total(self, geocode: str) -> int:
        return int(self.cells[geocode].sum())


def tabulate(microdata: Iterable[Person], spine: Spine, workload: Workload | None = None,
             codebook: Codebook | None = None) -> GroundTruth:
    codebook = codebook or default_codebook()
    workload = workload or default_workload()
    attrs = codebook.attributes
    cells = {g: np.zeros(codebook.shape, dtype=np.int64) for g in spine.units}
    for p in microdata:
        if p.block_geocode not in spine or spine[p.block_geocode].level != GeoLevel.BLOCK:
            raise ValueError(f"person on unknown block {p.block_geocode}")
        cells[p.block_geocode][tuple(a.position(c) for a, c in zip(attrs, p.codes))] += 1
    for g in reversed(list(spine.walk())):
        u = spine[g]
        for c in u.children:
            cells[g] += cells[c]
    return GroundTruth(cells, codebook, workload)


# --- privacy-loss schedule ------------------------------------------------------


class BudgetSchedule:
    """Noise variance for every (level, query) pair."""

    def __init__(self, variances: Mapping[tuple[GeoLevel, str], float]):
        self.variances = {(GeoLevel.parse(lv), q): float(v) for (lv, q), v in variances.items()}
        for (lv, q), v in self.variances.items():
            if not (v > 0 and math.isfinite(v)):
                raise ScheduleError(f"variance for ({lv.name}, {q}) must be positive, got {v}")

    def variance(self, level: GeoLevel, query: str) -> float:
        try:
            return self.variances[(GeoLevel.parse(level), query)]
        except KeyError:
            raise ScheduleError(f"schedule has no variance for ({GeoLevel.parse(level).name}, {query})") from None

    def check(self, workload: Workload) -> None:
        for lv in GeoLevel:
            for q in workload.query_names:
                self.variance(lv, q)

    @classmethod
    def uniform(cls, workload: Workload, variance: float) -> "BudgetSchedule":
        return cls({(lv, q): variance for lv in GeoLevel for q in workload.query_names})

    @classmethod
    def from_rho(cls, workload: Workload, rho: float, level_shares: Mapping, query_shares: Mapping) -> "BudgetSchedule":
        """Split a total zCDP budget ``rho`` by level and query shares.

        Each (level, query) gets ``rho * level_share * query_share`` and the
        matching variance ``1 / (2 rho_share)``.
        """
        out = {}
        for lv, ls in level_shares.items():
            for q in workload.query_names:
                out[(GeoLevel.parse(lv), q)] = rho_to_variance(rho * ls * query_shares[q])
        return cls(out)

    def to_dict(self) -> dict:
        d: dict[str, dict[str, float]] = {}
        for (lv, q), v in self.variances.items():
            d.setdefault(lv.name, {})[q] = v
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "BudgetSchedule":
        return cls({(GeoLevel.parse(lv), q): v for lv, qs in d.items() for q, v in qs.items()})

    @classmethod
    def load(cls, path: str | os.PathLike) -> "BudgetSchedule":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)
            f.write("\n")


# --- the noisy measurement run ----------------------------------------------------


@dataclass(frozen=True)
class CollapseEntry:
    removed_geocode: str
    parent_geocode: str
    query: str
    effective_variance: float


COLLAPSE_HEADER = ["removed_geocode", "parent_geocode", "query", "effective_variance"]


def collapse_plan(spine: Spine) -> dict[str, str]:
    """Map every omitted unit to the measured ancestor that absorbs its budget."""
    receiver: dict[str, str] = {}
    for g in spine.walk():
        u = spine[g]
        parent = u.parent_geocode
        if parent is not None and len(spine[parent].children) == 1:
            receiver[g] = receiver.get(parent, parent)
    return receiver


def effective_variances(spine: Spine, workload: Workload, schedule: BudgetSchedule) -> dict[tuple[str, str], float]:
    """Variance of each measured (unit, query) after budget reallocation."""
    receiver = collapse_plan(spine)
    precision: dict[tuple[str, str], float] = {}
    for g in spine.walk():
        lv = spine[g].level
        target = receiver.get(g, g)
        for q in workload.query_names:
            precision[(target, q)] = precision.get((target, q), 0.0) + 1.0 / schedule.variance(lv, q)
    return {k: 1.0 / p for k, p in precision.items()}


def run_das(truth: GroundTruth, spine: Spine, workload: Workload, schedule: BudgetSchedule,
            master_seed: int) -> tuple[list[NoisyMeasurement], list[CollapseEntry]]:
    """Noisy measurements for every measured (unit, query), plus the collapse log.

    Noise for a row comes from a substream keyed by ``(master_seed, geocode,
    query)``, so the output does not depend on generation order.
    """
    schedule.check(workload)
    codebook = truth.codebook
    receiver = collapse_plan(spine)
    eff = effective_variances(spine, workload, schedule)
    rows = []
    for g in spine.walk():
        if g in receiver:
            continue
        lv = spine[g].level
        for q in workload.queries:
            var = eff[(g, q.name)]
            n = q.bin_count(codebook)
            value = truth.counts(g, q.name) + discrete_gaussian_array(var, n, substream(master_seed, g, q.name))
            rows.append(NoisyMeasurement(g, lv, q.name, tuple(value.tolist()), var))
    collapse = [
        CollapseEntry(g, spine[g].parent_geocode, q, eff[(receiver[g], q)])
        for g in spine.walk() if g in receiver
        for q in workload.query_names
    ]
    return rows, collapse


def replicate_seed(master_seed: int, replicate: int) -> int:
    return derive_seed(master_seed, "replicate", replicate)


def write_collapse_log(entries: Iterable[CollapseEntry], path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(COLLAPSE_HEADER)
        for e in entries:
            w.writerow([e.removed_geocode, e.parent_geocode, e.query, repr(e.effective_variance)])


def read_collapse_log(path: str | os.PathLike) -> list[CollapseEntry]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != COLLAPSE_HEADER:
            raise ValueError(f"{path}: expected header {','.join(COLLAPSE_HEADER)}")
        return [CollapseEntry(r["removed_geocode"], r["parent_geocode"], r["query"],
                              float(r["effective_variance"])) for r in reader]


# --- toy post-processing ------------------------------------------------------------


def state_totals(truth: GroundTruth, spine: Spine) -> dict[str, int]:
    """Invariant population per traditional state GEOID (AI/AN parts summed)."""
    out: dict[str, int] = {}
    for g in spine.roots:
        st = split_geocode(g)[1]
        out[st] = out.get(st, 0) + truth.total(g)
    return out


def _largest_remainder(x: np.ndarray, total: int) -> np.ndarray:
    s = x.sum()
    real = x * (total / s) if s > 0 else np.full(x.shape, total / x.size)
    base = np.floor(real).astype(np.int64)
    short = int(total - base.sum())
    if short > 0:
        order = np.argsort(-(real - base), kind="stable")
        base[order[:short]] += 1
    return base


def toy_postprocess(rows: Sequence[NoisyMeasurement], spine: Spine, totals: Mapping[str, int],
                    query: str = "detailed_dpq") -> dict[str, np.ndarray]:
    """Nonnegative integer block counts that hit each state's invariant total.

    Block rows of ``query`` are clamped at zero, then scaled within each state
    so the state sum equals its invariant, rounding by largest remainder.
    A block without its own row (a collapsed hole) uses its nearest measured
    ancestor's row.
    """
    by_key = {(r.geocode, r.query): r for r in rows if r.query == query}
    out: dict[str, np.ndarray] = {}
    blocks_by_state: dict[str, list[str]] = {}
    for b in spine.blocks:
        blocks_by_state.setdefault(b.tabulation_geoid[:2], []).append(b.geocode)
    for st, blocks in blocks_by_state.items():
        mats = []
        for b in blocks:
            row = next((by_key[(g, query)] for g in reversed(spine.path(b)) if (g, query) in by_key), None)
            if row is None:
                raise ValueError(f"no {query} measurement covers block {b}")
            mats.append(np.maximum(np.asarray(row.value, dtype=np.int64), 0))
        x = np.stack(mats)
        fitted = _largest_remainder(x.astype(float).ravel(), int(totals[st])).reshape(x.shape)
        out.update(zip(blocks, fitted))
    return out
