"""Linking NMF geographies to tabulation geographies.

Covers build an arbitrary block set (a school district, say) out of whole
spine units: every coarsest unit fully inside the set, then finer units for
what remains, down to single blocks. Estimates for the pieces are
independent, so the district estimate is their sum and its variance the sum
of their variances.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .aggregate import AggregationMatrix, PooledEstimate
from .model import Workload, default_workload
from .nmfio import NoisyMeasurement
from .simulate import CollapseEntry
from .spine import BlockAssignmentRow, GeoLevel, Spine, geocode_level, split_geocode

log = logging.getLogger(__name__)


class LinkError(ValueError):
    pass


class HoleError(LinkError):
    pass


class MissingEstimateError(LinkError, KeyError):
    def __str__(self):
        return str(self.args[0])


# --- correspondence ---------------------------------------------------------------


@dataclass(frozen=True)
class CorrespondenceRow:
    block_geoid: str
    state_gc: str
    county_gc: str
    tract_gc: str
    obg_gc: str
    block_gc: str
    state_geoid: str
    county_geoid: str
    tract_geoid: str
    block_group_geoid: str
    aian: bool

    def geocode_at(self, level: GeoLevel) -> str:
        return (self.state_gc, self.county_gc, self.tract_gc, self.obg_gc, self.block_gc)[int(level)]

    def geoid_at(self, level: GeoLevel) -> str:
        if level == GeoLevel.OBG:
            raise LinkError("optimized block groups have no tabulation GEOID")
        return (self.state_geoid, self.county_geoid, self.tract_geoid, None, self.block_geoid)[int(level)]


CORRESPONDENCE_HEADER = [
    "block_geoid", "state_gc", "county_gc", "tract_gc", "obg_gc", "block_gc",
    "state_geoid", "county_geoid", "tract_geoid", "block_group_geoid", "aian",
]


def build_correspondence(baf: Sequence[BlockAssignmentRow], spine: Spine) -> list[CorrespondenceRow]:
    """Attach traditional GEOIDs to every BAF row, checking it against the spine."""
    orphans = []
    out = []
    seen = set()
    for r in baf:
        if r.block_gc not in spine or list(r.geocodes) != spine.path(r.block_gc):
            orphans.append(r.block_geoid)
            continue
        _, geoid = split_geocode(r.block_gc)
        if geoid != r.block_geoid:
            orphans.append(r.block_geoid)
            continue
        seen.add(r.block_gc)
        out.append(CorrespondenceRow(
            r.block_geoid, *r.geocodes,
            split_geocode(r.state_gc)[1], split_geocode(r.county_gc)[1], split_geocode(r.tract_gc)[1],
            geoid[:12], r.aian,
        ))
    orphans += sorted(b.tabulation_geoid for b in spine.blocks if b.geocode not in seen)
    if orphans:
        raise LinkError(f"BAF and spine disagree on blocks: {', '.join(orphans)}")
    return out


def write_correspondence(rows: Iterable[CorrespondenceRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CORRESPONDENCE_HEADER)
        for r in rows:
            w.writerow([getattr(r, k) if k != "aian" else int(r.aian) for k in CORRESPONDENCE_HEADER])


def read_correspondence(path) -> list[CorrespondenceRow]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != CORRESPONDENCE_HEADER:
            raise LinkError(f"{path}: expected header {','.join(CORRESPONDENCE_HEADER)}")
        return [CorrespondenceRow(**{**r, "aian": r["aian"] == "1"}) for r in reader]


# --- hole filling -------------------------------------------------------------------


def fill_holes(rows: Sequence[NoisyMeasurement], spine: Spine, workload: Workload | None = None,
               collapse_log: Sequence[CollapseEntry] | None = None) -> list[NoisyMeasurement]:
    """Give every spine unit one row per query by copying from its parent.

    Walks the spine top-down, so a chain of single children copies the
    nearest measured ancestor. Input rows are kept in order; filled rows
    follow in traversal order and carry ``filled=1``. With a collapse log,
    every hole must be listed there with a matching variance.
    """
    workload = workload or default_workload()
    have = {(r.geocode, r.query): r for r in rows}
    logged = None
    if collapse_log is not None:
        logged = {(e.removed_geocode, e.query): e for e in collapse_log}
    filled = []
    for g in spine.walk():
        unit = spine[g]
        for q in workload.query_names:
            if (g, q) in have:
                continue
            parent = unit.parent_geocode
            if parent is None or (parent, q) not in have:
                raise HoleError(f"hole at {g}/{q} has no parent measurement to copy")
            src = have[(parent, q)]
            if logged is not None:
                e = logged.get((g, q))
                if e is None or e.parent_geocode != parent or e.effective_variance != src.variance:
                    raise HoleError(f"hole at {g}/{q} does not match the collapse log")
            row = NoisyMeasurement(g, unit.level, q, src.value, src.variance, {"filled": 1})
            have[(g, q)] = row
            filled.append(row)
    return list(rows) + filled


# --- published data ------------------------------------------------------------------


def publish_blocks(block_counts: Mapping[str, np.ndarray], spine: Spine,
                   matrix: AggregationMatrix) -> list[tuple[str, str, int]]:
    """Tabulate statistics from block-level detailed counts as ``(block_geoid, statistic, value)``."""
    out = []
    for g, counts in block_counts.items():
        vals = matrix.entries.astype(np.int64) @ np.asarray(counts, dtype=np.int64)
        geoid = spine[g].tabulation_geoid
        out.extend((geoid, s, int(v)) for s, v in zip(matrix.statistics, vals))
    return out


PUBLISHED_HEADER = ["block_geoid", "statistic", "value"]


def write_published(rows: Iterable[tuple[str, str, int]], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(PUBLISHED_HEADER)
        w.writerows(rows)


def read_published(path) -> list[tuple[str, str, int]]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != PUBLISHED_HEADER:
            raise LinkError(f"{path}: expected header {','.join(PUBLISHED_HEADER)}")
        return [(r["block_geoid"], r["statistic"], int(r["value"])) for r in reader]


def aggregate_published(published: Iterable[tuple[str, str, int]], correspondence: Sequence[CorrespondenceRow],
                        level: GeoLevel | str, traditional: bool = False) -> dict[tuple[str, str], int]:
    """Exact sums of published block values per NMF geocode (or traditional GEOID) at ``level``."""
    level = GeoLevel.parse(level)
    by_block = {r.block_geoid: r for r in correspondence}
    out: dict[tuple[str, str], int] = defaultdict(int)
    missing = []
    for geoid, stat, value in published:
        r = by_block.get(geoid)
        if r is None:
            missing.append(geoid)
            continue
        key = r.geoid_at(level) if traditional else r.geocode_at(level)
        out[(key, stat)] += int(value)
    if missing:
        raise LinkError(f"published blocks missing from correspondence: {', '.join(sorted(set(missing)))}")
    return dict(out)


# --- AI/AN recombination ---------------------------------------------------------------


@dataclass(frozen=True)
class TraditionalEstimate:
    geoid: str
    level: GeoLevel
    statistic: str
    estimate: float
    variance: float
    parts: tuple[str, ...]


def recombine_aian(pooled: Iterable[PooledEstimate],
                   correspondence: Sequence[CorrespondenceRow] | None = None) -> list[TraditionalEstimate]:
    """Sum the AI/AN and non-AI/AN parts of each tabulation geography.

    The parts carry independent noise, so variances add.
    """
    known = None
    if correspondence is not None:
        known = {r.geocode_at(lv) for r in correspondence for lv in GeoLevel}
    groups: dict[tuple[str, str], list[PooledEstimate]] = defaultdict(list)
    levels = set()
    for p in pooled:
        lv = p.level if p.level is not None else geocode_level(p.geocode)
        if lv == GeoLevel.OBG:
            raise LinkError("optimized block groups have no tabulation counterpart to recombine into")
        if known is not None and p.geocode not in known:
            raise LinkError(f"{p.geocode} is not in the correspondence table")
        levels.add(lv)
        groups[(split_geocode(p.geocode)[1], p.statistic)].append(p)
    if len(levels) > 1:
        raise LinkError("recombine_aian expects estimates from a single level")
    out = []
    for (geoid, stat), parts in groups.items():
        lv = next(iter(levels))
        out.append(TraditionalEstimate(geoid, lv, stat, float(sum(p.estimate for p in parts)),
                                       float(sum(p.variance for p in parts)), tuple(p.geocode for p in parts)))
    return out


# --- off-spine geographies ----------------------------------------------------------------


@dataclass(frozen=True)
class OffSpineGeography:
    name: str
    blocks: frozenset[str]  # tabulation block GEOIDs


@dataclass(frozen=True)
class Cover:
    geography: str
    units: tuple[str, ...]  # ordered coarse to fine, then by geocode

    @property
    def residual_blocks(self) -> tuple[str, ...]:
        return tuple(g for g in self.units if geocode_level(g) == GeoLevel.BLOCK)


def member_blocks(geography: OffSpineGeography, spine: Spine) -> set[str]:
    """Spine block geocodes of a geography; structural zeros are dropped with a warning."""
    zero = {z.geoid for z in spine.zero_blocks}
    out, dropped, unknown = set(), [], []
    for geoid in geography.blocks:
        if geoid in spine.by_geoid:
            out.add(spine.by_geoid[geoid])
        elif geoid in zero:
            dropped.append(geoid)
        else:
            unknown.append(geoid)
    if unknown:
        raise LinkError(f"{geography.name}: blocks not on the spine: {', '.join(sorted(unknown))}")
    if dropped:
        log.warning("%s: dropping %d structural-zero block(s)", geography.name, len(dropped))
    return out


def greedy_cover(geography: OffSpineGeography, spine: Spine) -> Cover:
    """Coarsest fully contained spine units, then finer ones for the remainder."""
    remaining = member_blocks(geography, spine)
    taken = []
    stack = list(reversed(spine.roots))
    while stack and remaining:
        g = stack.pop()
        blocks = spine.block_set(g)
        if blocks <= remaining:
            taken.append(g)
            remaining -= blocks
        elif not blocks.isdisjoint(remaining):
            stack.extend(reversed(spine[g].children))
    taken.sort(key=lambda g: (spine[g].level, g))
    return Cover(geography.name, tuple(taken))


def block_cover(geography: OffSpineGeography, spine: Spine) -> Cover:
    return Cover(geography.name, tuple(sorted(member_blocks(geography, spine))))


def index_pooled(pooled: Iterable[PooledEstimate]) -> dict[tuple[str, str], PooledEstimate]:
    return {(p.geocode, p.statistic): p for p in pooled}


def estimate_offspine(cover: Cover, pooled: Mapping[tuple[str, str], PooledEstimate] | Iterable[PooledEstimate],
                      statistic: str) -> tuple[float, float]:
    if not isinstance(pooled, Mapping):
        pooled = index_pooled(pooled)
    est, var = 0.0, 0.0
    for g in cover.units:
        p = pooled.get((g, statistic))
        if p is None:
            raise MissingEstimateError(f"no pooled {statistic} estimate for cover unit {g}")
        est += p.estimate
        var += p.variance
    return est, var


def block_sum_estimate(geography: OffSpineGeography, spine: Spine, pooled, statistic: str) -> tuple[float, float]:
    return estimate_offspine(block_cover(geography, spine), pooled, statistic)


# --- district and assignment files ------------------------------------------------------

COVER_HEADER = ["geography", "geocode", "level"]


def load_districts(path) -> list[OffSpineGeography]:
    with open(path, encoding="utf-8") as f:
        d = json.load(f)
    return [OffSpineGeography(str(k), frozenset(v)) for k, v in d.items()]


def save_districts(geographies: Iterable[OffSpineGeography], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump({g.name: sorted(g.blocks) for g in geographies}, f, indent=2)
        f.write("\n")


def export_generalized_assignment(covers: Iterable[Cover], path) -> int:
    n = 0
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(COVER_HEADER)
        for c in covers:
            for g in c.units:
                w.writerow([c.geography, g, geocode_level(g).name])
                n += 1
    return n


def read_generalized_assignment(path) -> list[Cover]:
    units: dict[str, list[str]] = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != COVER_HEADER:
            raise LinkError(f"{path}: expected header {','.join(COVER_HEADER)}")
        for r in reader:
            if geocode_level(r["geocode"]).name != r["level"]:
                raise LinkError(f"{path}: level {r['level']} does not match geocode {r['geocode']}")
            units.setdefault(r["geography"], []).append(r["geocode"])
    return [Cover(name, tuple(gs)) for name, gs in units.items()]
