"""Monte Carlo checks of the NMF pipeline.

An experiment fixes a spine and its microdata, then reruns the noisy
measurement, hole filling, aggregation and pooling under independent
replicate seeds. Every tracked estimate becomes a series over replicates
which is compared against the known truth:

* bias z-score ``(mean - truth) / sqrt(empirical_var / R)``
* calibration ratio ``empirical_var / reported_var``
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .aggregate import PoolMode, aggregate_rows, aggregation_matrices, pool_all
from .geolink import (OffSpineGeography, block_cover, estimate_offspine, fill_holes, greedy_cover, index_pooled,
                      member_blocks)
from .model import Codebook, StatisticSpec, Workload, default_codebook, default_workload
from .simulate import (BudgetSchedule, GroundTruth, generate_microdata, replicate_seed, run_das, state_totals,
                       tabulate, toy_postprocess)
from .spine import GeoLevel, Spine, SpineConfig, build_spine

log = logging.getLogger(__name__)

Z_THRESHOLD = 4.0
VARIANCE_BAND = (0.9, 1.1)
DEGENERATE_VARIANCE = 1e-6


class ExperimentError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    spine: SpineConfig = field(default_factory=SpineConfig)
    spine_seed: int = 7
    persons_mean: float = 10.0
    vacant_fraction: float = 0.15
    microdata_seed: int = 11
    schedule: dict = field(default_factory=lambda: {"STATE": 1.0, "COUNTY": 2.0, "TRACT": 2.0, "OBG": 4.0, "BLOCK": 4.0})
    replicates: int = 1000
    statistics: list[str] | None = None
    districts: dict = field(default_factory=lambda: {"random": 25, "seed": 3})
    modes: list[str] = field(default_factory=lambda: ["pool-all", "min-var"])
    master_seed: int = 20230615
    z_threshold: float = Z_THRESHOLD
    variance_band: tuple[float, float] = VARIANCE_BAND
    workers: int = 1

    def __post_init__(self):
        if isinstance(self.spine, dict):
            self.spine = SpineConfig.from_dict(self.spine)
        if self.replicates < 2:
            raise ExperimentError("an experiment needs at least 2 replicates")
        self.variance_band = tuple(self.variance_band)
        for m in self.modes:
            PoolMode.parse(m)

    def build_schedule(self, workload: Workload) -> BudgetSchedule:
        """``schedule`` maps a level to one variance for all queries, or to a per-query dict."""
        out = {}
        for lv in GeoLevel:
            spec = self.schedule.get(lv.name, self.schedule.get(lv.name.lower()))
            if spec is None:
                raise ExperimentError(f"schedule has no entry for level {lv.name}")
            for q in workload.query_names:
                out[(lv, q)] = spec[q] if isinstance(spec, dict) else spec
        return BudgetSchedule(out)

    def to_dict(self) -> dict:
        return {
            "spine": self.spine.to_dict(), "spine_seed": self.spine_seed, "persons_mean": self.persons_mean,
            "vacant_fraction": self.vacant_fraction, "microdata_seed": self.microdata_seed,
            "schedule": self.schedule, "replicates": self.replicates, "statistics": self.statistics,
            "districts": self.districts, "modes": list(self.modes), "master_seed": self.master_seed,
            "z_threshold": self.z_threshold, "variance_band": list(self.variance_band), "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)
            f.write("\n")


def random_districts(spine: Spine, n: int, seed: int) -> list[OffSpineGeography]:
    """Random block sets mixing whole tracts, whole OBGs and loose blocks."""
    rng = np.random.default_rng(seed)
    tracts = sorted(u.geocode for u in spine.level_units(GeoLevel.TRACT))
    out = []
    for i in range(n):
        chosen: set[str] = set()
        for t in rng.choice(tracts, size=min(len(tracts), int(rng.integers(1, 3))), replace=False):
            for obg in spine[str(t)].children:
                r = rng.random()
                if r < 0.5:
                    chosen |= spine.block_set(obg)
                elif r < 0.8:
                    chosen |= {b for b in sorted(spine.block_set(obg)) if rng.random() < 0.5}
        if not chosen:
            chosen = {sorted(spine.block_set(tracts[int(rng.integers(len(tracts)))]))[0]}
        out.append(OffSpineGeography(f"district_{i:02d}", frozenset(spine[b].tabulation_geoid for b in chosen)))
    return out


def true_statistic(truth: GroundTruth, geocodes, stat: StatisticSpec) -> int:
    cb = truth.codebook
    mask = np.ones(cb.shape, dtype=bool)
    for name, allowed in stat.predicate.items():
        ax = cb.axis(name)
        sel = np.array([c in allowed for c in cb.attribute(name).codes])
        shape = [1] * len(cb.shape)
        shape[ax] = -1
        mask &= sel.reshape(shape)
    return int(sum(truth.cells[g][mask].sum() for g in geocodes))


# --- experiment context and replicate loop -------------------------------------------


@dataclass(frozen=True)
class SeriesKey:
    kind: str          # unit | district | block
    subject: str       # geocode or district name
    estimator: str     # pooled | greedy_cover | block_sum | postprocessed
    mode: str          # pool-all | min-var | "" for postprocessed
    statistic: str


class Context:
    """Everything fixed across replicates."""

    def __init__(self, config: ExperimentConfig, workload: Workload | None = None, codebook: Codebook | None = None):
        self.config = config
        self.codebook = codebook or default_codebook()
        self.workload = workload or default_workload()
        self.spine = build_spine(config.spine, config.spine_seed)
        people = generate_microdata(self.spine, config.persons_mean, config.microdata_seed,
                                    config.vacant_fraction, self.codebook)
        self.truth = tabulate(people, self.spine, self.workload, self.codebook)
        self.schedule = config.build_schedule(self.workload)
        names = config.statistics or [s.name for s in self.workload.statistics]
        self.stats = [self.workload.statistic(s) for s in names]
        self.matrices = aggregation_matrices(self.workload, self.codebook, self.stats)
        self.modes = [PoolMode.parse(m) for m in config.modes]
        self.districts = self._districts()
        self.covers = {d.name: greedy_cover(d, self.spine) for d in self.districts}
        self.block_covers = {d.name: block_cover(d, self.spine) for d in self.districts}
        self.totals = state_totals(self.truth, self.spine)
        self.zero_blocks = [b.geocode for b in self.spine.blocks if self.truth.total(b.geocode) == 0]
        self.keys = self._keys()

    def _districts(self) -> list[OffSpineGeography]:
        d = self.config.districts or {}
        if "random" in d:
            return random_districts(self.spine, int(d["random"]), int(d.get("seed", 0)))
        return [OffSpineGeography(k, frozenset(v)) for k, v in d.items()]

    def _keys(self) -> list[SeriesKey]:
        keys = []
        for m in self.modes:
            for g in self.spine.walk():
                for s in self.stats:
                    keys.append(SeriesKey("unit", g, "pooled", m.value, s.name))
            for d in self.districts:
                for est in ("greedy_cover", "block_sum"):
                    for s in self.stats:
                        keys.append(SeriesKey("district", d.name, est, m.value, s.name))
        if "total_pop" in {s.name for s in self.stats}:
            for b in self.zero_blocks:
                keys.append(SeriesKey("block", b, "postprocessed", "", "total_pop"))
        return keys

    def truth_of(self, key: SeriesKey) -> int:
        stat = self.workload.statistic(key.statistic)
        if key.kind == "district":
            geocodes = member_blocks(next(d for d in self.districts if d.name == key.subject), self.spine)
        else:
            geocodes = [key.subject]
        return true_statistic(self.truth, geocodes, stat)

    def replicate(self, r: int) -> tuple[np.ndarray, np.ndarray]:
        """Estimates and reported variances for every key in one replicate."""
        seed = replicate_seed(self.config.master_seed, r)
        rows, collapse = run_das(self.truth, self.spine, self.workload, self.schedule, seed)
        estimates = aggregate_rows(fill_holes(rows, self.spine, self.workload, collapse), self.matrices)
        pooled = {m.value: index_pooled(pool_all(estimates, m)) for m in self.modes}
        post = None
        est = np.empty(len(self.keys))
        var = np.full(len(self.keys), np.nan)
        for i, k in enumerate(self.keys):
            if k.estimator == "pooled":
                p = pooled[k.mode][(k.subject, k.statistic)]
                est[i], var[i] = p.estimate, p.variance
            elif k.estimator == "greedy_cover":
                est[i], var[i] = estimate_offspine(self.covers[k.subject], pooled[k.mode], k.statistic)
            elif k.estimator == "block_sum":
                est[i], var[i] = estimate_offspine(self.block_covers[k.subject], pooled[k.mode], k.statistic)
            else:
                if post is None:
                    post = toy_postprocess(rows, self.spine, self.totals)
                est[i] = post[k.subject].sum()
        return est, var


def _run_chunk(args) -> tuple[list[int], np.ndarray, np.ndarray]:
    config_dict, indices = args
    ctx = Context(ExperimentConfig.from_dict(config_dict))
    ests, vars_ = zip(*(ctx.replicate(r) for r in indices))
    return list(indices), np.stack(ests), np.stack(vars_)


@dataclass
class Results:
    context: Context
    estimates: np.ndarray  # (keys, replicates)
    variances: np.ndarray

    def series(self, key: SeriesKey) -> np.ndarray:
        return self.estimates[self.context.keys.index(key)]


def simulate_replicates(config: ExperimentConfig, workload: Workload | None = None,
                        codebook: Codebook | None = None) -> Results:
    ctx = Context(config, workload, codebook)
    R = config.replicates
    est = np.empty((len(ctx.keys), R))
    var = np.empty((len(ctx.keys), R))
    if config.workers > 1 and workload is None and codebook is None:
        chunks = [list(c) for c in np.array_split(np.arange(R), config.workers) if len(c)]
        with ProcessPoolExecutor(config.workers) as ex:
            for idx, e, v in ex.map(_run_chunk, [(config.to_dict(), [int(i) for i in c]) for c in chunks]):
                est[:, idx], var[:, idx] = e.T, v.T
    else:
        for r in range(R):
            try:
                est[:, r], var[:, r] = ctx.replicate(r)
            except Exception as e:
                raise ExperimentError(f"replicate {r}: {e}") from e
    return Results(ctx, est, var)


# --- reports ----------------------------------------------------------------------------


@dataclass(frozen=True)
class ReportRow:
    kind: str
    subject: str
    estimator: str
    mode: str
    statistic: str
    truth: float
    mean: float
    empirical_variance: float
    reported_variance: float
    z: float
    variance_ratio: float
    unbiased: bool
    calibrated: bool | None
    criteria: str

    @property
    def passed(self) -> bool:
        return self.unbiased and self.calibrated is not False


REPORT_HEADER = ["kind", "subject", "estimator", "mode", "statistic", "truth", "mean", "empirical_variance",
                 "reported_variance", "z", "variance_ratio", "unbiased", "calibrated", "passed", "criteria"]


def bias_z(x: np.ndarray, truth: float) -> float:
    diff = float(np.mean(x)) - truth
    se = math.sqrt(float(np.var(x, ddof=1)) / len(x))
    # an SE at rounding-error scale means the series is constant
    tol = 1e-9 * max(1.0, abs(truth))
    if se <= tol:
        return 0.0 if abs(diff) <= tol else math.copysign(math.inf, diff)
    return diff / se


def report(results: Results) -> list[ReportRow]:
    ctx = results.context
    lo, hi = ctx.config.variance_band
    out = []
    for i, k in enumerate(ctx.keys):
        x = results.estimates[i]
        truth = float(ctx.truth_of(k))
        emp = float(np.var(x, ddof=1))
        reported = float(np.nanmean(results.variances[i])) if k.estimator != "postprocessed" else math.nan
        z = bias_z(x, truth)
        ratio = emp / reported if reported > 0 else math.nan
        if math.isnan(reported) or reported < DEGENERATE_VARIANCE:
            calibrated = None
        else:
            calibrated = lo <= ratio <= hi
        criteria = {"unit": "4;5", "district": "6;7", "block": "9"}[k.kind]
        if k.kind == "unit" and k.subject in ctx.zero_blocks and k.statistic == "total_pop":
            criteria += ";9"
        out.append(ReportRow(k.kind, k.subject, k.estimator, k.mode, k.statistic, truth, float(np.mean(x)), emp,
                             reported, z, ratio, abs(z) <= ctx.config.z_threshold, calibrated, criteria))
    return out


def run_experiment(config: ExperimentConfig, workload: Workload | None = None,
                   codebook: Codebook | None = None) -> list[ReportRow]:
    return report(simulate_replicates(config, workload, codebook))


def write_report(rows: Sequence[ReportRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in rows:
            w.writerow([r.kind, r.subject, r.estimator, r.mode, r.statistic, repr(r.truth), repr(r.mean),
                        repr(r.empirical_variance), repr(r.reported_variance), repr(r.z), repr(r.variance_ratio),
                        int(r.unbiased), "" if r.calibrated is None else int(r.calibrated), int(r.passed),
                        r.criteria])


def summarize(rows: Sequence[ReportRow]) -> str:
    lines = []
    groups: dict[tuple[str, str, str], list[ReportRow]] = {}
    for r in rows:
        groups.setdefault((r.kind, r.estimator, r.mode), []).append(r)
    for (kind, est, mode), rs in groups.items():
        biased = sum(not r.unbiased for r in rs)
        cal = [r for r in rs if r.calibrated is not None]
        miscal = sum(not r.calibrated for r in cal)
        worst = max(abs(r.z) for r in rs)
        lines.append(f"{kind:8s} {est:13s} {mode or '-':8s} n={len(rs):5d}  |z|>thr: {biased:4d}  "
                     f"max|z|={worst:7.2f}  variance out of band: {miscal}/{len(cal)}")
    return "\n".join(lines)


# --- estimator comparison and independence ---------------------------------------------------


@dataclass(frozen=True)
class ComparisonRow:
    district: str
    statistic: str
    mode: str
    cover_units: int
    blocks: int
    analytic_block_sum: float
    analytic_cover: float
    analytic_min_var_cover: float
    empirical_block_sum: float
    empirical_cover: float
    empirical_min_var_cover: float

    @property
    def analytic_ratio(self) -> float:
        return self.analytic_block_sum / self.analytic_cover

    @property
    def empirical_ratio(self) -> float:
        return self.empirical_block_sum / self.empirical_cover


def compare_estimators(config_or_results: ExperimentConfig | Results, statistic: str = "total_pop") -> list[ComparisonRow]:
    """Block-sum vs greedy cover (pooled) vs greedy cover (min-variance query only), per district."""
    results = (config_or_results if isinstance(config_or_results, Results)
               else simulate_replicates(config_or_results))
    ctx = results.context
    modes = [m.value for m in ctx.modes]
    base = modes[0]
    out = []
    for d in ctx.districts:
        def get(est, mode):
            i = ctx.keys.index(SeriesKey("district", d.name, est, mode, statistic))
            return float(np.nanmean(results.variances[i])), float(np.var(results.estimates[i], ddof=1))
        ab, eb = get("block_sum", base)
        ac, ec = get("greedy_cover", base)
        am, em = get("greedy_cover", "min-var") if "min-var" in modes else (math.nan, math.nan)
        out.append(ComparisonRow(d.name, statistic, base, len(ctx.covers[d.name].units),
                                 len(ctx.block_covers[d.name].units), ab, ac, am, eb, ec, em))
    return out


def disjoint_pairs(ctx: Context) -> list[tuple[str, str]]:
    blocks = {d.name: member_blocks(d, ctx.spine) for d in ctx.districts}
    return [(a, b) for a, b in itertools.combinations(sorted(blocks), 2) if blocks[a].isdisjoint(blocks[b])]


def district_correlations(results: Results, statistic: str = "total_pop",
                          estimator: str = "greedy_cover") -> list[tuple[str, str, str, float]]:
    """Empirical correlation of estimates for every disjoint district pair."""
    ctx = results.context
    out = []
    for mode in (m.value for m in ctx.modes):
        for a, b in disjoint_pairs(ctx):
            xa = results.series(SeriesKey("district", a, estimator, mode, statistic))
            xb = results.series(SeriesKey("district", b, estimator, mode, statistic))
            out.append((mode, a, b, float(np.corrcoef(xa, xb)[0, 1])))
    return out
