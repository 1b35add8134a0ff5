import numpy as np
import pytest

from nmf_forge.model import QuerySpec, Workload
from nmf_forge.nmfio import NoisyMeasurement
from nmf_forge.simulate import (BudgetSchedule, ScheduleError, collapse_plan, effective_variances,
                                generate_microdata, read_collapse_log, replicate_seed, run_das, state_totals,
                                tabulate, toy_postprocess, write_collapse_log)
from nmf_forge.spine import GeoLevel, SpineConfig, build_spine

LEVEL_VAR = {GeoLevel.STATE: 1.0, GeoLevel.COUNTY: 2.0, GeoLevel.TRACT: 3.0, GeoLevel.OBG: 5.0,
             GeoLevel.BLOCK: 7.0}


def leveled(workload):
    return BudgetSchedule({(lv, q): v for lv, v in LEVEL_VAR.items() for q in workload.query_names})


@pytest.fixture(scope="module")
def small_spine():
    return build_spine(SpineConfig(states=1, counties_per_state=1, tracts_per_county=2, blocks_per_tract=6), 3)


@pytest.fixture(scope="module")
def small_truth(small_spine, small_workload):
    return tabulate(generate_microdata(small_spine, 10, 4), small_spine, small_workload)


def test_microdata_reproducible_and_seed_sensitive(toy_spine):
    a = generate_microdata(toy_spine, 10, 1)
    assert a == generate_microdata(toy_spine, 10, 1)
    assert a != generate_microdata(toy_spine, 10, 2)
    assert {p.block_geocode for p in a} <= {b.geocode for b in toy_spine.blocks}


def test_vacant_blocks_empty(toy_spine):
    assert generate_microdata(toy_spine, 10, 1, vacant_fraction=1.0) == []
    people = generate_microdata(toy_spine, 10, 1, vacant_fraction=0.5)
    occupied = {p.block_geocode for p in people}
    assert 0 < len(occupied) < len(toy_spine.blocks)


def test_tabulate_additive(toy_spine, toy_truth, workload):
    for g, u in toy_spine.units.items():
        if u.children:
            for q in ("total_dpq", "detailed_dpq", "race_dpq"):
                kids = sum(toy_truth.counts(c, q) for c in u.children)
                assert (toy_truth.counts(g, q) == kids).all()
    for g in toy_spine.units:
        assert toy_truth.counts(g, "total_dpq")[0] == toy_truth.counts(g, "detailed_dpq").sum()
    for q in workload.queries:
        assert toy_truth.counts(toy_spine.roots[0], q.name).sum() == toy_truth.total(toy_spine.roots[0])


def test_tabulate_rejects_unknown_block(toy_spine):
    from nmf_forge.simulate import Person
    with pytest.raises(ValueError):
        tabulate([Person("000440010000011000", (0, 0, 1, 0))], toy_spine)


def test_collapse_harmonic_variance(small_workload):
    # one county under the state; 3 blocks per tract fit in a single OBG
    spine = build_spine(SpineConfig(states=1, counties_per_state=1, tracts_per_county=2, blocks_per_tract=3), 3)
    plan = collapse_plan(spine)
    eff = effective_variances(spine, small_workload, leveled(small_workload))
    state = spine.roots[0]
    county = spine[state].children[0]
    assert plan[county] == state
    assert eff[(state, "total_dpq")] == pytest.approx(1 / (1 / 1.0 + 1 / 2.0))
    for tract in spine[county].children:
        (obg,) = spine[tract].children
        assert plan[obg] == tract
        assert eff[(tract, "total_dpq")] == pytest.approx(1 / (1 / 3.0 + 1 / 5.0))
        for b in spine[obg].children:
            assert eff[(b, "total_dpq")] == 7.0


def test_collapse_chain_uses_nearest_measured_ancestor(small_workload):
    spine = build_spine(SpineConfig(states=1, counties_per_state=1, tracts_per_county=1, blocks_per_tract=1), 0)
    plan = collapse_plan(spine)
    root = spine.roots[0]
    assert set(plan.values()) == {root}
    assert len(plan) == 4
    eff = effective_variances(spine, small_workload, leveled(small_workload))
    assert eff == {(root, q): pytest.approx(1 / sum(1 / v for v in LEVEL_VAR.values()))
                   for q in small_workload.query_names}


def test_run_das_rows_and_collapse_log(tmp_path, small_spine, small_truth, small_workload):
    sched = leveled(small_workload)
    rows, log = run_das(small_truth, small_spine, small_workload, sched, 5)
    plan = collapse_plan(small_spine)
    measured = [g for g in small_spine.units if g not in plan]
    assert len(rows) == len(measured) * 2
    assert {r.geocode for r in rows} == set(measured)
    assert {(e.removed_geocode, e.query) for e in log} == {(g, q) for g in plan for q in small_workload.query_names}
    eff = effective_variances(small_spine, small_workload, sched)
    for e in log:
        assert e.parent_geocode == small_spine[e.removed_geocode].parent_geocode
        assert e.effective_variance == eff[(plan[e.removed_geocode], e.query)]
    write_collapse_log(log, tmp_path / "c.csv")
    assert read_collapse_log(tmp_path / "c.csv") == log


def test_run_das_reproducible_and_order_free(small_spine, small_truth, small_workload):
    sched = BudgetSchedule.uniform(small_workload, 2.0)
    a, _ = run_das(small_truth, small_spine, small_workload, sched, 9)
    b, _ = run_das(small_truth, small_spine, small_workload, sched, 9)
    assert a == b
    rev = Workload(tuple(reversed(small_workload.queries)), "rev", small_workload.statistics)
    c, _ = run_das(small_truth, small_spine, rev, sched, 9)
    assert sorted(a, key=lambda r: (r.geocode, r.query)) == sorted(c, key=lambda r: (r.geocode, r.query))
    d, _ = run_das(small_truth, small_spine, small_workload, sched, 10)
    assert a != d


def test_missing_schedule_entry_named(small_spine, small_truth, small_workload):
    sched = BudgetSchedule({(lv, "total_dpq"): 1.0 for lv in GeoLevel})
    with pytest.raises(ScheduleError, match="votingage_hispanic_dpq"):
        run_das(small_truth, small_spine, small_workload, sched, 1)
    with pytest.raises(ScheduleError):
        BudgetSchedule({(GeoLevel.STATE, "total_dpq"): 0.0})


def test_degenerate_noise_reproduces_truth(small_spine, small_truth, small_workload):
    rows, _ = run_das(small_truth, small_spine, small_workload, BudgetSchedule.uniform(small_workload, 1e-9), 3)
    for r in rows:
        assert list(r.value) == small_truth.counts(r.geocode, r.query).tolist()


def test_schedule_io_and_rho(tmp_path, workload):
    sched = BudgetSchedule.from_rho(workload, 1.0, {lv: 0.2 for lv in GeoLevel},
                                    {q: 1 / 11 for q in workload.query_names})
    assert sched.variance(GeoLevel.BLOCK, "total_dpq") == pytest.approx(1 / (2 * 0.2 / 11))
    sched.save(tmp_path / "s.json")
    assert BudgetSchedule.load(tmp_path / "s.json").variances == sched.variances


def test_unbiased_over_reruns(small_spine, small_truth, small_workload):
    sched = BudgetSchedule.uniform(small_workload, 2.0)
    n = 1000
    acc = {}
    for r in range(n):
        rows, _ = run_das(small_truth, small_spine, small_workload, sched, replicate_seed(17, r))
        for row in rows:
            acc.setdefault((row.geocode, row.query), []).append(row.value)
    for (g, q), vals in acc.items():
        v = np.asarray(vals, dtype=float)
        se = v.std(axis=0, ddof=1) / np.sqrt(n)
        z = (v.mean(axis=0) - small_truth.counts(g, q)) / se
        assert np.abs(z).max() <= 4, (g, q)


def _detailed_rows(spine, truth, noise=None):
    rows = []
    for g in spine.units:
        v = truth.counts(g, "detailed_dpq").copy()
        if noise is not None:
            v = v + noise(g, v.size)
        rows.append(NoisyMeasurement(g, spine[g].level, "detailed_dpq", tuple(v.tolist()), 2.0))
    return rows


def test_postprocess_noise_free_is_identity(toy_spine, toy_truth):
    out = toy_postprocess(_detailed_rows(toy_spine, toy_truth), toy_spine, state_totals(toy_truth, toy_spine))
    for b in toy_spine.blocks:
        assert (out[b.geocode] == toy_truth.counts(b.geocode, "detailed_dpq")).all()


def test_postprocess_clamps_and_hits_state_total(toy_spine, toy_truth):
    rng = np.random.default_rng(0)
    rows = _detailed_rows(toy_spine, toy_truth, lambda g, n: rng.integers(-3, 4, n))
    totals = state_totals(toy_truth, toy_spine)
    out = toy_postprocess(rows, toy_spine, totals)
    assert all((v >= 0).all() for v in out.values())
    assert sum(int(v.sum()) for v in out.values()) == sum(totals.values())
    assert set(out) == {b.geocode for b in toy_spine.blocks}


def test_postprocess_fills_from_ancestor(toy_spine, toy_truth):
    rows = [r for r in _detailed_rows(toy_spine, toy_truth) if r.level != GeoLevel.BLOCK]
    out = toy_postprocess(rows, toy_spine, state_totals(toy_truth, toy_spine))
    assert all((v >= 0).all() for v in out.values())
    with pytest.raises(ValueError):
        toy_postprocess([], toy_spine, state_totals(toy_truth, toy_spine))


def test_state_totals_keyed_by_traditional_state(toy_spine, toy_truth):
    totals = state_totals(toy_truth, toy_spine)
    assert list(totals) == ["44"]
    assert totals["44"] == sum(toy_truth.total(b.geocode) for b in toy_spine.blocks)
