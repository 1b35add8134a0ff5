import time

import pytest

from nmf_forge.model import QuerySpec, Workload, default_codebook, default_workload
from nmf_forge.simulate import BudgetSchedule, generate_microdata, tabulate
from nmf_forge.spine import SpineConfig, build_spine
from nmf_forge.verify import ExperimentConfig, simulate_replicates

# Criterion-4 toy spine: 1 state, 2 counties, 4 tracts, 12 OBGs, ~48 blocks (minus structural zeros).
TOY_SPINE = SpineConfig(states=1, counties_per_state=2, tracts_per_county=2, blocks_per_tract=12, obg_size=4,
                        zero_fraction=0.1)
MC_REPLICATES = 1000
_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line per acceptance criterion; returns the verdict."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def record(n, ok, detail):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'} | {detail}"
        print("\n" + line)
        lines.append((n, line))
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def codebook():
    return default_codebook()


@pytest.fixture(scope="session")
def workload():
    return default_workload()


@pytest.fixture(scope="session")
def small_workload(workload):
    """Two cheap queries, enough for total_pop/vap/hispanic statistics."""
    return Workload(
        (QuerySpec("total_dpq", ()), QuerySpec("votingage_hispanic_dpq", ("voting_age", "hispanic"))),
        "small", workload.statistics[:4],
    )


@pytest.fixture(scope="session")
def toy_spine():
    return build_spine(TOY_SPINE, 7)


@pytest.fixture(scope="session")
def toy_truth(toy_spine, workload):
    return tabulate(generate_microdata(toy_spine, 10, 11, 0.15), toy_spine, workload)


@pytest.fixture(scope="session")
def uniform_schedule(workload):
    return BudgetSchedule.uniform(workload, 2.0)


@pytest.fixture(scope="session")
def mc_config():
    return ExperimentConfig(spine=TOY_SPINE, replicates=MC_REPLICATES)


@pytest.fixture(scope="session")
def mc_results(mc_config):
    """The shared 1000-replicate run behind the unbiasedness/calibration/independence checks."""
    start = time.perf_counter()
    results = simulate_replicates(mc_config)
    results.elapsed = time.perf_counter() - start
    return results


@pytest.fixture(scope="session")
def tract16_results():
    """One full tract of 16 uniform-variance blocks as a district."""
    spine_cfg = SpineConfig(states=1, counties_per_state=1, tracts_per_county=2, blocks_per_tract=16, obg_size=4)
    spine = build_spine(spine_cfg, 1)
    tract = sorted(u.geocode for u in spine.level_units(2))[0]
    district = sorted(spine[b].tabulation_geoid for b in spine.block_set(tract))
    cfg = ExperimentConfig(spine=spine_cfg, spine_seed=1, vacant_fraction=0.0, replicates=MC_REPLICATES,
                           schedule={lv: 2.0 for lv in ("STATE", "COUNTY", "TRACT", "OBG", "BLOCK")},
                           statistics=["total_pop"], districts={"full_tract": district}, modes=["pool-all"],
                           master_seed=99)
    return simulate_replicates(cfg)
