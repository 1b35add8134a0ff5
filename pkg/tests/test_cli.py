import json
import subprocess
import sys

import pytest

from nmf_forge.aggregate import (aggregate_rows, aggregation_matrices, estimate_records, pool_all,
                                 pooled_records)
from nmf_forge.cli import main
from nmf_forge.geolink import fill_holes, read_generalized_assignment
from nmf_forge.model import default_workload
from nmf_forge.nmfio import read_nmf, write_nmf
from nmf_forge.simulate import BudgetSchedule, generate_microdata, replicate_seed, run_das, tabulate
from nmf_forge.spine import GeoLevel, SpineConfig, build_spine, load_spine
from nmf_forge.tables import read_table

SPINE_CFG = {"states": 1, "counties_per_state": 2, "tracts_per_county": 2, "blocks_per_tract": [3, 9],
             "aian_fraction": 0.2, "zero_fraction": 0.1}


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "spine_cfg.json").write_text(json.dumps(SPINE_CFG))
    BudgetSchedule.uniform(default_workload(), 2.0).save(d / "schedule.json")
    assert main(["spine", "--config", str(d / "spine_cfg.json"), "--seed", "5", "--out", str(d / "spine")]) == 0
    assert main(["simulate", "--spine", str(d / "spine"), "--schedule", str(d / "schedule.json"), "--seed", "8",
                 "--replicate", "2", "--out", str(d / "sim")]) == 0
    assert main(["fill-holes", "--in", str(d / "sim/nmf.ndjson"), "--spine", str(d / "spine"),
                 "--collapse-log", str(d / "sim/collapse_log.csv"), "--out", str(d / "filled.ndjson")]) == 0
    assert main(["aggregate", "--in", str(d / "filled.ndjson"), "--out", str(d / "estimates.csv")]) == 0
    for mode in ("pool-all", "min-var"):
        assert main(["pool", "--in", str(d / "estimates.csv"), "--mode", mode,
                     "--out", str(d / f"pooled_{mode}.csv")]) == 0
    return d


def test_simulate_matches_library(run_dir):
    spine = build_spine(SpineConfig.from_dict(SPINE_CFG), 5)
    assert load_spine(run_dir / "spine").digest == spine.digest
    wl = default_workload()
    truth = tabulate(generate_microdata(spine, 10.0, 8, 0.0), spine, wl)
    rows, log = run_das(truth, spine, wl, BudgetSchedule.uniform(wl, 2.0), replicate_seed(8, 2))
    write_nmf(rows, run_dir / "expected.ndjson")
    assert (run_dir / "sim/nmf.ndjson").read_bytes() == (run_dir / "expected.ndjson").read_bytes()
    filled = fill_holes(rows, spine, wl, log)
    assert read_nmf(run_dir / "filled.ndjson") == filled
    est = estimate_records(aggregate_rows(filled, aggregation_matrices(wl)))
    assert read_table(run_dir / "estimates.csv") == [{k: str(v) if not isinstance(v, float) else repr(v)
                                                       for k, v in r.items()} for r in est]
    for mode in ("pool-all", "min-var"):
        expected = pooled_records(pool_all(aggregate_rows(filled, aggregation_matrices(wl)), mode), mode)
        got = read_table(run_dir / f"pooled_{mode}.csv")
        assert [(r["geocode"], r["statistic"], float(r["estimate"]), float(r["variance"]), r["mode"]) for r in got] \
            == [(r["geocode"], r["statistic"], r["estimate"], r["variance"], r["mode"]) for r in expected]


def test_min_var_flag_changes_output(run_dir):
    a = read_table(run_dir / "pooled_pool-all.csv")
    b = read_table(run_dir / "pooled_min-var.csv")
    assert {r["mode"] for r in b} == {"min-var"}
    assert all(float(y["variance"]) >= float(x["variance"]) for x, y in zip(a, b))
    assert any(float(y["variance"]) > float(x["variance"]) for x, y in zip(a, b))


def test_estimate_and_assignment_reuse(run_dir):
    spine = load_spine(run_dir / "spine")
    tract = spine.level_units(GeoLevel.TRACT)[0]
    districts = {"t": sorted(spine[b].tabulation_geoid for b in spine.block_set(tract.geocode)),
                 "few": sorted(b.tabulation_geoid for b in spine.blocks)[:5]}
    (run_dir / "districts.json").write_text(json.dumps(districts))
    args = ["estimate", "--districts", str(run_dir / "districts.json"), "--spine", str(run_dir / "spine"),
            "--pooled", str(run_dir / "pooled_min-var.csv"), "--mode", "min-var"]
    assert main(args + ["--out", str(run_dir / "est1")]) == 0
    covers = read_generalized_assignment(run_dir / "est1/cover.csv")
    assert covers[0].units == (tract.geocode,)
    assert main(args + ["--assignment", str(run_dir / "est1/cover.csv"), "--out", str(run_dir / "est2")]) == 0
    assert (run_dir / "est1/district_estimates.csv").read_bytes() == (run_dir / "est2/district_estimates.csv").read_bytes()
    rows = read_table(run_dir / "est1/district_estimates.csv")
    t = [r for r in rows if r["geography"] == "t" and r["statistic"] == "total_pop"][0]
    assert float(t["variance"]) <= float(t["block_sum_variance"])
    # a pooled file from the other mode is refused
    bad = ["estimate", "--districts", str(run_dir / "districts.json"), "--spine", str(run_dir / "spine"),
           "--pooled", str(run_dir / "pooled_pool-all.csv"), "--mode", "min-var", "--out", str(run_dir / "x")]
    assert main(bad) == 1


def test_unnest_link_and_spec(run_dir):
    assert main(["unnest", "--in", str(run_dir / "sim/nmf.ndjson"), "--out", str(run_dir / "labeled.csv")]) == 0
    n_rows = len(read_nmf(run_dir / "sim/nmf.ndjson"))
    assert len((run_dir / "labeled.csv").read_text().splitlines()) == 1 + n_rows // 11 * 2616
    assert main(["link", "--spine", str(run_dir / "spine"), "--published", str(run_dir / "sim/published.csv"),
                 "--level", "county", "--traditional", "--out", str(run_dir / "link")]) == 0
    trad = read_table(run_dir / "link/published_county_traditional.csv")
    assert {r["geoid"] for r in trad} == {"44001", "44003"}
    assert main(["aggregate", "--spec-only", "--out", str(run_dir / "spec.csv")]) == 0
    assert main(["aggregate", "--spec", str(run_dir / "spec.csv"), "--in", str(run_dir / "filled.ndjson"),
                 "--out", str(run_dir / "est_spec.csv")]) == 0
    assert (run_dir / "est_spec.csv").read_bytes() == (run_dir / "estimates.csv").read_bytes()


def test_verify_command(tmp_path):
    cfg = {"spine": {"states": 1, "counties_per_state": 1, "tracts_per_county": 2, "blocks_per_tract": 5},
           "replicates": 3, "statistics": ["total_pop"], "districts": {"random": 3, "seed": 2}}
    (tmp_path / "exp.json").write_text(json.dumps(cfg))
    assert main(["verify", "--config", str(tmp_path / "exp.json"), "--replicates", "2",
                 "--out", str(tmp_path / "v")]) == 0
    assert {p.name for p in (tmp_path / "v").iterdir()} == {"report.csv", "comparison.csv", "experiment.json"}
    assert json.loads((tmp_path / "v/experiment.json").read_text())["replicates"] == 2


@pytest.mark.parametrize("argv,code", [
    ([], 1),
    (["nope"], 1),
    (["pool", "--in", "x.csv"], 1),
    (["pool", "--in", "/nonexistent/x.csv", "--out", "y.csv"], 2),
    (["pool", "--in", "x.csv", "--mode", "average", "--out", "y.csv"], 1),
])
def test_exit_codes(argv, code, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == code


def test_validation_error_exit_1(tmp_path):
    p = tmp_path / "bad.ndjson"
    p.write_text('{"geocode":"10044","level":"STATE","query":"total_dpq","value":[1,2],"variance":1.0}\n')
    assert main(["aggregate", "--in", str(p), "--out", str(tmp_path / "e.csv")]) == 1


def test_version_and_help(capsys):
    assert main(["--version"]) == 0
    out = capsys.readouterr().out
    assert "pl94-toy-1" in out and "pl94-toy-11" in out
    with pytest.raises(SystemExit) as e:
        main(["pool", "--help"])
    assert e.value.code == 0
    assert "file formats:" in capsys.readouterr().out


def test_console_script_entry_point():
    r = subprocess.run([sys.executable, "-m", "nmf_forge.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and "nmf-forge" in r.stdout
