"""``nmf-forge`` command line.

Stages hand off through files so every intermediate product can be
inspected. Exit codes: 0 success, 1 validation error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .aggregate import (ESTIMATE_HEADER, POOLED_HEADER, PoolMode, aggregate_rows, aggregation_matrices,
                        estimate_records, estimates_from_records, join_table, matrices_from_join_table, pool_all,
                        pooled_from_records, pooled_records, read_join_table, write_join_table)
from .geolink import (aggregate_published, block_cover, build_correspondence, estimate_offspine,
                      export_generalized_assignment, fill_holes, greedy_cover, index_pooled, load_districts,
                      publish_blocks, read_generalized_assignment, read_published, write_correspondence,
                      write_published)
from .model import load_codebook, load_workload
from .nmfio import read_nmf, unnest, write_labeled, write_nmf
from .simulate import (BudgetSchedule, generate_microdata, read_collapse_log, replicate_seed, run_das,
                       state_totals, tabulate, toy_postprocess, write_collapse_log)
from .spine import GeoLevel, SpineConfig, build_baf, build_spine, load_spine, save_spine
from .tables import read_table, write_table
from .verify import (ExperimentConfig, compare_estimators, district_correlations, report, simulate_replicates,
                     summarize, write_report)

log = logging.getLogger("nmf_forge")

FORMATS_HELP = """\
file formats:
  nmf.ndjson        one JSON object per line with keys geocode, level, query,
                    value (integer list), variance; filled rows add "filled":1
  labeled.csv       geocode,level,query,<one column per attribute>,value,variance
                    ("*" marks an attribute that is not a query dimension)
  estimates.csv     geocode,level,statistic,query,estimate,variance
  pooled.csv        geocode,level,statistic,estimate,variance,mode
  aggregation spec  query,bin_index,statistic
  schedule.json     {"LEVEL": {"query_dpq": variance, ...}, ...}
  collapse_log.csv  removed_geocode,parent_geocode,query,effective_variance
  blocks_aux.csv    geocode,geoid,housing_units (blocks_zero.csv likewise)
  baf.csv           block_geoid,state_gc,county_gc,tract_gc,obg_gc,block_gc,aian
  published.csv     block_geoid,statistic,value
  districts.json    {"name": ["block_geoid", ...], ...}
  cover.csv         geography,geocode,level
"""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(suppress: bool) -> argparse.ArgumentParser:
    # subcommands repeat the global flags without defaults so they never clobber earlier values
    def default(v):
        return argparse.SUPPRESS if suppress else v

    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--codebook", default=default(None), help="codebook.json (default: bundled)")
    g.add_argument("--workload", default=default(None), help="workload.json (default: bundled)")
    g.add_argument("--seed", type=int, default=default(0), help="master seed")
    g.add_argument("--out", default=default(None), help="output file or directory")
    g.add_argument("--format", choices=["csv", "ndjson"], default=default("csv"), help="format for tabular outputs")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common(suppress=True)
    parser = _Parser(prog="nmf-forge", description=__doc__, epilog=FORMATS_HELP,
                     formatter_class=argparse.RawDescriptionHelpFormatter, parents=[_common(suppress=False)])
    parser.add_argument("--version", action="store_true", help="print package, codebook and workload versions")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    def add(name, help_):
        return sub.add_parser(name, help=help_, description=help_, parents=[common], epilog=FORMATS_HELP,
                              formatter_class=argparse.RawDescriptionHelpFormatter)

    p = add("spine", "build a synthetic spine; writes spine.json, blocks_aux.csv, blocks_zero.csv, baf.csv to --out DIR")
    p.add_argument("--config", help="spine config JSON (SpineConfig fields)")

    p = add("simulate", "tabulate, noise and collapse; writes nmf.ndjson, collapse_log.csv, truth.ndjson, published.csv")
    p.add_argument("--spine", required=True, help="directory written by `spine`")
    p.add_argument("--schedule", required=True, help="schedule.json")
    p.add_argument("--replicate", type=int, default=0, help="replicate index; noise seed derives from --seed")
    p.add_argument("--persons-mean", type=float, default=10.0)
    p.add_argument("--vacant-fraction", type=float, default=0.0)

    p = add("unnest", "expand nested NMF rows into labeled cells (--out labeled.csv)")
    p.add_argument("--in", dest="inp", required=True)

    p = add("aggregate", "apply aggregation matrices (--out estimates.csv)")
    p.add_argument("--in", dest="inp", help="nmf.ndjson")
    p.add_argument("--spec", help="aggregation spec CSV to use instead of the workload's statistics")
    p.add_argument("--spec-only", action="store_true", help="write the aggregation spec to --out and stop")

    p = add("pool", "inverse-variance pool estimates (--out pooled.csv)")
    p.add_argument("--in", dest="inp", required=True, help="estimates.csv")
    p.add_argument("--mode", default="pool-all", choices=["pool-all", "min-var"])

    p = add("link", "write correspondence.csv to --out DIR; optionally aggregate published block data")
    p.add_argument("--spine", required=True)
    p.add_argument("--published", help="published.csv to aggregate to NMF geographies")
    p.add_argument("--level", default="TRACT", help="target NMF level for --published")
    p.add_argument("--traditional", action="store_true", help="aggregate to tabulation GEOIDs instead")

    p = add("fill-holes", "fill budget-reallocation holes (--out filled.ndjson)")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--spine", required=True)
    p.add_argument("--collapse-log", help="collapse_log.csv to cross-check inferred holes")

    p = add("estimate", "greedy-cover district estimates; writes cover.csv and district_estimates.csv to --out DIR")
    p.add_argument("--districts", required=True)
    p.add_argument("--pooled", required=True, help="pooled.csv from `pool` (holes filled)")
    p.add_argument("--spine", required=True)
    p.add_argument("--mode", default="pool-all", choices=["pool-all", "min-var"])
    p.add_argument("--assignment", help="existing cover.csv to reuse instead of computing covers")
    p.add_argument("--statistic", action="append", help="statistic(s) to estimate (default: all in pooled file)")

    p = add("verify", "Monte Carlo experiment; writes report.csv and comparison.csv to --out DIR")
    p.add_argument("--config", help="experiment.json (ExperimentConfig fields)")
    p.add_argument("--replicates", type=int, help="override the config's replicate count")
    return parser


def _need_out(args) -> Path:
    if not args.out:
        raise UsageError(f"{args.command}: --out is required")
    return Path(args.out)


def _out_dir(args) -> Path:
    out = _need_out(args)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cmd_spine(args, codebook, workload):
    config = SpineConfig()
    if args.config:
        with open(args.config, encoding="utf-8") as f:
            config = SpineConfig.from_dict(json.load(f))
    spine = build_spine(config, args.seed)
    save_spine(spine, _out_dir(args))
    print(f"spine {spine.digest}: {len(spine.units)} units, {len(spine.blocks)} blocks, "
          f"{len(spine.zero_blocks)} structural zeros")


def _cmd_simulate(args, codebook, workload):
    spine = load_spine(args.spine)
    schedule = BudgetSchedule.load(args.schedule)
    out = _out_dir(args)
    people = generate_microdata(spine, args.persons_mean, args.seed, args.vacant_fraction, codebook)
    truth = tabulate(people, spine, workload, codebook)
    rows, collapse = run_das(truth, spine, workload, schedule, replicate_seed(args.seed, args.replicate))
    write_nmf(rows, out / "nmf.ndjson")
    write_collapse_log(collapse, out / "collapse_log.csv")
    with open(out / "truth.ndjson", "w", encoding="utf-8") as f:
        for g in spine.walk():
            for q in workload.query_names:
                f.write(json.dumps({"geocode": g, "level": spine[g].level.name, "query": q,
                                    "value": truth.counts(g, q).tolist()}, separators=(",", ":")) + "\n")
    full = [q.name for q in workload.queries if set(q.attribute_names) == set(codebook.names)]
    if not full:
        raise ValueError("workload has no fully detailed query to post-process")
    detailed = full[0]
    post = toy_postprocess(rows, spine, state_totals(truth, spine), detailed)
    matrix = aggregation_matrices(workload, codebook)[detailed]
    write_published(publish_blocks(post, spine, matrix), out / "published.csv")
    print(f"{len(rows)} NMF rows, {len(collapse)} collapsed (unit, query) pairs")


def _cmd_unnest(args, codebook, workload):
    out = _need_out(args)
    rows = read_nmf(args.inp, workload, codebook)
    if args.format == "csv":
        n = write_labeled(unnest(rows, codebook, workload), out, codebook)
    else:
        header = ["geocode", "level", "query", *codebook.names, "value", "variance"]
        recs = ({"geocode": c.geocode, "level": c.level.name, "query": c.query,
                 **dict(zip(codebook.names, c.labels)), "value": c.value, "variance": c.variance}
                for c in unnest(rows, codebook, workload))
        n = write_table(recs, header, out, "ndjson")
    print(f"{n} labeled cells")


def _cmd_aggregate(args, codebook, workload):
    out = _need_out(args)
    if args.spec:
        matrices = matrices_from_join_table(read_join_table(args.spec), workload, codebook)
    else:
        matrices = aggregation_matrices(workload, codebook)
    if args.spec_only:
        write_join_table(join_table(matrices), out)
        return
    if not args.inp:
        raise UsageError("aggregate: --in is required unless --spec-only")
    est = aggregate_rows(read_nmf(args.inp, workload, codebook), matrices)
    n = write_table(estimate_records(est), ESTIMATE_HEADER, out, args.format)
    print(f"{n} estimates")


def _cmd_pool(args, codebook, workload):
    out = _need_out(args)
    est = estimates_from_records(read_table(args.inp, ESTIMATE_HEADER))
    pooled = pool_all(est, args.mode)
    n = write_table(pooled_records(pooled, args.mode), POOLED_HEADER, out, args.format)
    print(f"{n} pooled estimates ({args.mode})")


def _cmd_link(args, codebook, workload):
    spine = load_spine(args.spine)
    out = _out_dir(args)
    corr = build_correspondence(build_baf(spine), spine)
    write_correspondence(corr, out / "correspondence.csv")
    if args.published:
        level = GeoLevel.parse(args.level)
        sums = aggregate_published(read_published(args.published), corr, level, args.traditional)
        key = "geoid" if args.traditional else "geocode"
        recs = [{key: g, "statistic": s, "value": v} for (g, s), v in sorted(sums.items())]
        name = f"published_{level.name.lower()}{'_traditional' if args.traditional else ''}.{args.format}"
        write_table(recs, [key, "statistic", "value"], out / name, args.format)
    print(f"{len(corr)} correspondence rows")


def _cmd_fill_holes(args, codebook, workload):
    out = _need_out(args)
    spine = load_spine(args.spine)
    rows = read_nmf(args.inp, workload, codebook)
    collapse = read_collapse_log(args.collapse_log) if args.collapse_log else None
    filled = fill_holes(rows, spine, workload, collapse)
    write_nmf(filled, out)
    print(f"{len(filled) - len(rows)} filled rows")


def _cmd_estimate(args, codebook, workload):
    spine = load_spine(args.spine)
    out = _out_dir(args)
    pooled, modes = pooled_from_records(read_table(args.pooled, POOLED_HEADER))
    if modes - {args.mode}:
        raise ValueError(f"{args.pooled} was pooled with mode {sorted(modes)}, not {args.mode}")
    districts = load_districts(args.districts)
    if args.assignment:
        covers = {c.geography: c for c in read_generalized_assignment(args.assignment)}
        missing = [d.name for d in districts if d.name not in covers]
        if missing:
            raise ValueError(f"{args.assignment} has no cover for {', '.join(missing)}")
        covers = [covers[d.name] for d in districts]
    else:
        covers = [greedy_cover(d, spine) for d in districts]
    export_generalized_assignment(covers, out / "cover.csv")
    index = index_pooled(pooled)
    stats = args.statistic or list(dict.fromkeys(p.statistic for p in pooled))
    recs = []
    for d, cover in zip(districts, covers):
        bsum = block_cover(d, spine)
        for s in stats:
            est, var = estimate_offspine(cover, index, s)
            best, bvar = estimate_offspine(bsum, index, s)
            recs.append({"geography": d.name, "statistic": s, "estimate": est, "variance": var,
                         "block_sum_estimate": best, "block_sum_variance": bvar, "mode": args.mode})
    header = ["geography", "statistic", "estimate", "variance", "block_sum_estimate", "block_sum_variance", "mode"]
    write_table(recs, header, out / f"district_estimates.{args.format}", args.format)
    print(f"{len(recs)} district estimates")


def _cmd_verify(args, codebook, workload):
    config = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.replicates is not None:
        config.replicates = args.replicates
    if args.seed:
        config.master_seed = args.seed
    out = _out_dir(args)
    results = simulate_replicates(config, workload, codebook)
    rows = report(results)
    write_report(rows, out / "report.csv")
    comp = compare_estimators(results)
    header = ["district", "statistic", "mode", "cover_units", "blocks", "analytic_block_sum", "analytic_cover",
              "analytic_min_var_cover", "empirical_block_sum", "empirical_cover", "empirical_min_var_cover",
              "analytic_ratio", "empirical_ratio"]
    write_table(({**c.__dict__, "analytic_ratio": c.analytic_ratio, "empirical_ratio": c.empirical_ratio}
                 for c in comp), header, out / f"comparison.{args.format}", args.format)
    config.save(out / "experiment.json")
    print(summarize(rows))
    cors = district_correlations(results)
    if cors:
        print(f"disjoint district pairs: {len(cors)}, max |corr| = {max(abs(c[3]) for c in cors):.4f}")


COMMANDS = {
    "spine": _cmd_spine, "simulate": _cmd_simulate, "unnest": _cmd_unnest, "aggregate": _cmd_aggregate,
    "pool": _cmd_pool, "link": _cmd_link, "fill-holes": _cmd_fill_holes, "estimate": _cmd_estimate,
    "verify": _cmd_verify,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        codebook = load_codebook(args.codebook)
        workload = load_workload(args.workload, codebook)
        if args.version:
            print(f"nmf-forge {__version__} codebook {codebook.version} workload {workload.name} {workload.version}")
            return 0
        if args.command is None:
            raise UsageError("a subcommand is required")
        COMMANDS[args.command](args, codebook, workload)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except OSError as e:
        name = getattr(e, "filename", None)
        print(f"nmf-forge: I/O error: {e.strerror or e}{f': {name}' if name else ''}", file=sys.stderr)
        return 2
    except (ValueError, KeyError) as e:
        print(f"nmf-forge: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
