"""``fitrank`` command line: ingest -> rank -> dynamics -> panel -> regress -> report.

Exit codes: 0 success, 1 data error, 2 convergence or fixed-point
verification failure, 3 configuration error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import bipartite, econometrics, fitness, ingest, metrics, panel, synth
from .config import ConfigError, Period, RunConfig, load_config

log = logging.getLogger("fitrank")

EXIT_OK, EXIT_DATA, EXIT_CONVERGENCE, EXIT_CONFIG = 0, 1, 2, 3

DATA_ERRORS = (ingest.IngestError, panel.PanelError, bipartite.EmptyMatrixError,
               econometrics.ModelError, FileNotFoundError)
CONVERGENCE_ERRORS = (panel.WindowConvergenceError, econometrics.ConvergenceError,
                      fitness.DegenerateTrajectoryError)


class VerificationFailed(Exception):
    pass


# -- output helpers ----------------------------------------------------------

def write_text(path: Path, text: str) -> None:
    """Atomic UTF-8 write (temp file + rename)."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(text, encoding="utf-8", newline="")
    os.replace(tmp, path)


def _atomic(path: Path, writer) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    writer(tmp)
    os.replace(tmp, path)


def write_json(path: Path, obj) -> None:
    write_text(path, json.dumps(obj, indent=1, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def write_frame(path: Path, df: pd.DataFrame) -> None:
    write_text(path, df.to_csv(index=False, float_format="%.17g", lineterminator="\n"))


def write_manifest(out: Path) -> None:
    """sha256 of every output file, keyed by path relative to ``out``."""
    entries = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.json" and not p.name.startswith("."):
            entries[p.relative_to(out).as_posix()] = hashlib.sha256(p.read_bytes()).hexdigest()
    write_json(out / "manifest.json", entries)


def _alloc_path(cfg: RunConfig) -> Path:
    return cfg.out_dir / "ingest" / "allocations.csv"


def _load_allocs(cfg: RunConfig) -> list[ingest.Allocation]:
    path = _alloc_path(cfg)
    if not path.exists():
        raise FileNotFoundError(f"{path} missing; run `fitrank ingest` first")
    return ingest.read_allocations(path)


def _levels(cfg: RunConfig, allocs, funder: str | None) -> list[str]:
    if funder:
        return [funder]
    return ["overall", *sorted({a.funder for a in allocs})]


def _periods(cfg: RunConfig, name: str | None) -> list[Period]:
    if name is None:
        return cfg.periods
    hits = [p for p in cfg.periods if p.name == name]
    if not hits:
        raise ConfigError(f"unknown period {name!r}")
    return hits


# -- subcommands ---------------------------------------------------------------

def cmd_ingest(cfg: RunConfig, **_) -> int:
    records, rejects = [], []
    for src in cfg.sources:
        res = ingest.read_grants(src, cfg.known_funders)
        records += res.records
        rejects += [(src.name, r.row, r.reason) for r in res.rejects]
    if cfg.url:
        res = ingest.fetch_remote(cfg.url, cfg.page_size, cfg.cache_dir, cfg.known_funders)
        records += res.records
        rejects += [("remote", r.row, r.reason) for r in res.rejects]
    allocs = ingest.allocate(records)
    if cfg.deflator:
        allocs = ingest.deflate(allocs, ingest.DeflatorSeries.from_csv(cfg.deflator, cfg.deflator_base_year))
    out = cfg.out_dir / "ingest"
    _atomic(out / "allocations.csv", lambda tmp: ingest.write_allocations(allocs, tmp))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["source", "row", "reason"])
    w.writerows(rejects)
    write_text(out / "rejects.csv", buf.getvalue())

    rows = []
    for f in sorted({r.funder for r in records}):
        recs = [r for r in records if r.funder == f]
        rows.append({"funder": f, "n_grants": len(recs),
                     "total_value_gbp": sum(r.value_gbp for r in recs),
                     "n_subjects": len({s for r in recs for s, _ in r.subject_shares}),
                     "n_institutions": len({r.lead_university for r in recs})})
    summary = pd.DataFrame(rows, columns=["funder", "n_grants", "total_value_gbp", "n_subjects", "n_institutions"])
    write_frame(out / "summary.csv", summary)
    write_json(out / "summary.json", {"n_records": len(records), "n_rejects": len(rejects),
                                      "n_allocations": len(allocs)})
    log.info("ingested %d records (%d rejects)", len(records), len(rejects))
    return EXIT_OK


def _rank_one(cfg: RunConfig, allocs, period: Period, level: str):
    win = ingest.window(allocs, period.start, period.end, None if level == "overall" else {level})
    V = bipartite.build_value_matrix(win)
    if level == "overall":
        V = bipartite.apply_filters(V, "overall", cfg.filters, allocs=win,
                                    years=range(period.start, period.end + 1))
    else:
        V = bipartite.apply_filters(V, "council", cfg.filters)
    M = bipartite.normalize_columns(V)
    res = fitness.iterate(M, tol=cfg.tol, max_iter=cfg.max_iter)
    diag = None
    if res.converged and cfg.n_random_inits > 0:
        diag = fitness.verify_fixed_point(M, res, cfg.n_random_inits, seed=cfg.seed,
                                          tol=cfg.tol, max_iter=cfg.max_iter)
    return V, M, res, diag


def cmd_rank(cfg: RunConfig, period: str | None = None, funder: str | None = None, **_) -> int:
    allocs = _load_allocs(cfg)
    failures = []
    for p in _periods(cfg, period):
        for level in _levels(cfg, allocs, funder):
            d = cfg.out_dir / "rank" / p.name / level
            try:
                V, M, res, diag = _rank_one(cfg, allocs, p, level)
            except bipartite.EmptyMatrixError as exc:
                log.warning("%s/%s: %s", p.name, level, exc)
                continue
            write_text(d / "matrix_raw.csv", V.to_csv())
            write_text(d / "matrix.json", M.to_json())
            write_text(d / "fitness.json", res.to_json() + "\n")
            write_text(d / "universities.csv", res.to_csv("universities"))
            write_text(d / "subjects.csv", res.to_csv("subjects"))
            write_json(d / "verify.json", diag.to_dict() if diag else {"converged": res.converged})
            if not res.converged or (diag is not None and not diag.ok):
                failures.append(f"{p.name}/{level}")
    if failures:
        log.error("convergence or fixed-point verification failed for: %s", ", ".join(failures))
        return EXIT_CONVERGENCE
    return EXIT_OK


def _read_ranking(path: Path) -> fitness.Ranking:
    return fitness.Ranking.from_csv(path.read_text(encoding="utf-8"))


def cmd_dynamics(cfg: RunConfig, funder: str | None = None, **_) -> int:
    if len(cfg.periods) < 2:
        raise ConfigError("dynamics needs at least two periods")
    root = cfg.out_dir / "rank"
    levels = sorted({d.name for p in cfg.periods if (root / p.name).is_dir()
                     for d in (root / p.name).iterdir() if d.is_dir()})
    if funder:
        levels = [funder]
    if not levels:
        raise FileNotFoundError(f"no rankings under {root}; run `fitrank rank` first")
    taus, deltas = [], []
    for level in levels:
        for a, b in zip(cfg.periods, cfg.periods[1:]):
            pair = f"{a.name}->{b.name}"
            for entity in ("universities", "subjects"):
                pa, pb = root / a.name / level / f"{entity}.csv", root / b.name / level / f"{entity}.csv"
                if not (pa.exists() and pb.exists()):
                    continue
                ra, rb = _read_ranking(pa), _read_ranking(pb)
                common, _, _, dropped = metrics.align_rankings(ra, rb)
                try:
                    tau = metrics.kendall_tau(ra, rb)
                except ValueError:
                    tau = float("nan")
                taus.append({"level": level, "entity": entity, "period_pair": pair, "tau": tau,
                             "n_common": len(common), "n_dropped": dropped})
                ranks_a, ranks_b = ra.ranks, rb.ranks
                for k, dlt in metrics.rank_delta(ra, rb).items():
                    deltas.append({"level": level, "entity": entity, "period_pair": pair, "id": k,
                                   "rank_a": ranks_a[k], "rank_b": ranks_b[k], "rank_delta": dlt})
    out = cfg.out_dir / "dynamics"
    write_frame(out / "tau.csv", pd.DataFrame(
        taus, columns=["level", "entity", "period_pair", "tau", "n_common", "n_dropped"]))
    write_frame(out / "rank_delta.csv", pd.DataFrame(
        deltas, columns=["level", "entity", "period_pair", "id", "rank_a", "rank_b", "rank_delta"]))
    return EXIT_OK


def cmd_panel(cfg: RunConfig, **_) -> int:
    allocs = _load_allocs(cfg)
    pn = panel.build_panel(allocs, cfg.panel)
    out = cfg.out_dir / "panel"
    write_frame(out / "panel.csv", pn)
    stats, corr = panel.describe(pn)
    write_frame(out / "describe.csv", stats.reset_index())
    write_frame(out / "correlations.csv", corr.reset_index())
    return EXIT_OK


def cmd_regress(cfg: RunConfig, **_) -> int:
    path = cfg.out_dir / "panel" / "panel.csv"
    if not path.exists():
        raise FileNotFoundError(f"{path} missing; run `fitrank panel` first")
    pn = panel.read_panel(path)
    out = cfg.out_dir / "regress"
    fits = []
    for entry in cfg.models:
        spec = entry.spec
        f = econometrics.fit(pn, spec)
        fits.append(f)
        write_frame(out / f"{spec.name}.csv", f.table())
        summary = f.summary()
        if entry.magnitude:
            pre, post = econometrics.magnitude(f, pn, entry.magnitude)
            summary["magnitude"] = {"var": entry.magnitude, "pre_pct": pre, "post_pct": post}
        write_json(out / f"{spec.name}.json", summary)
        if entry.event_study:
            var = entry.event_study["var"]
            base = int(entry.event_study.get("base_year", 2011))
            pts, esf = econometrics.event_study(pn, spec, var, base, return_fit=True)
            write_frame(out / f"{spec.name}_event_study.csv", pd.DataFrame(
                [(p.year, p.coefficient, p.se, p.ci_low, p.ci_high) for p in pts],
                columns=["year", "coef", "se", "ci_low", "ci_high"]))
            write_json(out / f"{spec.name}_event_study.json", esf.summary())
    if fits:
        write_frame(out / "table.csv", econometrics.regression_table(fits))
    return EXIT_OK


def cmd_report(cfg: RunConfig, **_) -> int:
    allocs = _load_allocs(cfg)
    out = cfg.out_dir / "report"
    if cfg.periods:
        span = Period("all", min(p.start for p in cfg.periods), max(p.end for p in cfg.periods))
    else:
        years = [a.year for a in allocs]
        span = Period("all", min(years), max(years))
    V, M, res, _ = _rank_one(cfg, allocs, span, "overall")
    ur, sr = fitness.rank(res.uc).ranks, fitness.rank(res.sc).ranks
    rows = []
    for i, u in enumerate(M.universities):
        for j, s in enumerate(M.subjects):
            rows.append((u, s, M.weights[i, j], ur[u], sr[s]))
    heat = pd.DataFrame(rows, columns=["university", "subject", "share", "uc_rank", "sc_rank"])
    write_frame(out / "heatmap.csv", heat.sort_values(["uc_rank", "university", "sc_rank", "subject"]))

    win = ingest.window(allocs, span.start, span.end)
    v_uni = metrics.funding_by_entity(win, "university")
    write_frame(out / "uc_vs_value.csv", pd.DataFrame(
        [(u, res.uc[u], v_uni.get(u, 0.0)) for u in M.universities],
        columns=["university", "uc", "total_value_gbp"]))
    v_sub = metrics.funding_by_entity(win, "subject")
    write_frame(out / "quadrants.csv", metrics.quadrant_table(res.sc, {s: v_sub[s] for s in M.subjects}))

    fy = metrics.aggregates(allocs, "funder-year")
    annual = fy[["funder", "year", "total_value_gbp", "n_grants"]]
    allyear = (annual.groupby("year", as_index=False)[["total_value_gbp", "n_grants"]].sum()
               .assign(funder="ALL"))[["funder", "year", "total_value_gbp", "n_grants"]]
    write_frame(out / "annual_series.csv", pd.concat([annual, allyear], ignore_index=True))

    if cfg.periods:
        base = cfg.report_baseline or cfg.periods[min(1, len(cfg.periods) - 1)].name
        rows = []
        for f in [*sorted(annual["funder"].unique()), "ALL"]:
            series = annual if f == "ALL" else annual[annual["funder"] == f]
            per = {p.name: float(series[(series["year"] >= p.start) & (series["year"] <= p.end)]
                                 ["total_value_gbp"].sum()) for p in cfg.periods}
            for p in cfg.periods:
                rel = per[p.name] / per[base] if per[base] > 0 else float("nan")
                rows.append((f, p.name, per[p.name], rel))
        write_frame(out / "funding_relative.csv", pd.DataFrame(
            rows, columns=["funder", "period", "total_value_gbp", "relative_to_baseline"]))

    es = []
    for p in sorted((cfg.out_dir / "regress").glob("*_event_study.csv")):
        df = pd.read_csv(p)
        df.insert(0, "model", p.name[: -len("_event_study.csv")])
        es.append(df)
    if es:
        write_frame(out / "event_study.csv", pd.concat(es, ignore_index=True))
    return EXIT_OK


def cmd_synth(cfg: RunConfig, out: str | None = None, **_) -> int:
    target = Path(out) if out else (cfg.synth_output or cfg.out_dir / "synthetic_grants.csv")
    records = synth.gen_grants(cfg.synth)
    write_text(target, ingest.records_to_csv(records))
    log.info("wrote %d synthetic grants to %s", len(records), target)
    return EXIT_OK


def cmd_all(cfg: RunConfig, **kw) -> int:
    worst = EXIT_OK
    for step in (cmd_ingest, cmd_rank, cmd_dynamics, cmd_panel, cmd_regress, cmd_report):
        code = step(cfg, **kw)
        worst = max(worst, code)
    return worst


COMMANDS = {"ingest": cmd_ingest, "rank": cmd_rank, "dynamics": cmd_dynamics, "panel": cmd_panel,
            "regress": cmd_regress, "report": cmd_report, "synth": cmd_synth, "all": cmd_all}


class _Parser(argparse.ArgumentParser):
    # usage errors share the config exit code; 2 is reserved for convergence
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="TOML or JSON run config")
    common.add_argument("--period", help="restrict to one named period")
    common.add_argument("--funder", help="restrict to one funder (council-level ranking)")
    common.add_argument("--out", help="output directory (synth: output file)")
    common.add_argument("-v", "--verbose", action="count", default=0)
    ap = _Parser(prog="fitrank", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, require_sources=args.command not in ("synth",))
        if args.out and args.command != "synth":
            cfg.out_dir = Path(args.out)
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        code = COMMANDS[args.command](cfg, period=args.period, funder=args.funder, out=args.out)
        if args.command != "synth":
            write_manifest(cfg.out_dir)
        return code
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except CONVERGENCE_ERRORS as exc:
        log.error("convergence failure: %s", exc)
        return EXIT_CONVERGENCE
    except DATA_ERRORS as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
