"""Balanced university x funder x year panel for the grant-income models.

Money enters in GBP millions, except total council spending which is in
hundreds of millions. Competitiveness series are computed on trailing
windows ending in the focal year and used with a one-year lag.
"""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .bipartite import EmptyMatrixError, FilterParams, apply_filters, build_value_matrix, normalize_columns
from .fitness import DegenerateTrajectoryError, iterate
from .ingest import Allocation

log = logging.getLogger(__name__)

TREATED = ("NERC", "AHRC", "ESRC", "EPSRC")

# export order; mirrors the variable list of the descriptive table
PANEL_COLUMNS = ["university", "funder", "year", "v", "vbar_l1", "ng", "uc_ut_l1", "uc_uft_l1",
                 "uc_ut5_l1", "uc_uft5_l1", "d_t", "d_post", "hhi", "mdv_l1", "sumv_l1", "r_l1",
                 "ng_l1", "ngf_l1", "ngf_l2"]
DESCRIBE_VARS = ["v", "vbar_l1", "ng", "uc_ut_l1", "uc_uft_l1", "uc_ut5_l1", "uc_uft5_l1",
                 "d_t", "d_post", "hhi", "mdv_l1", "sumv_l1", "r_l1"]


class PanelError(ValueError):
    pass


class WindowConvergenceError(ArithmeticError):
    pass


@dataclass
class PanelConfig:
    years: tuple[int, int] = (2011, 2020)
    exclude_funders: tuple[str, ...] = ("BBSRC",)
    treated_funders: tuple[str, ...] = TREATED
    post_year: int = 2016
    window_len: int = 3
    long_window_len: int = 5
    filters: FilterParams = field(default_factory=FilterParams)
    tol: float = 1e-10
    max_iter: int = 10_000


def _by_funder_year(allocs: Iterable[Allocation]):
    out: dict[tuple[str, int], list[Allocation]] = defaultdict(list)
    for a in allocs:
        out[a.funder, a.year].append(a)
    return out


def rolling_uc(allocs: Sequence[Allocation], window_len: int, level: str, years: Iterable[int],
               filters: FilterParams = FilterParams(), tol: float = 1e-10,
               max_iter: int = 10_000) -> dict[tuple, float]:
    """Competitiveness on trailing windows ``[t - window_len + 1, t]``.

    Keys are ``(university, year)`` for ``level="pooled"`` and
    ``(university, funder, year)`` for ``"per_funder"``; every university in
    ``allocs`` gets a value, 0 when it is not in the filtered window matrix.
    """
    if level not in ("pooled", "per_funder"):
        raise ValueError(f"unknown level {level!r}")
    allocs = list(allocs)
    if not allocs:
        raise PanelError("no allocations")
    first = min(a.year for a in allocs)
    universe = sorted({a.university for a in allocs})
    funders = sorted({a.funder for a in allocs})
    groups = _by_funder_year(allocs)
    out: dict[tuple, float] = {}
    for t in years:
        lo = t - window_len + 1
        if lo < first:
            raise PanelError(f"window ending {t} needs data from {lo}; data start in {first}")
        blocks = [("*", funders)] if level == "pooled" else [(f, [f]) for f in funders]
        for label, fs in blocks:
            win = [a for f in fs for y in range(lo, t + 1) for a in groups.get((f, y), ())]
            name = f"{label} {lo}-{t}"
            uc = {}
            try:
                M = normalize_columns(apply_filters(build_value_matrix(win), "council", filters))
                res = iterate(M, tol=tol, max_iter=max_iter)
            except EmptyMatrixError:
                log.warning("window %s is empty after filtering; all UC set to 0", name)
            except DegenerateTrajectoryError as exc:
                raise WindowConvergenceError(f"window {name}: {exc}") from None
            else:
                if not res.converged:
                    raise WindowConvergenceError(
                        f"window {name} did not converge (delta {res.final_delta:.3g} "
                        f"after {res.iterations} iterations)")
                uc = res.uc
            for u in universe:
                key = (u, t) if level == "pooled" else (u, label, t)
                out[key] = uc.get(u, 0.0)
    return out


def _grant_table(allocs: Iterable[Allocation]) -> pd.DataFrame:
    df = pd.DataFrame([(a.grant_id, a.university, a.funder, a.year, a.value) for a in allocs],
                      columns=["grant_id", "university", "funder", "year", "value"])
    return df.groupby(["grant_id", "university", "funder", "year"], sort=True)["value"].sum().reset_index()


def build_panel(allocs: Sequence[Allocation], config: PanelConfig = PanelConfig()) -> pd.DataFrame:
    """Assemble the balanced panel.

    Pairs are university-funder combinations with at least one grant in the
    estimation years; every pair gets a row for every estimation year,
    including years without grants (``v = 0``). Lagged 5-year UC values are
    NaN where the data do not reach back far enough.
    """
    excl = set(config.exclude_funders)
    allocs = [a for a in allocs if a.funder not in excl]
    if not allocs:
        raise PanelError("no allocations left after funder exclusion")
    y0, y1 = config.years
    first = min(a.year for a in allocs)
    if first > y0 - config.window_len:
        raise PanelError(f"lagged {config.window_len}-year windows for {y0} need data from "
                         f"{y0 - config.window_len}; data start in {first}")
    est_years = list(range(y0, y1 + 1))
    grants = _grant_table(allocs)
    universe = sorted(grants["university"].unique())
    funders = sorted(grants["funder"].unique())
    last = max(int(grants["year"].max()), y1)
    all_years = list(range(first, last + 1))

    idx = pd.MultiIndex.from_product([universe, funders, all_years], names=["university", "funder", "year"])
    g = grants.groupby(["university", "funder", "year"])["value"]
    grid = pd.DataFrame({"v": g.sum() / 1e6, "ng": g.size()}).reindex(idx, fill_value=0)
    grid["ng"] = grid["ng"].astype(int)

    in_est = grid.index.get_level_values("year").isin(est_years)
    active = grid[in_est].groupby(level=["university", "funder"])["ng"].sum()
    pairs = active[active > 0].index

    fy = grants.groupby(["funder", "year"])["value"]
    f_median = (fy.median() / 1e6).to_dict()
    f_total = (fy.sum() / 1e8).to_dict()
    f_count = fy.size().to_dict()
    uf_year = grid["v"].groupby(level=["funder", "year"])

    def _hhi(s):
        tot = s.sum()
        return float(((s / tot) ** 2).sum()) if tot > 0 else np.nan
    f_hhi = uf_year.apply(_hhi).to_dict()

    w, wl = config.window_len, config.long_window_len
    lag_years = [t - 1 for t in est_years]
    kw = dict(filters=config.filters, tol=config.tol, max_iter=config.max_iter)
    uc_pf = rolling_uc(allocs, w, "per_funder", lag_years, **kw)
    uc_po = rolling_uc(allocs, w, "pooled", lag_years, **kw)
    long_years = [t for t in lag_years if t - wl + 1 >= first]
    uc_pf5 = rolling_uc(allocs, wl, "per_funder", long_years, **kw) if long_years else {}
    uc_po5 = rolling_uc(allocs, wl, "pooled", long_years, **kw) if long_years else {}

    v = grid["v"].to_dict()
    ng = grid["ng"].to_dict()
    ng_ut = grid["ng"].groupby(level=["university", "year"]).sum().to_dict()
    treated = set(config.treated_funders)

    rows = []
    for (u, f) in pairs:
        for t in est_years:
            lagv = [v.get((u, f, s)) for s in range(t - 3, t)]
            vbar = float(np.mean(lagv)) if t - 3 >= first else np.nan
            ng_l1 = ng.get((u, f, t - 1), 0)
            rows.append({
                "university": u, "funder": f, "year": t,
                "v": v[u, f, t],
                "vbar_l1": vbar,
                "ng": ng[u, f, t],
                "uc_ut_l1": uc_po[u, t - 1],
                "uc_uft_l1": uc_pf[u, f, t - 1],
                "uc_ut5_l1": uc_po5.get((u, t - 1), np.nan),
                "uc_uft5_l1": uc_pf5.get((u, f, t - 1), np.nan),
                "d_t": int(f in treated),
                "d_post": int(t >= config.post_year),
                "hhi": f_hhi.get((f, t), np.nan),
                "mdv_l1": f_median.get((f, t - 1), np.nan),
                "sumv_l1": f_total.get((f, t - 1), 0.0),
                "r_l1": ng_ut.get((u, t - 1), 0) - ng_l1,
                "ng_l1": ng_l1,
                "ngf_l1": f_count.get((f, t - 1), 0),
                "ngf_l2": f_count.get((f, t - 2), 0),
            })
    panel = pd.DataFrame(rows, columns=PANEL_COLUMNS)
    if len(panel) != len(pairs) * len(est_years):
        raise PanelError("panel is not balanced")
    return panel


def describe(panel: pd.DataFrame, variables: Sequence[str] = DESCRIBE_VARS):
    """Summary statistics and Pearson correlations.

    HHI is shown multiplied by 1000. Correlations use pairwise complete
    observations; undefined ones (constant columns) are NaN.
    """
    if len(panel) == 0:
        raise PanelError("empty panel")
    cols = [c for c in variables if c in panel.columns]
    data = panel[cols].astype(float).copy()
    if "hhi" in data:
        data["hhi"] = data["hhi"] * 1000
    stats = pd.DataFrame({
        "mean": data.mean(), "sd": data.std(ddof=1), "median": data.median(),
        "min": data.min(), "max": data.max(), "n": data.count(),
    }).loc[cols]
    stats.index.name = "variable"
    corr = data.corr(method="pearson")
    corr.index.name = "variable"
    return stats, corr


def read_panel(path) -> pd.DataFrame:
    return pd.read_csv(path, dtype={"university": str, "funder": str})


def write_panel(panel: pd.DataFrame, path) -> None:
    panel.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
