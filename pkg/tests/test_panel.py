import itertools

import numpy as np
import pandas as pd
import pytest

from fitrank.bipartite import FilterParams, apply_filters, build_value_matrix
from fitrank.ingest import Allocation, allocate, window
from fitrank.panel import (PANEL_COLUMNS, PanelConfig, PanelError, build_panel, describe, read_panel,
                           rolling_uc, write_panel)
from fitrank.synth import GrantFixtureSpec, gen_grants
from oracles import column_normalise, oracle_fitness

LOOSE = FilterParams(1, 1, 1)


def _tiny(skip=()):
    """Two universities, two funders, 2008-2013, one or two grants per cell."""
    out = []
    for u, f, y in itertools.product(["U1", "U2"], ["F1", "F2"], range(2008, 2014)):
        if (u, f, y) in skip:
            continue
        for k in range(1 + (y + len(u + f)) % 2):
            gid = f"{u}{f}{y}{k}"
            out.append(Allocation(u, "S1", f, y, 1e6 * (1 + k + y % 3), gid))
            out.append(Allocation(u, "S2", f, y, 5e5, gid))
    return out


CFG = PanelConfig(years=(2011, 2013), exclude_funders=(), treated_funders=("F1",), post_year=2012,
                  filters=LOOSE)


def test_tiny_panel_count_and_columns():
    p = build_panel(_tiny(), CFG)
    assert len(p) == 12 and list(p.columns) == PANEL_COLUMNS
    assert set(p.loc[p.funder == "F1", "d_t"]) == {1} and set(p.loc[p.funder == "F2", "d_t"]) == {0}
    assert (p["d_post"] == (p["year"] >= 2012)).all()


def test_zero_year_kept():
    p = build_panel(_tiny(skip={("U1", "F1", 2012)}), CFG)
    row = p[(p.university == "U1") & (p.funder == "F1") & (p.year == 2012)]
    assert len(row) == 1 and row.v.item() == 0 and row.ng.item() == 0


def test_inactive_pair_dropped():
    skip = {("U2", "F2", y) for y in range(2011, 2014)}
    p = build_panel(_tiny(skip=skip), CFG)
    assert len(p) == 9


def _independent_checks(p, allocs):
    g = {}
    for a in allocs:
        g.setdefault((a.university, a.funder, a.year), {}).setdefault(a.grant_id, 0.0)
        g[a.university, a.funder, a.year][a.grant_id] += a.value
    for row in p.itertuples():
        vs = [sum(g.get((row.university, row.funder, s), {}).values()) / 1e6
              for s in range(row.year - 3, row.year)]
        assert row.vbar_l1 == pytest.approx(np.mean(vs), rel=1e-12, abs=1e-15)
        assert row.v == pytest.approx(sum(g.get((row.university, row.funder, row.year), {}).values()) / 1e6)
        others = sum(len(grants) for (u, f, y), grants in g.items()
                     if u == row.university and f != row.funder and y == row.year - 1)
        assert row.r_l1 == others
        assert row.ng_l1 == len(g.get((row.university, row.funder, row.year - 1), {}))


def test_lags_and_reputation_tiny():
    allocs = _tiny(skip={("U1", "F2", 2010)})
    _independent_checks(build_panel(allocs, CFG), allocs)


@pytest.fixture(scope="module")
def fixture_panel():
    spec = GrantFixtureSpec(n_universities=12, subjects_per_funder=6, grants_per_year=1.5, seed=3)
    allocs = allocate(gen_grants(spec))
    return allocs, build_panel(allocs, PanelConfig())


def test_fixture_panel_invariants(fixture_panel):
    allocs, p = fixture_panel
    pairs = p[["university", "funder"]].drop_duplicates()
    assert len(p) == len(pairs) * 10
    assert "BBSRC" not in set(p.funder)
    for c in ["v", "vbar_l1", "ng", "hhi", "mdv_l1", "sumv_l1", "r_l1"]:
        assert (p[c].dropna() >= 0).all()
    assert set(p.d_t[p.funder.isin(["NERC", "AHRC", "ESRC", "EPSRC"])]) == {1}
    _independent_checks(p, [a for a in allocs if a.funder != "BBSRC"])


def test_uc_zero_coherence(fixture_panel):
    allocs, p = fixture_panel
    allocs = [a for a in allocs if a.funder != "BBSRC"]
    for row in p[p.uc_uft_l1 == 0].itertuples():
        t = row.year - 1
        win = window(allocs, t - 2, t, {row.funder})
        try:
            M = apply_filters(build_value_matrix(win), "council")
            assert row.university not in M.universities
        except ValueError:
            pass
    assert (p.uc_uft_l1 > 0).any()


def test_insufficient_history():
    with pytest.raises(PanelError):
        build_panel(_tiny(), PanelConfig(years=(2009, 2013), exclude_funders=(), filters=LOOSE))


def test_rolling_singleton_and_absent():
    allocs = [Allocation("A", "S", "F", 2010, 1.0, "g1"), Allocation("B", "S", "F", 2009, 1.0, "g2")]
    uc = rolling_uc(allocs, 1, "per_funder", [2010], LOOSE)
    assert uc[("A", "F", 2010)] == 1.0 and uc[("B", "F", 2010)] == 0.0


def test_rolling_uc_rises_when_complex_subject_gained():
    w1 = [[5.0, 3.0, 2.0], [4.0, 2.0, 0.01], [1.0, 3.0, 0.5]]
    w2 = [[5.0, 3.0, 2.0], [4.0, 2.0, 1.5], [1.0, 3.0, 0.5]]
    allocs = []
    for year, w in ((2010, w1), (2011, w2)):
        for i, j in itertools.product(range(3), range(3)):
            allocs.append(Allocation(f"U{i}", f"S{j}", "F", year, w[i][j], f"{year}-{i}-{j}"))
    uc = rolling_uc(allocs, 1, "pooled", [2010, 2011], LOOSE)
    assert uc[("U1", 2011)] > uc[("U1", 2010)]
    ref1 = oracle_fitness(column_normalise(w1), 3000)[0][1]
    ref2 = oracle_fitness(column_normalise(w2), 3000)[0][1]
    assert uc[("U1", 2010)] == pytest.approx(ref1, rel=1e-8)
    assert uc[("U1", 2011)] == pytest.approx(ref2, rel=1e-8)


def test_describe():
    p = pd.DataFrame({"v": [1.0, 2.0, 3.0], "ng": [2.0, 4.0, 6.0], "d_t": [1, 1, 1], "hhi": [0.1, 0.2, 0.3]})
    stats, corr = describe(p)
    assert list(stats.index) == ["v", "ng", "d_t", "hhi"]
    assert stats.loc["d_t", "sd"] == 0 and np.isnan(corr.loc["v", "d_t"])
    assert corr.loc["v", "ng"] == pytest.approx(1.0)
    assert stats.loc["hhi", "mean"] == pytest.approx(200.0)
    assert stats.loc["v", "sd"] == pytest.approx(1.0)


def test_panel_csv_roundtrip(tmp_path):
    p = build_panel(_tiny(), CFG)
    write_panel(p, tmp_path / "p.csv")
    q = read_panel(tmp_path / "p.csv")
    pd.testing.assert_frame_equal(p, q, check_dtype=False)
