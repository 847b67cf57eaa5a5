import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fitrank.econometrics import ModelSpec, fit
from fitrank.ingest import parse_grants, records_to_csv
from fitrank.synth import (GrantFixtureSpec, NestedMatrixSpec, PanelDgpSpec, gen_grants, gen_nested,
                           gen_panel, staircase)


def test_staircase_3x3():
    assert staircase(3, 3).tolist() == [[1, 1, 1], [1, 1, 0], [1, 0, 0]]


@given(st.integers(1, 15), st.integers(1, 15), st.floats(0, 1), st.floats(0, 2), st.integers(0, 99))
def test_nested_invariants(n, m, nest, noise, seed):
    spec = NestedMatrixSpec(n, m, nest, noise, seed)
    V = gen_nested(spec)
    w = V.weights
    assert (w > 0).any(axis=1).all() and (w > 0).any(axis=0).all()
    assert V == gen_nested(spec)
    if nest == 1.0:
        k = (w > 0).sum(axis=1)
        assert np.all(np.diff(k) <= 0)
        assert ((w > 0) == (staircase(n, m) > 0)).all()


def test_nested_rejects_bad_spec():
    with pytest.raises(ValueError):
        gen_nested(NestedMatrixSpec(0, 3))
    with pytest.raises(ValueError):
        gen_nested(NestedMatrixSpec(3, 3, nestedness=1.5))


def test_panel_deterministic_and_shaped():
    a, ta = gen_panel(PanelDgpSpec(n_universities=10, n_funders=3, seed=1))
    b, _ = gen_panel(PanelDgpSpec(n_universities=10, n_funders=3, seed=1))
    assert a.equals(b) and len(a) == 10 * 3 * 10
    assert set(a.d_post) == {0, 1} and ta["delta"] == 0.0
    with pytest.raises(ValueError):
        gen_panel(PanelDgpSpec(n_universities=1))
    with pytest.raises(ValueError):
        gen_panel(PanelDgpSpec(post_year=2030))


def test_degenerate_dgp_intercept_only():
    p, _ = gen_panel(PanelDgpSpec(n_universities=50, n_funders=4, fe_scale=0.0, true_beta={},
                                  base_rate=3.0, seed=5))
    f = fit(p, ModelSpec(fixed_effects=[], cluster_dims=[]))
    assert f.coefficients["_cons"] == pytest.approx(math.log(p.v.mean()), abs=1e-10)
    assert abs(math.exp(f.coefficients["_cons"]) - 3.0) < 0.2


def test_extra_covariates():
    p, _ = gen_panel(PanelDgpSpec(n_universities=5, n_funders=2, true_beta={"uc_uft_l1": 0.1, "x1": 0.2}))
    assert "x1" in p.columns


def test_grant_fixture_roundtrips_through_ingest():
    spec = GrantFixtureSpec(n_universities=6, subjects_per_funder=4, years=(2010, 2012), seed=7)
    recs = gen_grants(spec)
    text = records_to_csv(recs)
    assert text == records_to_csv(gen_grants(spec))
    res = parse_grants(text)
    assert not res.rejects and len(res.records) == len(recs)
    for a, b in zip(res.records, recs):
        assert a.grant_id == b.grant_id and a.value_gbp == b.value_gbp
        for (s1, f1), (s2, f2) in zip(a.subject_shares, b.subject_shares):
            assert s1 == s2 and f1 == pytest.approx(f2, abs=1e-12)
