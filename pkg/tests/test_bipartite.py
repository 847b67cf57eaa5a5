import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from fitrank.bipartite import (BipartiteMatrix, EmptyMatrixError, FilterParams, apply_filters,
                               build_value_matrix, from_array, normalize_columns)
from fitrank.ingest import Allocation
from oracles import council_filter


def test_build_singleton_and_additivity():
    V = build_value_matrix([Allocation("U1", "S1", "F", 2011, 5.0)])
    assert V.weights.tolist() == [[5.0]]
    V = build_value_matrix([Allocation("U1", "S1", "F", 2011, 5.0), Allocation("U1", "S1", "F", 2012, 3.0)])
    assert V.weights.tolist() == [[8.0]]
    with pytest.raises(EmptyMatrixError):
        build_value_matrix([])


def test_lexicographic_order():
    V = build_value_matrix([Allocation("b", "y", "F", 1, 1.0), Allocation("a", "z", "F", 1, 2.0),
                            Allocation("a", "x", "F", 1, 3.0)])
    assert V.universities == ("a", "b") and V.subjects == ("x", "y", "z")


def test_normalize_examples():
    M = normalize_columns(from_array([[2.0], [3.0], [5.0]]))
    np.testing.assert_allclose(M.weights[:, 0], [0.2, 0.3, 0.5])
    assert M.kind == "column_normalized"
    with pytest.raises(EmptyMatrixError):
        normalize_columns(from_array([[1.0, 0.0]]))


def test_council_filter_6x6_cascade():
    # row 5 holds only 4 subjects; removing it drops subject 5 below 5 universities
    W = np.zeros((6, 6))
    W[:5, :5] = 1
    W[[0, 1, 2, 3, 5], 5] = 1
    W[5, :3] = 1
    V = from_array(W)
    out = apply_filters(V, "council")
    rows, cols = council_filter(W.tolist(), range(6), range(6))
    assert out.universities == tuple(V.universities[r] for r in rows)
    assert out.subjects == tuple(V.subjects[c] for c in cols)
    assert out.shape == (5, 5) and V.subjects[5] not in out.subjects


def test_council_filter_everything_gone():
    with pytest.raises(EmptyMatrixError, match="empty matrix after filtering"):
        apply_filters(from_array(np.eye(6)), "council")


def test_overall_filter():
    allocs = []
    for y in (2011, 2012):
        for g in range(9):
            allocs.append(Allocation("A", "S1", "F", y, 1.0, f"A{y}{g}"))
    allocs.append(Allocation("B", "S1", "F", 2011, 1.0, "B1"))  # inactive in 2012
    allocs.append(Allocation("A", "S2", "F", 2011, 1.0, "A_s2"))  # only one grant
    V = build_value_matrix(allocs)
    out = apply_filters(V, "overall", FilterParams(), allocs=allocs, years=[2011, 2012])
    assert out.universities == ("A",) and out.subjects == ("S1",)


def test_export_roundtrip():
    V = from_array([[0.1 + 0.2, 1e-300], [3.0, 0.0]], ["u,1", "u2"], ["s1", "s\"2"])
    assert BipartiteMatrix.from_csv(V.to_csv()) == V
    assert BipartiteMatrix.from_json(V.to_json()) == V


def test_weights_read_only():
    V = from_array([[1.0]])
    with pytest.raises(ValueError):
        V.weights[0, 0] = 2.0


raw = hnp.arrays(float, st.tuples(st.integers(1, 8), st.integers(1, 8)),
                 elements=st.one_of(st.just(0.0), st.floats(0.01, 1e6)))


@given(raw)
def test_column_sums(w):
    w = w + (w.sum(axis=0) == 0)  # keep every column nonzero
    M = normalize_columns(from_array(w))
    np.testing.assert_allclose(M.weights.sum(axis=0), 1.0, atol=1e-12)


@given(raw, st.lists(st.floats(1e-3, 1e3), min_size=8, max_size=8))
def test_per_column_scale_invariance(w, c):
    w = w + (w.sum(axis=0) == 0)
    scaled = w * np.array(c[: w.shape[1]])
    np.testing.assert_allclose(normalize_columns(from_array(scaled)).weights,
                               normalize_columns(from_array(w)).weights, rtol=1e-12, atol=1e-15)


@given(hnp.arrays(float, st.tuples(st.integers(1, 10), st.integers(1, 10)),
                  elements=st.sampled_from([0.0, 1.0, 2.5])))
def test_council_filter_matches_oracle_and_is_idempotent(w):
    V = from_array(w)
    rows, cols = council_filter(w.tolist(), range(w.shape[0]), range(w.shape[1]))
    try:
        out = apply_filters(V, "council")
    except EmptyMatrixError:
        assert not rows or not cols
        return
    assert out.universities == tuple(V.universities[r] for r in rows)
    assert out.subjects == tuple(V.subjects[c] for c in cols)
    assert set(out.universities) <= set(V.universities) and set(out.subjects) <= set(V.subjects)
    assert apply_filters(out, "council") == out
    assert (out.weights > 0).any(axis=0).all() and (out.weights > 0).any(axis=1).all()
