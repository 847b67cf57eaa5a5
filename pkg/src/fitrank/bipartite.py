"""University x subject matrices: raw funding volume and column shares."""
from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .ingest import Allocation

RAW = "raw_value"
NORMALIZED = "column_normalized"


class EmptyMatrixError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class BipartiteMatrix:
    universities: tuple[str, ...]
    subjects: tuple[str, ...]
    weights: np.ndarray
    kind: str = RAW

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (len(self.universities), len(self.subjects)):
            raise ValueError(f"weights shape {w.shape} does not match index sizes "
                             f"({len(self.universities)}, {len(self.subjects)})")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and nonnegative")
        if self.kind not in (RAW, NORMALIZED):
            raise ValueError(f"unknown matrix kind {self.kind!r}")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "universities", tuple(self.universities))
        object.__setattr__(self, "subjects", tuple(self.subjects))

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights.shape

    def __eq__(self, other):
        if not isinstance(other, BipartiteMatrix):
            return NotImplemented
        return (self.universities == other.universities and self.subjects == other.subjects
                and self.kind == other.kind and np.array_equal(self.weights, other.weights))

    def subset(self, rows: Sequence[bool], cols: Sequence[bool]) -> "BipartiteMatrix":
        rows, cols = np.asarray(rows, bool), np.asarray(cols, bool)
        return BipartiteMatrix(tuple(u for u, k in zip(self.universities, rows) if k),
                               tuple(s for s, k in zip(self.subjects, cols) if k),
                               self.weights[np.ix_(rows, cols)], self.kind)

    # -- export ------------------------------------------------------------
    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["university", *self.subjects])
        for u, row in zip(self.universities, self.weights):
            w.writerow([u, *(repr(float(x)) for x in row)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, kind: str = RAW) -> "BipartiteMatrix":
        rows = list(csv.reader(io.StringIO(text)))
        subjects = tuple(rows[0][1:])
        unis = tuple(r[0] for r in rows[1:])
        w = np.array([[float(x) for x in r[1:]] for r in rows[1:]], dtype=float)
        return cls(unis, subjects, w.reshape(len(unis), len(subjects)), kind)

    def to_json(self) -> str:
        return json.dumps({"kind": self.kind, "universities": list(self.universities),
                           "subjects": list(self.subjects),
                           "weights": [float(x) for x in self.weights.ravel()]})

    @classmethod
    def from_json(cls, text: str) -> "BipartiteMatrix":
        d = json.loads(text)
        w = np.array(d["weights"], dtype=float).reshape(len(d["universities"]), len(d["subjects"]))
        return cls(tuple(d["universities"]), tuple(d["subjects"]), w, d["kind"])


def build_value_matrix(allocs: Iterable[Allocation]) -> BipartiteMatrix:
    cells: dict[tuple[str, str], float] = defaultdict(float)
    for a in allocs:
        cells[a.university, a.subject] += a.value
    if not cells:
        raise EmptyMatrixError("no allocations to build a matrix from")
    unis = sorted({u for u, _ in cells})
    subs = sorted({s for _, s in cells})
    ui = {u: i for i, u in enumerate(unis)}
    si = {s: j for j, s in enumerate(subs)}
    w = np.zeros((len(unis), len(subs)))
    for (u, s), v in cells.items():
        w[ui[u], si[s]] = v
    return BipartiteMatrix(tuple(unis), tuple(subs), w, RAW)


@dataclass(frozen=True)
class FilterParams:
    """Activity thresholds.

    ``overall``: universities need a grant in every year of ``years``;
    subjects need at least ``min_subject_grants`` distinct grants.
    ``council``: universities need ``min_subjects`` active subjects and
    subjects ``min_universities`` active universities, jointly.
    """
    min_subject_grants: int = 9
    min_subjects: int = 5
    min_universities: int = 5


def _drop_empty(V: BipartiteMatrix) -> BipartiteMatrix:
    w = V.weights
    while True:
        rows = (w > 0).any(axis=1)
        cols = (w > 0).any(axis=0)
        if rows.all() and cols.all():
            return V
        V = V.subset(rows, cols)
        w = V.weights


def apply_filters(V: BipartiteMatrix, level: str = "council", params: FilterParams = FilterParams(),
                  allocs: Iterable[Allocation] | None = None,
                  years: Iterable[int] | None = None) -> BipartiteMatrix:
    """Drop inactive universities and subjects.

    The council level iterates the two degree thresholds to their joint fixed
    point, which does not depend on the order of removal. The overall level
    needs the allocations behind ``V`` to count grants per year and per
    subject; ``years`` defaults to the span of years present.
    """
    if V.kind != RAW:
        raise ValueError("filters apply to raw value matrices")
    if level == "council":
        rows = np.ones(V.shape[0], bool)
        cols = np.ones(V.shape[1], bool)
        active = V.weights > 0
        while True:
            sub = active[np.ix_(rows, cols)]
            r_ok = sub.sum(axis=1) >= params.min_subjects
            c_ok = sub.sum(axis=0) >= params.min_universities
            if r_ok.all() and c_ok.all():
                break
            rows[np.flatnonzero(rows)[~r_ok]] = False
            cols[np.flatnonzero(cols)[~c_ok]] = False
            if not rows.any() or not cols.any():
                break
    elif level == "overall":
        if allocs is None:
            raise ValueError("overall filtering needs the underlying allocations")
        allocs = list(allocs)
        span = sorted(set(years) if years is not None else {a.year for a in allocs})
        uni_years: dict[str, set[int]] = defaultdict(set)
        subj_grants: dict[str, set[str]] = defaultdict(set)
        for a in allocs:
            uni_years[a.university].add(a.year)
            if a.value > 0:
                subj_grants[a.subject].add(a.grant_id)
        need = set(span)
        rows = np.array([need <= uni_years.get(u, set()) for u in V.universities], bool)
        cols = np.array([len(subj_grants.get(s, ())) >= params.min_subject_grants
                         for s in V.subjects], bool)
    else:
        raise ValueError(f"unknown filter level {level!r}")
    if not rows.any() or not cols.any():
        raise EmptyMatrixError("empty matrix after filtering")
    kept = V.subset(rows, cols)
    out = _drop_empty(kept)
    if out.weights.size == 0:
        raise EmptyMatrixError("empty matrix after filtering")
    if level == "council" and out.shape != kept.shape:
        # dropping zero rows/cols can break the thresholds again
        return apply_filters(out, level, params)
    return out


def normalize_columns(V: BipartiteMatrix) -> BipartiteMatrix:
    w = V.weights
    sums = w.sum(axis=0)
    if np.any(sums <= 0):
        bad = [s for s, t in zip(V.subjects, sums) if t <= 0]
        raise EmptyMatrixError(f"zero columns cannot be normalised: {bad[:5]}")
    return BipartiteMatrix(V.universities, V.subjects, w / sums, NORMALIZED)


def from_array(weights, universities: Sequence[str] | None = None,
               subjects: Sequence[str] | None = None, kind: str = RAW) -> BipartiteMatrix:
    w = np.asarray(weights, dtype=float)
    n, m = w.shape
    universities = universities or [f"U{i:03d}" for i in range(n)]
    subjects = subjects or [f"S{j:03d}" for j in range(m)]
    return BipartiteMatrix(tuple(universities), tuple(subjects), w, kind)
