"""Nonlinear fitness-complexity iteration on a column-share matrix.

University competitiveness (UC) is the complexity-weighted sum of a
university's subject shares; subject complexity (SC) is the harmonic-type
aggregate dominated by the weakest universities funded in the subject. Both
vectors are rescaled to mean one after every step.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .bipartite import NORMALIZED, BipartiteMatrix

log = logging.getLogger(__name__)

UNDERFLOW = 1e-300


class DegenerateTrajectoryError(ArithmeticError):
    pass


@dataclass
class FitnessResult:
    uc: dict[str, float]
    sc: dict[str, float]
    iterations: int
    final_delta: float
    converged: bool
    init_label: str = "even"

    def uc_vector(self) -> np.ndarray:
        return np.fromiter(self.uc.values(), float)

    def sc_vector(self) -> np.ndarray:
        return np.fromiter(self.sc.values(), float)

    def to_json(self) -> str:
        ur, sr = rank(self.uc), rank(self.sc)
        return json.dumps({
            "universities": [{"id": e.id, "uc": e.score, "rank": e.rank} for e in ur.entries],
            "subjects": [{"id": e.id, "sc": e.score, "rank": e.rank} for e in sr.entries],
            "iterations": self.iterations,
            "final_delta": self.final_delta,
            "converged": self.converged,
            "init_label": self.init_label,
        }, indent=1)

    def to_csv(self, which: str = "universities") -> str:
        scores, col = (self.uc, "uc") if which == "universities" else (self.sc, "sc")
        return rank(scores).to_csv(score_name=col)


@dataclass(frozen=True)
class RankEntry:
    id: str
    score: float
    rank: int


@dataclass
class Ranking:
    entries: list[RankEntry]

    @property
    def ranks(self) -> dict[str, int]:
        return {e.id: e.rank for e in self.entries}

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    def __len__(self):
        return len(self.entries)

    def to_csv(self, score_name: str = "score") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", score_name, "rank"])
        for e in self.entries:
            w.writerow([e.id, repr(e.score), e.rank])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Ranking":
        rows = list(csv.reader(io.StringIO(text)))
        return cls([RankEntry(r[0], float(r[1]), int(r[2])) for r in rows[1:]])


def rank(scores: Mapping[str, float]) -> Ranking:
    """Rank descending by score. Tied scores share the smaller (better) rank
    and are listed in identifier order."""
    if not scores:
        raise ValueError("cannot rank an empty score map")
    items = [(k, float(v)) for k, v in scores.items()]
    if any(math.isnan(v) for _, v in items):
        raise ValueError("NaN score cannot be ranked")
    items.sort(key=lambda kv: (-kv[1], kv[0]))
    entries, prev, prev_rank = [], None, 0
    for pos, (k, v) in enumerate(items, start=1):
        r = prev_rank if v == prev else pos
        entries.append(RankEntry(k, v, r))
        prev, prev_rank = v, r
    return Ranking(entries)


def _initial(n: int, m: int, init: str, seed: int | None):
    if init == "even":
        return np.ones(n), np.ones(m), "even"
    if init == "random":
        rng = np.random.default_rng(seed)
        return rng.uniform(0.1, 10.0, n), rng.uniform(0.1, 10.0, m), f"random(seed={seed})"
    raise ValueError(f"unknown init {init!r}")


def iterate(M: BipartiteMatrix, tol: float = 1e-10, max_iter: int = 10_000,
            init: str = "even", seed: int | None = None) -> FitnessResult:
    """Iterate the fitness-complexity map to a fixed point.

    Stops once the largest relative change across both vectors drops below
    ``tol``; returns ``converged=False`` after ``max_iter`` steps otherwise.
    Raises ``DegenerateTrajectoryError`` if any score underflows 1e-300.
    """
    if M.kind != NORMALIZED:
        raise ValueError("iterate expects a column-normalised matrix")
    w = M.weights
    if (w.sum(axis=1) <= 0).any() or (w.sum(axis=0) <= 0).any():
        raise ValueError("matrix has an all-zero row or column")
    if tol <= 0 or max_iter < 1:
        raise ValueError("tol and max_iter must be positive")
    uc, sc, label = _initial(*w.shape, init, seed)
    wt = w.T.copy()
    delta = math.inf
    n = 0
    with np.errstate(divide="raise", over="raise", invalid="raise"):
        try:
            for n in range(1, max_iter + 1):
                uc_t = w @ sc
                sc_t = 1.0 / (wt @ (1.0 / uc))
                uc_new = uc_t / uc_t.mean()
                sc_new = sc_t / sc_t.mean()
                if uc_new.min() < UNDERFLOW or sc_new.min() < UNDERFLOW:
                    raise DegenerateTrajectoryError(f"degenerate trajectory at iteration {n}")
                delta = max(np.max(np.abs(uc_new - uc) / uc), np.max(np.abs(sc_new - sc) / sc))
                uc, sc = uc_new, sc_new
                if delta < tol:
                    break
        except FloatingPointError as exc:
            raise DegenerateTrajectoryError(f"degenerate trajectory at iteration {n}: {exc}") from None
    return FitnessResult(dict(zip(M.universities, uc.tolist())), dict(zip(M.subjects, sc.tolist())),
                         n, float(delta), bool(delta < tol), label)


@dataclass
class FixedPointDiagnostics:
    nonzero: bool
    init_independent: bool
    min_score: float
    worst_tau: float
    max_rel_discrepancy: float
    n_runs: int
    all_converged: bool
    taus: list[float] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.nonzero and self.init_independent and self.all_converged

    def to_dict(self) -> dict:
        return {"nonzero": self.nonzero, "init_independent": self.init_independent,
                "min_score": self.min_score, "worst_tau": self.worst_tau,
                "max_rel_discrepancy": self.max_rel_discrepancy, "n_runs": self.n_runs,
                "all_converged": self.all_converged}


def verify_fixed_point(M: BipartiteMatrix, result: FitnessResult, n_random_inits: int = 10,
                       seed: int = 0, tol: float | None = None,
                       max_iter: int = 10_000) -> FixedPointDiagnostics:
    """Rerun the map from random positive starts and compare with ``result``.

    ``nonzero`` requires every score in every run above 1e-12;
    ``init_independent`` requires identical university and subject rank
    orders (Kendall tau-b of 1) in every rerun.
    """
    from .metrics import kendall_tau  # metrics depends on fitness.rank

    if not result.converged:
        raise ValueError("verify_fixed_point needs a converged reference result")
    tol = tol if tol is not None else max(result.final_delta, 1e-10)
    ref_u, ref_s = rank(snap_ties(result.uc)), rank(snap_ties(result.sc))
    ref_vec = np.concatenate([result.uc_vector(), result.sc_vector()])
    min_score = float(ref_vec.min())
    worst_tau, worst_disc, all_conv, taus = 1.0, 0.0, True, []
    seeds = np.random.SeedSequence(seed).spawn(n_random_inits)
    for ss in seeds:
        run_seed = int(ss.generate_state(1)[0])
        try:
            r = iterate(M, tol=tol, max_iter=max_iter, init="random", seed=run_seed)
        except DegenerateTrajectoryError:
            return FixedPointDiagnostics(False, False, 0.0, -1.0, math.inf, n_random_inits, False, taus)
        all_conv &= r.converged
        vec = np.concatenate([r.uc_vector(), r.sc_vector()])
        min_score = min(min_score, float(vec.min()))
        worst_disc = max(worst_disc, float(np.max(np.abs(vec - ref_vec) / ref_vec)))
        t = 1.0
        for a, b in ((ref_u, rank(snap_ties(r.uc))), (ref_s, rank(snap_ties(r.sc)))):
            if len(a) >= 2 and a.ranks != b.ranks:
                t = min(t, kendall_tau(a, b))
        taus.append(t)
        worst_tau = min(worst_tau, t)
    return FixedPointDiagnostics(min_score > 1e-12, worst_tau == 1.0, min_score, worst_tau,
                                 worst_disc, n_random_inits, bool(all_conv), taus)


def snap_ties(scores: Mapping[str, float], rel: float = 1e-6) -> dict[str, float]:
    """Merge scores whose sorted neighbours differ by less than ``rel``
    (relative) into one tie group carrying the group's largest score."""
    items = sorted(scores.items(), key=lambda kv: -kv[1])
    out, head = {}, None
    for k, v in items:
        if head is None or abs(prev - v) > rel * max(abs(prev), abs(v)):
            head = v
        out[k] = head
        prev = v
    return out


def scores_frame(result: FitnessResult, universe: Sequence[str]) -> dict[str, float]:
    """UC over a wider universe: universities outside the matrix score 0."""
    return {u: result.uc.get(u, 0.0) for u in universe}
