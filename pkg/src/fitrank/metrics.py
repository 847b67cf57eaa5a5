"""Rank dynamics and distributional summaries."""
from __future__ import annotations

import logging
import math
from collections import defaultdict
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .fitness import Ranking
from .ingest import Allocation

log = logging.getLogger(__name__)

QUADRANTS = ("I", "II", "III", "IV")

GROUP_KEYS = {
    "university": ("university",),
    "subject": ("subject",),
    "funder": ("funder",),
    "funder-year": ("funder", "year"),
    "university-funder-year": ("university", "funder", "year"),
}


def align_rankings(a: Ranking, b: Ranking):
    """Ranks of the identifiers common to both rankings, plus the number of
    identifiers present in only one of them."""
    ra, rb = a.ranks, b.ranks
    common = sorted(set(ra) & set(rb))
    dropped = len(set(ra) ^ set(rb))
    return (common, np.array([ra[k] for k in common], float),
            np.array([rb[k] for k in common], float), dropped)


def _tie_pairs(x: np.ndarray) -> int:
    _, counts = np.unique(x, return_counts=True)
    return int((counts * (counts - 1) // 2).sum())


def kendall_tau(a: Ranking, b: Ranking, variant: str = "b") -> float:
    """Kendall rank correlation over the identifiers both rankings share.

    ``variant="b"`` (default) adjusts for ties; ``"a"`` divides by the raw
    number of pairs. Raises if fewer than two identifiers are shared or if
    tau-b is undefined because one side is entirely tied.
    """
    common, x, y, dropped = align_rankings(a, b)
    if dropped:
        log.info("kendall_tau: %d identifiers not in both rankings were dropped", dropped)
    n = len(common)
    if n < 2:
        raise ValueError("kendall_tau needs at least two common identifiers")
    sx = np.sign(x[:, None] - x[None, :])
    sy = np.sign(y[:, None] - y[None, :])
    s = float(np.triu(sx * sy, k=1).sum())
    n0 = n * (n - 1) // 2
    if variant == "a":
        return s / n0
    if variant != "b":
        raise ValueError(f"unknown tau variant {variant!r}")
    denom = math.sqrt((n0 - _tie_pairs(x)) * (n0 - _tie_pairs(y)))
    if denom == 0:
        raise ValueError("tau-b undefined: one ranking is entirely tied")
    return s / denom


def rank_delta(a: Ranking, b: Ranking) -> dict[str, int]:
    """rank in ``b`` minus rank in ``a``; positive means the entity fell."""
    ra, rb = a.ranks, b.ranks
    return {k: rb[k] - ra[k] for k in sorted(set(ra) & set(rb))}


def zscore(values: Mapping[str, float]) -> dict[str, float]:
    if len(values) < 2:
        raise ValueError("zscore needs at least two values")
    keys = list(values)
    x = np.array([values[k] for k in keys], float)
    sd = x.std()
    # mean of equal floats can be off by an ulp, leaving a spurious tiny sd
    if not sd > 1e-14 * max(np.abs(x).max(), 1e-300):
        raise ValueError("degenerate distribution")
    z = (x - x.mean()) / sd
    return dict(zip(keys, z.tolist()))


def quadrant(sc_z: float, v_z: float) -> str:
    """Complexity-value quadrant; zero falls on the nonnegative side.

    II: complex and well funded, I: complex and less funded,
    IV: less complex and well funded, III: neither.
    """
    if not (math.isfinite(sc_z) and math.isfinite(v_z)):
        raise ValueError("quadrant needs finite coordinates")
    if sc_z >= 0:
        return "II" if v_z >= 0 else "I"
    return "IV" if v_z >= 0 else "III"


def hhi(values: Mapping[str, float] | Iterable[float]) -> float:
    x = np.fromiter(values.values() if isinstance(values, Mapping) else values, float)
    if np.any(x < 0):
        raise ValueError("hhi needs nonnegative values")
    total = x.sum()
    if not total > 0:
        raise ValueError("hhi undefined for an all-zero input")
    shares = x / total
    return float(np.sum(shares * shares))


def aggregates(allocs: Sequence[Allocation], group_by: str = "university") -> pd.DataFrame:
    """Total value, distinct grant count and median grant size per group.

    A grant's size is its full value whatever the grouping, so splitting a
    grant across subjects does not shrink it in the subject medians.
    """
    if not allocs:
        raise ValueError("aggregates needs at least one allocation")
    if group_by not in GROUP_KEYS:
        raise ValueError(f"unknown grouping {group_by!r}")
    keys = list(GROUP_KEYS[group_by])
    df = pd.DataFrame([(a.grant_id, a.university, a.subject, a.funder, a.year, a.value)
                       for a in allocs],
                      columns=["grant_id", "university", "subject", "funder", "year", "value"])
    size = df.groupby("grant_id")["value"].sum().rename("grant_value")
    total = df.groupby(keys, sort=True)["value"].sum()
    members = df[[*keys, "grant_id"]].drop_duplicates().join(size, on="grant_id")
    g = members.groupby(keys, sort=True)["grant_value"]
    out = pd.DataFrame({"total_value_gbp": total, "n_grants": g.size(),
                        "median_value_gbp": g.median()}).reset_index()
    out.insert(0, "group", out[keys].astype(str).agg("|".join, axis=1))
    return out


def quadrant_table(sc: Mapping[str, float], value: Mapping[str, float]) -> pd.DataFrame:
    """z-scored complexity and funding per subject with quadrant labels."""
    common = sorted(set(sc) & set(value))
    scz = zscore({k: sc[k] for k in common})
    vz = zscore({k: value[k] for k in common})
    rows = [(k, sc[k], value[k], scz[k], vz[k], quadrant(scz[k], vz[k])) for k in common]
    return pd.DataFrame(rows, columns=["subject", "sc", "total_value_gbp", "sc_z", "v_z", "quadrant"])


def funding_by_entity(allocs: Iterable[Allocation], key: str) -> dict[str, float]:
    out: dict[str, float] = defaultdict(float)
    for a in allocs:
        out[getattr(a, key)] += a.value
    return dict(out)
