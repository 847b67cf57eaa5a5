"""Seeded generators for nested matrices, regression panels and grant extracts.

All randomness comes from numpy's ``default_rng`` (PCG64 bit generator)
seeded with the spec's integer seed, so the same spec always produces the
same output.
"""
from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .bipartite import BipartiteMatrix, from_array
from .ingest import GrantRecord


@dataclass(frozen=True)
class NestedMatrixSpec:
    """Staircase support: university i is active in the first k_i subjects,
    k_i non-increasing. Below ``nestedness=1`` every off-staircase cell gets
    weight ``1 - nestedness`` (times noise), so the support is full."""
    n_universities: int
    n_subjects: int
    nestedness: float = 1.0
    noise: float = 0.0
    seed: int = 0


def staircase(n: int, m: int) -> np.ndarray:
    k = np.maximum(1, np.ceil(m * (n - np.arange(n)) / n)).astype(int)
    return (np.arange(m)[None, :] < k[:, None]).astype(float)


def gen_nested(spec: NestedMatrixSpec) -> BipartiteMatrix:
    if spec.n_universities < 1 or spec.n_subjects < 1:
        raise ValueError("sizes must be at least 1")
    if not 0.0 <= spec.nestedness <= 1.0 or spec.noise < 0:
        raise ValueError("nestedness must be in [0, 1] and noise nonnegative")
    rng = np.random.default_rng(spec.seed)
    n, m = spec.n_universities, spec.n_subjects
    support = staircase(n, m)
    base = np.where(support > 0, 1.0, 1.0 - spec.nestedness)
    w = base * np.exp(spec.noise * rng.standard_normal((n, m)))
    return from_array(w, [f"U{i + 1:03d}" for i in range(n)], [f"S{j + 1:03d}" for j in range(m)])


@dataclass(frozen=True)
class PanelDgpSpec:
    """Poisson panel with additive university, funder and year effects.

    The treatment intensity ``uc_uft_l1`` is lognormal and loads on the
    university effect; ``d_post * uc_uft_l1`` carries ``true_delta``.
    ``true_beta`` maps column names to coefficients: ``uc_uft_l1`` sets its
    main effect, any other name creates a standard-normal covariate.
    ``event_steps`` optionally gives a per-year interaction coefficient,
    replacing the post-period step.
    """
    n_universities: int = 100
    n_funders: int = 6
    years: tuple[int, int] = (2011, 2020)
    true_delta: float = 0.0
    true_beta: dict = field(default_factory=lambda: {"uc_uft_l1": 0.3})
    fe_scale: float = 0.5
    post_year: int = 2016
    seed: int = 0
    base_rate: float = 1.0
    event_steps: dict | None = None


def gen_panel(spec: PanelDgpSpec):
    """Return ``(panel, truth)``; ``truth`` holds the coefficients and the
    drawn fixed effects."""
    y0, y1 = spec.years
    if spec.n_universities < 2 or spec.n_funders < 2 or y1 - y0 < 1:
        raise ValueError("need at least two universities, funders and years")
    if not y0 <= spec.post_year <= y1:
        raise ValueError("post_year must lie within years")
    rng = np.random.default_rng(spec.seed)
    nu, nf = spec.n_universities, spec.n_funders
    years = np.arange(y0, y1 + 1)
    nt = len(years)
    a_u = spec.fe_scale * rng.standard_normal(nu)
    b_f = spec.fe_scale * rng.standard_normal(nf)
    c_t = 0.5 * spec.fe_scale * rng.standard_normal(nt)
    U, F, T = np.meshgrid(np.arange(nu), np.arange(nf), np.arange(nt), indexing="ij")
    U, F, T = U.ravel(), F.ravel(), T.ravel()
    n = len(U)
    uc = np.exp(0.5 * a_u[U] + 0.5 * rng.standard_normal(n))
    post = (years[T] >= spec.post_year).astype(float)
    eta = math.log(spec.base_rate) + a_u[U] + b_f[F] + c_t[T]
    cols = {}
    for name, coef in spec.true_beta.items():
        if name == "uc_uft_l1":
            eta = eta + coef * uc
        else:
            x = rng.standard_normal(n)
            cols[name] = x
            eta = eta + coef * x
    if spec.event_steps is not None:
        step = np.array([spec.event_steps.get(int(y), 0.0) for y in years])
        eta = eta + step[T] * uc
    else:
        eta = eta + spec.true_delta * post * uc
    y = rng.poisson(np.exp(eta)).astype(float)
    panel = pd.DataFrame({
        "university": [f"U{i + 1:03d}" for i in U],
        "funder": [f"F{j + 1}" for j in F],
        "year": years[T],
        "v": y,
        "uc_uft_l1": uc,
        "d_post": post.astype(int),
        "d_t": (F < nf // 2).astype(int),
        **cols,
    })
    truth = {"delta": spec.true_delta, "beta": dict(spec.true_beta), "university_fe": a_u,
             "funder_fe": b_f, "year_fe": c_t, "event_steps": spec.event_steps}
    return panel, truth


@dataclass(frozen=True)
class GrantFixtureSpec:
    """Synthetic grant extract in the ingest schema.

    Universities carry a latent capability; more capable ones are funded in
    more subjects, including the rarer high-index subjects of each council.
    """
    n_universities: int = 30
    funders: tuple[str, ...] = ("AHRC", "BBSRC", "EPSRC", "MRC", "NERC")
    subjects_per_funder: int = 12
    years: tuple[int, int] = (2006, 2020)
    grants_per_year: float = 2.0
    post_year: int = 2016
    seed: int = 0


def gen_grants(spec: GrantFixtureSpec) -> list[GrantRecord]:
    rng = np.random.default_rng(spec.seed)
    nu, ns = spec.n_universities, spec.subjects_per_funder
    unis = [f"Uni{i + 1:02d}" for i in range(nu)]
    capability = np.sort(rng.uniform(0.2, 1.0, nu))[::-1]
    # shared subjects link councils so the pooled matrix stays connected
    shared = [f"Shared{k + 1}" for k in range(3)]
    records = []
    serial = 0
    for f in spec.funders:
        subjects = [f"{f}-S{j + 1:02d}" for j in range(ns)] + shared
        difficulty = np.linspace(0.0, 0.9, len(subjects))
        for year in range(spec.years[0], spec.years[1] + 1):
            boost = 1.3 if year >= spec.post_year else 1.0
            for i, u in enumerate(unis):
                lam = spec.grants_per_year * boost * (0.4 + capability[i])
                for _ in range(rng.poisson(lam)):
                    # subjects harder than the university's capability are rarer, not impossible
                    p = np.where(difficulty <= capability[i], 1.0, 0.15)
                    p = p / p.sum()
                    k = int(rng.integers(1, 4))
                    chosen = rng.choice(len(subjects), size=k, replace=False, p=p)
                    raw = rng.integers(1, 10, size=k).astype(float)
                    pct = np.floor(100 * raw / raw.sum())
                    pct[0] += 100 - pct.sum()
                    value = float(np.round(np.exp(rng.normal(12.5, 0.8)) * (0.5 + capability[i])))
                    start = dt.date(year, int(rng.integers(1, 13)), int(rng.integers(1, 29)))
                    serial += 1
                    shares = tuple(sorted((subjects[c], float(p_) / 100.0) for c, p_ in zip(chosen, pct)))
                    records.append(GrantRecord(f"G{serial:06d}", f, u, start, value, shares))
    return records
