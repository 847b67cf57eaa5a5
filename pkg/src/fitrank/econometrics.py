"""Fixed-effects Poisson (PML) and log-linear panel regressions with
cluster-robust inference, difference-in-differences and event studies.

Fixed effects enter as explicit dummy columns with the first level of each
dimension as reference. Columns that are linear combinations of earlier
columns (for instance ``d_post`` under year effects) are dropped and listed in
``RegressionFit.dropped_terms``.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
import pandas as pd
from scipy import linalg, sparse, special, stats

log = logging.getLogger(__name__)

FAMILIES = ("poisson_pml", "linear_log")
FE_DIMS = ("university", "funder", "year", "pair")
TRENDS = (None, "funder", "funder_post")


class ModelError(ValueError):
    """Bad specification or data for a model."""


class ConvergenceError(ArithmeticError):
    def __init__(self, msg, trace=()):
        super().__init__(msg)
        self.trace = list(trace)


@dataclass
class ModelSpec:
    """Declarative regression model.

    ``regressors`` are column names or ``:``-joined products of columns. The
    pseudo-factor ``year`` in a product (``year:uc_uft_l1``) expands to one
    year-dummy interaction per sample year except ``base_year``.
    ``fixed_effects`` may contain ``pair`` for university-by-funder effects.
    ``trend_terms="funder"`` adds funder-specific linear trends;
    ``"funder_post"`` adds those trends and their product with ``d_post``.
    """
    outcome: str = "v"
    regressors: list[str] = field(default_factory=list)
    fixed_effects: list[str] = field(default_factory=lambda: ["university", "funder", "year"])
    family: str = "poisson_pml"
    cluster_dims: list[str] = field(default_factory=lambda: ["university", "funder"])
    trend_terms: str | None = None
    base_year: int | None = None
    years: tuple[int, int] | None = None
    name: str = ""

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known - {"event_study"}
        if extra:
            raise ModelError(f"unknown model spec keys {sorted(extra)}")
        d = {k: v for k, v in d.items() if k in known}
        if d.get("years") is not None:
            d["years"] = tuple(d["years"])
        return cls(**d)

    def validate(self, columns: Iterable[str]) -> None:
        cols = set(columns)
        if self.family not in FAMILIES:
            raise ModelError(f"unknown family {self.family!r}")
        if self.trend_terms not in TRENDS:
            raise ModelError(f"unknown trend option {self.trend_terms!r}")
        if self.outcome not in cols:
            raise ModelError(f"outcome column {self.outcome!r} missing")
        for term in self.regressors:
            factors = term.split(":")
            if self.outcome in factors:
                raise ModelError("outcome cannot appear among regressors")
            for f in factors:
                if f != "year" and f not in cols:
                    raise ModelError(f"regressor factor {f!r} missing from panel")
        for fe in self.fixed_effects:
            if fe not in FE_DIMS:
                raise ModelError(f"unknown fixed effect {fe!r}")


@dataclass
class RegressionFit:
    spec: ModelSpec
    coefficients: dict[str, float]
    vcov: np.ndarray
    loglik: float
    n_obs: int
    n_dropped: int
    converged: bool
    dropped_terms: list[str] = field(default_factory=list)
    iterations: int = 0
    vcov_floored: bool = False
    n_missing: int = 0
    # estimation internals kept for re-clustering
    rows: np.ndarray = field(default=None, repr=False)
    X: np.ndarray = field(default=None, repr=False)
    resid: np.ndarray = field(default=None, repr=False)
    bread: np.ndarray = field(default=None, repr=False)
    fitted: np.ndarray = field(default=None, repr=False)

    @property
    def terms(self) -> list[str]:
        return list(self.coefficients)

    def se(self, term: str) -> float:
        i = self.terms.index(term)
        return float(math.sqrt(max(self.vcov[i, i], 0.0)))

    def table(self, include_fe: bool = False) -> pd.DataFrame:
        rows = []
        for i, t in enumerate(self.terms):
            if not include_fe and (_is_fe(t) or t == "_cons"):
                continue
            b = self.coefficients[t]
            se = math.sqrt(max(self.vcov[i, i], 0.0))
            z = b / se if se > 0 else float("nan")
            p = float(2 * stats.norm.sf(abs(z))) if se > 0 else float("nan")
            rows.append((t, b, se, z, p, stars(p)))
        return pd.DataFrame(rows, columns=["term", "coefficient", "robust_se", "z", "p_value", "stars"])

    def summary(self) -> dict:
        return {"name": self.spec.name, "family": self.spec.family, "loglik": self.loglik,
                "n_obs": self.n_obs, "n_dropped": self.n_dropped, "n_missing": self.n_missing,
                "converged": self.converged, "iterations": self.iterations,
                "dropped_terms": self.dropped_terms, "vcov_floored": self.vcov_floored,
                "cluster_dims": list(self.spec.cluster_dims),
                "fixed_effects": list(self.spec.fixed_effects)}


def stars(p: float) -> str:
    if not p == p:
        return ""
    return "***" if p < 0.001 else "**" if p < 0.01 else "*" if p < 0.05 else ""


def _is_fe(term: str) -> bool:
    return term.split("[", 1)[0] in FE_DIMS or term.startswith(("trend[", "trend_post["))


def _cluster_ids(panel: pd.DataFrame, dim: str) -> np.ndarray:
    if dim == "pair":
        return (panel["university"].astype(str) + "|" + panel["funder"].astype(str)).to_numpy()
    if dim == "obs":
        return np.arange(len(panel))
    return panel[dim].astype(str).to_numpy()


# -- design ------------------------------------------------------------------

def _expand_terms(panel: pd.DataFrame, spec: ModelSpec, years: list[int]):
    names, cols = [], []
    base = spec.base_year if spec.base_year is not None else years[0]
    for term in spec.regressors:
        factors = term.split(":")
        if "year" in factors:
            rest = [f for f in factors if f != "year"]
            prod = np.ones(len(panel))
            for f in rest:
                prod = prod * panel[f].to_numpy(float)
            yr = panel["year"].to_numpy()
            for y in years:
                if y == base:
                    continue
                names.append(":".join([str(y), *rest]))
                cols.append(np.where(yr == y, prod, 0.0))
        else:
            prod = np.ones(len(panel))
            for f in factors:
                prod = prod * panel[f].to_numpy(float)
            names.append(term)
            cols.append(prod)
    return names, cols


def _fe_columns(panel: pd.DataFrame, spec: ModelSpec):
    names, cols = [], []
    for fe in spec.fixed_effects:
        ids = _cluster_ids(panel, fe) if fe == "pair" else panel[fe].to_numpy()
        levels = sorted(set(ids.tolist()))
        for lev in levels[1:]:
            names.append(f"{fe}[{lev}]")
            cols.append((ids == lev).astype(float))
    if spec.trend_terms:
        yr = panel["year"].to_numpy(float)
        t0 = yr.min()
        fund = panel["funder"].to_numpy()
        post = panel["d_post"].to_numpy(float) if spec.trend_terms == "funder_post" else None
        for f in sorted(set(fund.tolist())):
            tr = np.where(fund == f, yr - t0, 0.0)
            names.append(f"trend[{f}]")
            cols.append(tr)
            if post is not None:
                names.append(f"trend_post[{f}]")
                cols.append(tr * post)
    return names, cols


def independent_columns(X: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Greedy left-to-right selection of linearly independent columns.

    A column is kept if its squared residual norm, after projecting its
    unit-normalised version on the columns already kept, exceeds ``tol``.
    """
    n, k = X.shape
    norms = np.sqrt(np.einsum("ij,ij->j", X, X))
    Xs = X / np.where(norms > 0, norms, 1.0)
    G = Xs.T @ Xs
    keep: list[int] = []
    L = np.zeros((k, k))
    for j in range(k):
        if norms[j] == 0:
            continue
        if keep:
            m = len(keep)
            l = linalg.solve_triangular(L[:m, :m], G[keep, j], lower=True, check_finite=False)
            r = G[j, j] - l @ l
        else:
            l, r = np.empty(0), G[j, j]
        if r > tol:
            m = len(keep)
            L[m, :m] = l
            L[m, m] = math.sqrt(r)
            keep.append(j)
    return np.array(keep, dtype=int)


def _prepare(panel: pd.DataFrame, spec: ModelSpec):
    spec.validate(panel.columns)
    if not panel.index.is_unique:
        raise ModelError("panel index must be unique")
    df = panel
    if spec.years is not None:
        df = df[(df["year"] >= spec.years[0]) & (df["year"] <= spec.years[1])]
    needed = {spec.outcome}
    for term in spec.regressors:
        needed.update(f for f in term.split(":") if f != "year")
    if spec.trend_terms == "funder_post":
        needed.add("d_post")
    complete = df[sorted(needed)].notna().all(axis=1)
    n_missing = int((~complete).sum())
    df = df[complete]
    y = df[spec.outcome].to_numpy(float)
    if np.any(y < 0):
        raise ModelError("outcome must be nonnegative")
    n_dropped = 0
    if spec.family == "linear_log":
        pos = y > 0
        n_dropped = int((~pos).sum())
        df = df[pos]
    else:
        # fixed-effect groups with no positive outcome are perfectly separated
        while True:
            bad = np.zeros(len(df), bool)
            yy = df[spec.outcome].to_numpy(float)
            for fe in spec.fixed_effects:
                ids = _cluster_ids(df, fe)
                tot = pd.Series(yy).groupby(ids).transform("sum").to_numpy()
                bad |= tot <= 0
            if not bad.any():
                break
            n_dropped += int(bad.sum())
            df = df[~bad]
    if len(df) == 0:
        raise ModelError("no observations left to estimate")
    years = sorted(set(df["year"].tolist())) if "year" in df else []
    names = ["_cons"]
    cols = [np.ones(len(df))]
    fn, fc = _fe_columns(df, spec)
    rn, rc = _expand_terms(df, spec, years)
    names += fn + rn
    cols += fc + rc
    X = np.column_stack(cols)
    keep = independent_columns(X)
    dropped = [names[j] for j in range(len(names)) if j not in set(keep.tolist())]
    dropped_regs = [d for d in dropped if not _is_fe(d)]
    if dropped_regs:
        log.info("dropped collinear terms: %s", dropped_regs)
    X = X[:, keep]
    names = [names[j] for j in keep]
    y = df[spec.outcome].to_numpy(float)
    if spec.family == "linear_log":
        y = np.log(y)
    return df, X, y, names, dropped, n_dropped, n_missing


# -- estimation ----------------------------------------------------------------

def _poisson_ll(y, eta):
    return float(np.sum(y * eta - np.exp(eta)))


def _solve_psd(H, g):
    d = 1.0 / np.sqrt(np.maximum(np.diag(H), 1e-300))
    Hs = H * d[:, None] * d[None, :]
    ridge = 0.0
    for _ in range(12):
        try:
            c = linalg.cho_factor(Hs + ridge * np.eye(len(g)), check_finite=False)
            return d * linalg.cho_solve(c, d * g, check_finite=False), ridge
        except linalg.LinAlgError:
            ridge = 1e-10 if ridge == 0 else ridge * 100
    raise ConvergenceError("Hessian not positive definite even with ridge")


def _fit_poisson(X, y, max_iter=200, gtol=1e-8, ftol=1e-12):
    n, k = X.shape
    beta = np.zeros(k)
    beta[0] = math.log(max(y.mean(), 1e-300))
    eta = X @ beta
    ll = _poisson_ll(y, eta)
    trace = []
    for it in range(1, max_iter + 1):
        mu = np.exp(eta)
        g = X.T @ (y - mu)
        H = (X * mu[:, None]).T @ X
        step, ridge = _solve_psd(H, g)
        t, accepted = 1.0, False
        for _ in range(40):
            cand = beta + t * step
            eta_c = np.minimum(X @ cand, 700.0)
            ll_c = _poisson_ll(y, eta_c)
            if ll_c >= ll - 1e-12 * abs(ll):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        change = abs(ll_c - ll) / max(abs(ll), 1.0)
        beta, eta, ll = cand, eta_c, ll_c
        gmax = float(np.max(np.abs(X.T @ (y - np.exp(eta)))))
        trace.append((it, ll, gmax, t, ridge))
        if gmax < gtol and change < ftol:
            return beta, ll, it, True, trace
    gmax = float(np.max(np.abs(X.T @ (y - np.exp(eta)))))
    return beta, ll, len(trace), gmax < gtol, trace


def fit(panel: pd.DataFrame, spec: ModelSpec) -> RegressionFit:
    """Estimate ``spec`` on ``panel``; the returned vcov is clustered on
    ``spec.cluster_dims`` (heteroskedasticity-robust when that is empty)."""
    df, X, y, names, dropped, n_dropped, n_missing = _prepare(panel, spec)
    if spec.family == "poisson_pml":
        beta, ll_core, iters, ok, trace = _fit_poisson(X, y)
        if not ok:
            raise ConvergenceError(f"Poisson fit did not converge ({spec.name or spec.outcome})", trace)
        eta = X @ beta
        mu = np.exp(eta)
        resid = y - mu
        bread = (X * mu[:, None]).T @ X
        ll = float(np.sum(y * eta - mu - special.gammaln(y + 1)))
        fitted = mu
    else:
        beta, *_ = linalg.lstsq(X, y, check_finite=False)
        fitted = X @ beta
        resid = y - fitted
        bread = X.T @ X
        n = len(y)
        s2 = float(resid @ resid) / n
        ll = -0.5 * n * (math.log(2 * math.pi * s2) + 1) if s2 > 0 else float("inf")
        iters, ok = 1, True
    res = RegressionFit(spec, dict(zip(names, beta.tolist())), np.zeros((len(names),) * 2), ll,
                        len(y), n_dropped, ok, dropped, iters, False, n_missing,
                        df.index.to_numpy(), X, resid, bread, fitted)
    dims = list(spec.cluster_dims) or ["obs"]
    res.vcov, res.vcov_floored = _cluster_vcov(res, df, dims)
    return res


def _meat(scores: np.ndarray, ids: np.ndarray):
    codes, uniq = pd.factorize(ids, sort=True)
    G = len(uniq)
    C = sparse.csr_matrix((np.ones(len(codes)), (codes, np.arange(len(codes)))), shape=(G, len(codes)))
    S = C @ scores
    return S.T @ S, G


def _cluster_vcov(res: RegressionFit, df: pd.DataFrame, dims: Sequence[str]):
    scores = res.X * res.resid[:, None]
    Ainv = linalg.pinvh(res.bread)
    ids = {d: _cluster_ids(df, d) for d in dims}
    for d, v in ids.items():
        if len(set(v.tolist())) < 2:
            raise ModelError(f"cluster dimension {d!r} has a single cluster")
    V = np.zeros_like(Ainv)
    for r in range(1, len(dims) + 1):
        for subset in itertools.combinations(dims, r):
            if len(subset) == 1:
                key = ids[subset[0]]
            else:
                key = np.array(["\x1f".join(map(str, t)) for t in zip(*(ids[d] for d in subset))])
            meat, G = _meat(scores, key)
            sign = 1.0 if r % 2 == 1 else -1.0
            corr = G / (G - 1) if G > 1 else 1.0
            V += sign * corr * (Ainv @ meat @ Ainv)
    V = (V + V.T) / 2
    if np.linalg.eigvalsh(V).min() >= 0:
        return V, False
    # The FE block depends on which reference levels were dropped, so a
    # floor over the full matrix would leak that choice into the regressor
    # SEs. Floor the regressor block and the nuisance block separately.
    names = list(res.coefficients)
    nuis = np.array([_is_fe(t) or t == "_cons" for t in names])
    out = np.zeros_like(V)
    n_neg = 0
    for mask in (~nuis, nuis):
        if not mask.any():
            continue
        idx = np.ix_(mask, mask)
        w, Q = np.linalg.eigh(V[idx])
        n_neg += int((w < 0).sum())
        out[idx] = (Q * np.maximum(w, 0.0)) @ Q.T
    log.info("cluster vcov had %d negative eigenvalues; floored at zero per block", n_neg)
    return (out + out.T) / 2, True


def cluster_vcov(fit_: RegressionFit, panel: pd.DataFrame, dims: Sequence[str]) -> np.ndarray:
    """Cluster-robust sandwich for an existing fit.

    Multi-way clustering adds and subtracts the one-way sandwiches of every
    intersection of ``dims`` (inclusion-exclusion), each scaled by
    G/(G-1). If the result is indefinite, negative eigenvalues are floored
    at zero separately in the regressor block and the fixed-effect block, and
    covariances between the two blocks are set to zero.
    ``"obs"`` clusters each observation on its own, ``"pair"`` on
    university-funder pairs.
    """
    if not fit_.converged:
        raise ModelError("cluster_vcov needs a converged fit")
    if not dims:
        raise ModelError("cluster_vcov needs at least one dimension")
    df = panel.loc[fit_.rows]
    return _cluster_vcov(fit_, df, list(dims))[0]


@dataclass(frozen=True)
class EventStudyPoint:
    year: int
    coefficient: float
    se: float
    ci_low: float
    ci_high: float


def event_study_spec(spec: ModelSpec, interact_var: str, base_year: int = 2011) -> ModelSpec:
    """Replace ``d_post x interact_var`` by year-dummy interactions."""
    def is_post_term(t):
        return sorted(t.split(":")) == sorted(["d_post", interact_var])
    regs = [t for t in spec.regressors if not is_post_term(t)]
    regs.append(f"year:{interact_var}")
    return replace(spec, regressors=regs, base_year=base_year)


def event_study(panel: pd.DataFrame, spec: ModelSpec, interact_var: str, base_year: int = 2011,
                return_fit: bool = False):
    """Year-by-year interaction coefficients with Wald 95% intervals
    (estimate +/- 1.96 robust SE)."""
    if base_year not in set(panel["year"].tolist()):
        raise ModelError(f"base year {base_year} not in panel")
    es = event_study_spec(spec, interact_var, base_year)
    f = fit(panel, es)
    pts = []
    for t in f.terms:
        head, _, rest = t.partition(":")
        if rest == interact_var and head.isdigit():
            b, se = f.coefficients[t], f.se(t)
            pts.append(EventStudyPoint(int(head), b, se, b - 1.96 * se, b + 1.96 * se))
    pts.sort(key=lambda p: p.year)
    return (pts, f) if return_fit else pts


def magnitude(fit_: RegressionFit, panel: pd.DataFrame, var: str) -> tuple[float, float]:
    """Percent change in the outcome for a one-sd increase in ``var`` before
    and after the policy switch."""
    inter = [t for t in fit_.coefficients if sorted(t.split(":")) == sorted(["d_post", var])]
    if var not in fit_.coefficients or not inter:
        raise ModelError(f"fit lacks a main effect and d_post interaction for {var!r}")
    sd = float(panel.loc[fit_.rows, var].std(ddof=1))
    b, d = fit_.coefficients[var], fit_.coefficients[inter[0]]
    return 100.0 * math.expm1(b * sd), 100.0 * math.expm1((b + d) * sd)


def regression_table(fits: Sequence[RegressionFit]) -> pd.DataFrame:
    """Long-form table of non-FE terms for several fits."""
    frames = []
    for i, f in enumerate(fits):
        t = f.table()
        t.insert(0, "model", f.spec.name or f"model{i + 1}")
        frames.append(t)
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()
