"""Run configuration loaded from TOML or JSON."""
from __future__ import annotations

import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .bipartite import FilterParams
from .econometrics import ModelError, ModelSpec
from .ingest import COUNCILS
from .panel import PanelConfig
from .synth import GrantFixtureSpec

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Period:
    name: str
    start: int
    end: int


@dataclass
class ModelEntry:
    spec: ModelSpec
    event_study: dict | None = None
    magnitude: str | None = None


@dataclass
class RunConfig:
    sources: list[Path] = field(default_factory=list)
    url: str | None = None
    page_size: int = 100
    cache_dir: Path = Path(".fitrank-cache")
    known_funders: tuple[str, ...] | None = COUNCILS
    periods: list[Period] = field(default_factory=list)
    filters: FilterParams = field(default_factory=FilterParams)
    tol: float = 1e-10
    max_iter: int = 10_000
    n_random_inits: int = 10
    deflator: Path | None = None
    deflator_base_year: int | None = None
    panel: PanelConfig = field(default_factory=PanelConfig)
    models: list[ModelEntry] = field(default_factory=list)
    out_dir: Path = Path("out")
    seed: int = 0
    report_baseline: str | None = None
    synth: GrantFixtureSpec = field(default_factory=GrantFixtureSpec)
    synth_output: Path | None = None


def _read(path: Path) -> dict:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        if path.suffix.lower() == ".json":
            return json.loads(raw)
        return tomllib.loads(raw.decode("utf-8"))
    except (json.JSONDecodeError, tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None


def load_config(path: str | os.PathLike, require_sources: bool = True) -> RunConfig:
    """Load and validate a run config; relative paths resolve against the
    config file's directory. ``FITRANK_CACHE`` overrides the cache dir."""
    path = Path(path)
    d = _read(path)
    base = path.resolve().parent
    rel = lambda p: (base / p) if p is not None else None  # noqa: E731
    try:
        cfg = RunConfig()
        data = d.get("data", {})
        cfg.sources = [rel(p) for p in data.get("sources", [])]
        cfg.url = data.get("url") or None
        cfg.page_size = int(data.get("page_size", cfg.page_size))
        cfg.cache_dir = rel(data.get("cache_dir", ".fitrank-cache"))
        if os.environ.get("FITRANK_CACHE"):
            cfg.cache_dir = Path(os.environ["FITRANK_CACHE"])
        if "known_funders" in data:
            kf = data["known_funders"]
            cfg.known_funders = None if kf in ("any", None) else tuple(kf)
        if data.get("deflator"):
            cfg.deflator = rel(data["deflator"])
            cfg.deflator_base_year = int(data["deflator_base_year"])

        cfg.periods = [Period(str(p["name"]), int(p["start"]), int(p["end"]))
                       for p in d.get("periods", [])]
        f = d.get("filters", {})
        cfg.filters = FilterParams(int(f.get("overall_min_subject_grants", 9)),
                                   int(f.get("council_min_subjects", 5)),
                                   int(f.get("council_min_universities", 5)))
        fit = d.get("fitness", {})
        cfg.tol = float(fit.get("tol", cfg.tol))
        cfg.max_iter = int(fit.get("max_iter", cfg.max_iter))
        cfg.n_random_inits = int(fit.get("n_random_inits", cfg.n_random_inits))

        p = d.get("panel", {})
        cfg.panel = PanelConfig(
            years=tuple(p.get("years", (2011, 2020))),
            exclude_funders=tuple(p.get("exclude_funders", ("BBSRC",))),
            treated_funders=tuple(p.get("treated_funders", PanelConfig.treated_funders)),
            post_year=int(p.get("post_year", 2016)),
            window_len=int(p.get("window_len", 3)),
            long_window_len=int(p.get("long_window_len", 5)),
            filters=cfg.filters, tol=cfg.tol, max_iter=cfg.max_iter)

        for m in d.get("models", []):
            m = dict(m)
            es = m.pop("event_study", None)
            mag = m.pop("magnitude", None)
            spec = ModelSpec.from_dict(m)
            if not spec.name:
                raise ConfigError("every model needs a name")
            cfg.models.append(ModelEntry(spec, es, mag))

        cfg.out_dir = rel(d.get("out_dir", "out"))
        cfg.seed = int(d.get("seed", 0))
        cfg.report_baseline = d.get("report", {}).get("baseline_period")
        s = d.get("synth", {})
        if s:
            s = dict(s)
            out = s.pop("output", None)
            cfg.synth_output = rel(out) if out else None
            if "funders" in s:
                s["funders"] = tuple(s["funders"])
            if "years" in s:
                s["years"] = tuple(s["years"])
            s.setdefault("seed", cfg.seed)
            cfg.synth = GrantFixtureSpec(**s)
    except (KeyError, TypeError, ValueError, ModelError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid config {path}: {exc!r}") from None
    _validate(cfg, require_sources)
    return cfg


def _validate(cfg: RunConfig, require_sources: bool) -> None:
    names = [p.name for p in cfg.periods]
    if len(set(names)) != len(names):
        raise ConfigError("period names must be unique")
    for p in cfg.periods:
        if p.start > p.end:
            raise ConfigError(f"period {p.name} ends before it starts")
    for a, b in zip(cfg.periods, cfg.periods[1:]):
        if b.start <= a.end:
            raise ConfigError(f"periods {a.name} and {b.name} overlap or are out of order")
    if cfg.report_baseline and cfg.report_baseline not in names:
        raise ConfigError(f"baseline period {cfg.report_baseline!r} is not defined")
    if require_sources:
        if not cfg.sources and not cfg.url:
            raise ConfigError("no data sources configured")
        for s in cfg.sources:
            if not s.exists():
                raise ConfigError(f"data source {s} does not exist")
        if cfg.deflator and not cfg.deflator.exists():
            raise ConfigError(f"deflator file {cfg.deflator} does not exist")
