"""Grant records: parsing, remote fetching, allocation to subjects, deflation
and period windows.

Grants are booked wholly to the lead university and in the calendar year of
their start date. Subject percentages are accepted within [99.5, 100.5] and
renormalised so that the shares of one grant sum to one.
"""
from __future__ import annotations

import csv
import datetime as dt
import hashlib
import io
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Mapping, Sequence

import requests

log = logging.getLogger(__name__)

COUNCILS = ("AHRC", "BBSRC", "EPSRC", "ESRC", "MRC", "NERC", "STFC")
CSV_FIELDS = ("grant_id", "funder", "lead_university", "start_date", "value_gbp", "subjects")
SHARE_SUM_BAND = (99.5, 100.5)


class IngestError(Exception):
    """Fatal ingest problem (bad header, unreadable source, network failure)."""


class DeflatorError(IngestError):
    pass


@dataclass(frozen=True)
class GrantRecord:
    grant_id: str
    funder: str
    lead_university: str
    start_date: dt.date
    value_gbp: float
    # (subject, fraction) pairs, fractions renormalised to sum to 1
    subject_shares: tuple[tuple[str, float], ...]

    @property
    def year(self) -> int:
        return self.start_date.year


@dataclass(frozen=True)
class Allocation:
    university: str
    subject: str
    funder: str
    year: int
    value: float
    grant_id: str = ""


@dataclass(frozen=True)
class Reject:
    row: int
    reason: str


@dataclass
class ParseResult:
    records: list[GrantRecord] = field(default_factory=list)
    rejects: list[Reject] = field(default_factory=list)

    def write_rejects(self, path: str | os.PathLike) -> None:
        write_rejects(self.rejects, path)


@dataclass(frozen=True)
class DeflatorSeries:
    base_year: int
    factors: Mapping[int, float]

    def __post_init__(self):
        if any(not f > 0 for f in self.factors.values()):
            raise DeflatorError("deflator factors must be positive")
        if self.factors.get(self.base_year) != 1.0:
            raise DeflatorError(f"factor for base year {self.base_year} must be 1")

    @classmethod
    def identity(cls, years: Iterable[int]) -> "DeflatorSeries":
        years = sorted(set(years))
        return cls(years[0] if years else 0, {y: 1.0 for y in years} or {0: 1.0})

    @classmethod
    def from_csv(cls, path: str | os.PathLike, base_year: int) -> "DeflatorSeries":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            factors = {int(r["year"]): float(r["factor"]) for r in reader}
        return cls(base_year, factors)


class _RowError(ValueError):
    pass


def _parse_date(raw) -> dt.date:
    if isinstance(raw, dt.date):
        return raw
    try:
        return dt.date.fromisoformat(str(raw).strip()[:10])
    except ValueError:
        raise _RowError(f"bad start_date {raw!r}") from None


def _parse_subjects_field(raw: str) -> list[tuple[str, float]]:
    pairs = []
    for chunk in str(raw).split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        subj, sep, pct = chunk.rpartition(":")
        if not sep or not subj.strip():
            raise _RowError(f"bad subject entry {chunk!r}")
        try:
            pairs.append((subj.strip(), float(pct)))
        except ValueError:
            raise _RowError(f"bad subject percentage {chunk!r}") from None
    return pairs


def _build_record(row: Mapping, shares: list[tuple[str, float]],
                  known_funders: Sequence[str] | None) -> GrantRecord:
    grant_id = str(row.get("grant_id") or "").strip()
    if not grant_id:
        raise _RowError("missing grant_id")
    funder = str(row.get("funder") or "").strip()
    if known_funders is not None and funder not in known_funders:
        raise _RowError("unknown funder")
    uni = str(row.get("lead_university") or "").strip()
    if not uni:
        raise _RowError("missing lead_university")
    start = _parse_date(row.get("start_date"))
    try:
        value = float(row.get("value_gbp"))
    except (TypeError, ValueError):
        raise _RowError(f"bad value_gbp {row.get('value_gbp')!r}") from None
    if not value >= 0 or value == float("inf"):
        raise _RowError("value_gbp must be a finite nonnegative amount")
    if not shares:
        raise _RowError("no subject shares")
    names = [s for s, _ in shares]
    if len(set(names)) != len(names):
        raise _RowError("duplicate subject")
    pcts = [p for _, p in shares]
    if any(not (0.0 <= p <= 100.0) for p in pcts):
        raise _RowError("percentage out of range")
    total = sum(pcts)
    if not (SHARE_SUM_BAND[0] <= total <= SHARE_SUM_BAND[1]):
        raise _RowError("share sum out of tolerance")
    normed = tuple((s, p / total) for s, p in shares)
    return GrantRecord(grant_id, funder, uni, start, value, normed)


def parse_records(rows: Iterable[Mapping], known_funders: Sequence[str] | None = COUNCILS,
                  first_row: int = 1) -> ParseResult:
    """Validate JSON-style record objects (``subject_shares`` as a list of
    ``{subject, percentage}``)."""
    out = ParseResult()
    for i, row in enumerate(rows, start=first_row):
        try:
            if not isinstance(row, Mapping):
                raise _RowError("record is not an object")
            raw = row.get("subject_shares")
            if not isinstance(raw, list):
                raise _RowError("subject_shares must be a list")
            try:
                shares = [(str(d["subject"]).strip(), float(d["percentage"])) for d in raw]
            except (KeyError, TypeError, ValueError):
                raise _RowError("bad subject_shares entry") from None
            out.records.append(_build_record(row, shares, known_funders))
        except _RowError as exc:
            out.rejects.append(Reject(i, str(exc)))
    return out


def parse_grants(source: bytes | str | IO, format: str = "csv",
                 known_funders: Sequence[str] | None = COUNCILS) -> ParseResult:
    """Parse a CSV or JSON grant extract.

    Rows that break a record invariant are returned in ``rejects`` with a
    1-based data row number; a malformed CSV header raises ``IngestError``.
    ``known_funders=None`` accepts any funder code.
    """
    if hasattr(source, "read"):
        source = source.read()
    if isinstance(source, bytes):
        source = source.decode("utf-8-sig")
    if format == "json":
        try:
            data = json.loads(source)
        except json.JSONDecodeError as exc:
            raise IngestError(f"malformed JSON: {exc}") from None
        if isinstance(data, dict) and "records" in data:
            data = data["records"]
        if not isinstance(data, list):
            raise IngestError("JSON grant file must be an array of records")
        return parse_records(data, known_funders)
    if format != "csv":
        raise IngestError(f"unsupported format {format!r}")

    reader = csv.DictReader(io.StringIO(source))
    header = [h.strip() for h in (reader.fieldnames or [])]
    missing = [f for f in CSV_FIELDS if f not in header]
    if missing:
        raise IngestError(f"malformed header: missing columns {missing}")
    reader.fieldnames = header
    out = ParseResult()
    for i, row in enumerate(reader, start=1):
        try:
            shares = _parse_subjects_field(row.get("subjects") or "")
            out.records.append(_build_record(row, shares, known_funders))
        except _RowError as exc:
            out.rejects.append(Reject(i, str(exc)))
    return out


def read_grants(path: str | os.PathLike, known_funders: Sequence[str] | None = COUNCILS) -> ParseResult:
    path = Path(path)
    fmt = "json" if path.suffix.lower() == ".json" else "csv"
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise IngestError(f"cannot read {path}: {exc}") from None
    return parse_grants(data, fmt, known_funders)


def write_rejects(rejects: Iterable[Reject], path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "reason"])
        for r in rejects:
            w.writerow([r.row, r.reason])


def records_to_csv(records: Iterable[GrantRecord]) -> str:
    """Serialise records in the ingest CSV schema (percentages, not fractions)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in records:
        subjects = ";".join(f"{s}:{repr(round(float(f) * 100, 10))}" for s, f in r.subject_shares)
        w.writerow([r.grant_id, r.funder, r.lead_university, r.start_date.isoformat(),
                    repr(r.value_gbp), subjects])
    return buf.getvalue()


# -- remote -------------------------------------------------------------------

def _cache_path(cache_dir: Path, endpoint: str, page: int, page_size: int) -> Path:
    key = hashlib.sha256(f"{endpoint}\n{page}\n{page_size}".encode()).hexdigest()[:32]
    return cache_dir / f"page-{key}.json"


def _get_page(session, endpoint: str, page: int, page_size: int, retries: int,
              backoff: float, timeout: float) -> bytes:
    last = None
    for attempt in range(retries + 1):
        try:
            resp = session.get(endpoint, params={"page": page, "page_size": page_size},
                               timeout=timeout)
            resp.raise_for_status()
            json.loads(resp.content)
            return resp.content
        except (requests.RequestException, ValueError) as exc:
            last = exc
            log.warning("page %d attempt %d failed: %s", page, attempt + 1, exc)
            if attempt < retries:
                time.sleep(backoff * 2 ** attempt)
    raise IngestError(f"failed to fetch page {page} after {retries + 1} attempts: {last}")


def fetch_remote(endpoint: str, page_size: int, cache_dir: str | os.PathLike,
                 known_funders: Sequence[str] | None = COUNCILS, retries: int = 3,
                 backoff: float = 0.5, timeout: float = 30.0,
                 session: requests.Session | None = None) -> ParseResult:
    """Fetch every page of a paginated grant endpoint, caching raw pages.

    Pages are numbered from 1; the first page carries ``total_pages``. A page
    already in ``cache_dir`` is never requested again, so a warm cache makes
    no network calls at all.
    """
    if page_size < 1:
        raise ValueError("page_size must be positive")
    cache = Path(cache_dir)
    cache.mkdir(parents=True, exist_ok=True)
    session = session or requests.Session()

    rows: list = []
    page, total = 1, None
    while total is None or page <= total:
        path = _cache_path(cache, endpoint, page, page_size)
        if path.exists():
            raw = path.read_bytes()
        else:
            raw = _get_page(session, endpoint, page, page_size, retries, backoff, timeout)
            tmp = path.with_suffix(".tmp")
            tmp.write_bytes(raw)
            os.replace(tmp, path)
        body = json.loads(raw)
        if total is None:
            total = int(body.get("total_pages", 1))
        rows.extend(body.get("records", []))
        page += 1
    return parse_records(rows, known_funders)


# -- transformations ---------------------------------------------------------

def allocate(records: Iterable[GrantRecord]) -> list[Allocation]:
    out = []
    for r in sorted(records, key=lambda r: r.grant_id):
        for subj, share in sorted(r.subject_shares):
            out.append(Allocation(r.lead_university, subj, r.funder, r.year,
                                  r.value_gbp * share, r.grant_id))
    return out


def deflate(allocs: Sequence[Allocation], series: DeflatorSeries) -> list[Allocation]:
    missing = sorted({a.year for a in allocs} - set(series.factors))
    if missing:
        raise DeflatorError(f"deflator has no factor for years {missing}")
    return [Allocation(a.university, a.subject, a.funder, a.year,
                       a.value * series.factors[a.year], a.grant_id) for a in allocs]


def window(allocs: Iterable[Allocation], start_year: int, end_year: int,
           funder_filter: Iterable[str] | None = None) -> list[Allocation]:
    if start_year > end_year:
        raise ValueError("start_year must not exceed end_year")
    keep = None if funder_filter is None else set(funder_filter)
    return [a for a in allocs if start_year <= a.year <= end_year
            and (keep is None or a.funder in keep)]


ALLOC_FIELDS = ("grant_id", "university", "subject", "funder", "year", "value")


def write_allocations(allocs: Iterable[Allocation], path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ALLOC_FIELDS)
        for a in allocs:
            w.writerow([a.grant_id, a.university, a.subject, a.funder, a.year, repr(a.value)])


def read_allocations(path: str | os.PathLike) -> list[Allocation]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [Allocation(r["university"], r["subject"], r["funder"], int(r["year"]),
                           float(r["value"]), r["grant_id"]) for r in csv.DictReader(fh)]
