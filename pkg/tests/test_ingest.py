import datetime as dt
import http.server
import json
import threading
from urllib.parse import parse_qs, urlparse

import pytest
from hypothesis import given, strategies as st

from fitrank import ingest
from fitrank.ingest import (Allocation, DeflatorError, DeflatorSeries, GrantRecord, IngestError,
                            allocate, deflate, fetch_remote, parse_grants, window)

HEADER = "grant_id,funder,lead_university,start_date,value_gbp,subjects\n"


def test_three_valid_rows():
    src = HEADER + ("G1,EPSRC,UCL,2012-03-01,100,Blood:60;Ear:40\n"
                    "G2,MRC,Oxford,2013-01-01,50,Blood:100\n"
                    "G3,AHRC,Leeds,2014-12-31,10,\"Art:33.3;Music:33.3;Dance:33.4\"\n")
    res = parse_grants(src)
    assert len(res.records) == 3 and not res.rejects
    g = res.records[0]
    assert g.subject_shares == (("Blood", 0.6), ("Ear", 0.4)) and g.year == 2012


def test_share_sum_out_of_tolerance():
    res = parse_grants(HEADER + "G1,EPSRC,UCL,2012-03-01,100,A:50;B:30\n")
    assert not res.records
    assert [(r.row, r.reason) for r in res.rejects] == [(1, "share sum out of tolerance")]


@pytest.mark.parametrize("subjects,reason", [
    ("A:60;A:40", "duplicate subject"),
    ("A:120;B:-20", "percentage out of range"),
    ("", "no subject shares"),
])
def test_row_rejects(subjects, reason):
    res = parse_grants(HEADER + f"G1,EPSRC,UCL,2012-03-01,100,{subjects}\n")
    assert res.rejects[0].reason == reason


def test_tolerance_band_renormalises():
    res = parse_grants(HEADER + "G1,EPSRC,UCL,2012-03-01,100,A:60;B:40.4\n")
    assert sum(f for _, f in res.records[0].subject_shares) == pytest.approx(1.0, abs=1e-15)


def test_unknown_funder_and_negative_value():
    res = parse_grants(HEADER + "G1,XYZ,UCL,2012-03-01,100,A:100\nG2,MRC,UCL,2012-03-01,-1,A:100\n")
    assert [r.reason for r in res.rejects][0] == "unknown funder"
    assert len(res.rejects) == 2
    assert len(parse_grants(HEADER + "G1,XYZ,UCL,2012-03-01,100,A:100\n", known_funders=None).records) == 1


def test_bad_header_is_fatal():
    with pytest.raises(IngestError):
        parse_grants("id,funder\n1,MRC\n")


def test_json_format():
    doc = [{"grant_id": "G1", "funder": "MRC", "lead_university": "UCL", "start_date": "2012-01-05",
            "value_gbp": 10, "subject_shares": [{"subject": "A", "percentage": 100}]}]
    res = parse_grants(json.dumps(doc), format="json")
    assert res.records[0].subject_shares == (("A", 1.0),)
    res = parse_grants(json.dumps({"records": doc}), format="json")
    assert len(res.records) == 1


def test_allocate_example():
    g = GrantRecord("G1", "MRC", "UCL", dt.date(2012, 5, 1), 100.0, (("A", 0.6), ("B", 0.4)))
    assert allocate([g]) == [Allocation("UCL", "A", "MRC", 2012, 60.0, "G1"),
                             Allocation("UCL", "B", "MRC", 2012, 40.0, "G1")]


def test_deflate():
    a = [Allocation("U", "S", "F", 2011, 100.0), Allocation("U", "S", "F", 2012, 100.0)]
    assert deflate(a, DeflatorSeries.identity([2011, 2012])) == a
    out = deflate(a, DeflatorSeries(2011, {2011: 1.0, 2012: 2.0}))
    assert [x.value for x in out] == [100.0, 200.0]
    assert deflate(a[1:], DeflatorSeries(2011, {2011: 1.0, 2012: 1.1}))[0].value == pytest.approx(110.0)
    with pytest.raises(DeflatorError, match="2012"):
        deflate(a, DeflatorSeries(2011, {2011: 1.0}))
    with pytest.raises(DeflatorError):
        DeflatorSeries(2011, {2011: 1.2})


def test_allocation_csv_roundtrip(tmp_path):
    a = [Allocation("U,1", "S", "F", 2011, 0.1 + 0.2, "G1")]
    ingest.write_allocations(a, tmp_path / "a.csv")
    assert ingest.read_allocations(tmp_path / "a.csv") == a


shares = st.lists(st.integers(1, 50), min_size=1, max_size=6)


@st.composite
def records(draw):
    out = []
    for i in range(draw(st.integers(1, 15))):
        raw = draw(shares)
        tot = sum(raw)
        fr = tuple((f"S{j}", r / tot) for j, r in enumerate(raw))
        out.append(GrantRecord(f"G{i:03d}", draw(st.sampled_from(["MRC", "AHRC"])), f"U{draw(st.integers(0, 3))}",
                               dt.date(draw(st.integers(2006, 2020)), 1, 1),
                               draw(st.floats(0, 1e7)), fr))
    return out


@given(records())
def test_value_conservation(recs):
    allocs = allocate(recs)
    for r in recs:
        tot = sum(a.value for a in allocs if a.grant_id == r.grant_id)
        assert tot == pytest.approx(r.value_gbp, rel=1e-6, abs=1e-9)


@given(records(), st.randoms(use_true_random=False))
def test_allocation_order_is_input_independent(recs, rnd):
    shuffled = list(recs)
    rnd.shuffle(shuffled)
    assert allocate(recs) == allocate(shuffled)


@given(records())
def test_window_partition(recs):
    allocs = allocate(recs)
    parts = window(allocs, 2006, 2010) + window(allocs, 2011, 2015) + window(allocs, 2016, 2020)
    assert sorted(parts, key=repr) == sorted(allocs, key=repr)
    assert window(allocs, 2006, 2020) == allocs
    assert all(a.funder == "MRC" for a in window(allocs, 2006, 2020, {"MRC"}))


# -- remote ------------------------------------------------------------------

def _grant(i, funder="MRC"):
    return {"grant_id": f"G{i:04d}", "funder": funder, "lead_university": "UCL",
            "start_date": "2015-02-01", "value_gbp": 1000 + i,
            "subject_shares": [{"subject": "A", "percentage": 70}, {"subject": "B", "percentage": 30}]}


class _Api:
    def __init__(self, n_records, page_size, bad_funder_at=None, fail_first=0):
        self.records = [_grant(i, "NOPE" if i == bad_funder_at else "MRC") for i in range(n_records)]
        self.page_size = page_size
        self.requests = 0
        self.fail_first = fail_first

    def handler(self):
        api = self

        class H(http.server.BaseHTTPRequestHandler):
            def do_GET(self):
                api.requests += 1
                if api.fail_first > 0:
                    api.fail_first -= 1
                    self.send_response(503)
                    self.end_headers()
                    return
                q = parse_qs(urlparse(self.path).query)
                page, size = int(q["page"][0]), int(q["page_size"][0])
                total = -(-len(api.records) // size)
                body = json.dumps({"records": api.records[(page - 1) * size: page * size],
                                   "total_pages": total}).encode()
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def log_message(self, *a):
                pass
        return H


@pytest.fixture
def serve():
    servers = []

    def start(api):
        srv = http.server.ThreadingHTTPServer(("127.0.0.1", 0), api.handler())
        threading.Thread(target=srv.serve_forever, daemon=True).start()
        servers.append(srv)
        return f"http://127.0.0.1:{srv.server_address[1]}/grants"
    yield start
    for s in servers:
        s.shutdown()


def test_fetch_two_pages_and_warm_cache(serve, tmp_path):
    api = _Api(200, 100)
    url = serve(api)
    res = fetch_remote(url, 100, tmp_path)
    assert len(res.records) == 200 and not res.rejects
    assert len(list(tmp_path.glob("*.json"))) == 2
    assert api.requests == 2
    again = fetch_remote(url, 100, tmp_path)
    assert api.requests == 2
    assert ingest.records_to_csv(again.records) == ingest.records_to_csv(res.records)


def test_fetch_matches_parse_of_concatenated_pages(serve, tmp_path):
    api = _Api(25, 10, bad_funder_at=13)
    res = fetch_remote(serve(api), 10, tmp_path)
    direct = parse_grants(json.dumps(api.records), format="json")
    assert res.records == direct.records and res.rejects == direct.rejects
    assert [(r.row, r.reason) for r in res.rejects] == [(14, "unknown funder")]


def test_fetch_retries_then_succeeds(serve, tmp_path):
    api = _Api(5, 10, fail_first=2)
    res = fetch_remote(serve(api), 10, tmp_path, backoff=0.01)
    assert len(res.records) == 5 and api.requests == 3


def test_fetch_gives_up_naming_page(serve, tmp_path):
    api = _Api(5, 10, fail_first=100)
    with pytest.raises(IngestError, match="page 1"):
        fetch_remote(serve(api), 10, tmp_path, retries=1, backoff=0.0)
