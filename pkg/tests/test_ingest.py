import math
import warnings
from datetime import date, datetime, timezone

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepi2t.geo import haversine_km
from deepi2t.ingest import (
    Corpus,
    ParseError,
    RowRejected,
    Trajectory,
    clean_trips,
    format_porto_row,
    format_record,
    parse_porto_row,
    parse_record,
    read_corpus,
    read_generic_csv,
    read_porto_csv,
    split_by_date,
    trip_label,
    write_corpus,
)

HEADER = "TRIP_ID,CALL_TYPE,ORIGIN_CALL,ORIGIN_STAND,TAXI_ID,TIMESTAMP,DAY_TYPE,MISSING_DATA,POLYLINE"


def porto_line(poly, ts=1372636858, missing="False", taxi="20000589"):
    return f'"1372636858620000589","C","","","{taxi}","{ts}","A","{missing}","{poly}"'


def test_porto_three_points_at_15s():
    tr = parse_porto_row(porto_line("[[-8.618643,41.141412],[-8.618499,41.141376],[-8.620326,41.14251]]"))
    assert tr.t.tolist() == [1372636858, 1372636873, 1372636888]
    assert tr.departure == 1372636858
    assert tr.vehicle_id == "20000589"
    assert tr.lon[0] == -8.618643


def test_porto_single_point_then_cleaned():
    tr = parse_porto_row(porto_line("[[-8.6,41.1]]"))
    assert trip_label(tr).travel_time == 0
    kept, rep = clean_trips(Corpus([tr]))
    assert len(kept) == 0 and rep.removed["min_points"] == 1


@pytest.mark.parametrize("poly", ["[[-8.6,41.1],[-8.61,41.2]", "[[-8.6]]", "[[-8.6,\"a\"]]", "{}"])
def test_porto_malformed_polyline(poly):
    with pytest.raises(ParseError) as ei:
        parse_porto_row(porto_line(poly), row_index=7)
    assert ei.value.row_index == 7
    assert not isinstance(ei.value, RowRejected)


def test_porto_rejects_missing_and_empty():
    with pytest.raises(RowRejected):
        parse_porto_row(porto_line("[[-8.6,41.1],[-8.61,41.1]]", missing="True"))
    with pytest.raises(RowRejected):
        parse_porto_row(porto_line("[]"))


def test_porto_csv_skip_and_count(tmp_path):
    p = tmp_path / "p.csv"
    rows = [
        porto_line("[[-8.6,41.1],[-8.61,41.1]]"),
        porto_line("[[-8.6,41.1]", ts=1372636900),
        porto_line("[]", ts=1372636901),
        porto_line("[[-8.6,41.1],[-8.6,41.2],[-8.6,41.3]]", ts=1372630000, taxi="7"),
    ]
    p.write_text(HEADER + "\n" + "\n".join(rows) + "\n")
    corpus, stats = read_porto_csv(p)
    assert len(corpus) == 2 and stats == {"parsed": 2, "malformed": 1, "rejected": 1}
    assert corpus[0].vehicle_id == "7"  # sorted by departure


def test_porto_roundtrip():
    line = porto_line("[[-8.618643,41.141412],[-8.618499,41.141376],[-8.620326,41.14251]]")
    a = parse_porto_row(line)
    b = parse_porto_row(format_porto_row(a))
    assert a == b


coords = st.tuples(st.floats(-180, 180, allow_nan=False), st.floats(-90, 90, allow_nan=False))


@given(st.lists(coords, min_size=1, max_size=30), st.integers(1, 2_000_000_000), st.lists(st.integers(0, 100), min_size=30, max_size=30))
def test_porto_and_record_roundtrip_property(pts, t0, gaps):
    t = t0 + np.concatenate([[0], np.cumsum(gaps[: len(pts) - 1])]).astype(np.int64)
    tr = Trajectory("v 1", t, [p[0] for p in pts], [p[1] for p in pts])
    assert parse_record(format_record(tr)) == tr
    if np.all(np.diff(t) == 15):
        assert parse_porto_row(format_porto_row(tr)) == tr


def test_trip_label_examples():
    same = Trajectory("a", [100, 160], [1.0, 1.0], [2.0, 2.0])
    assert trip_label(same) == (60, 0.0)
    eq = Trajectory("a", [1, 2], [0.0, 1.0], [0.0, 0.0])
    # hand value: R * pi / 180 with R = 6371 km
    assert trip_label(eq).travel_distance == pytest.approx(6371.0 * math.pi / 180.0, abs=1e-9)
    assert trip_label(eq).travel_distance == pytest.approx(111.195, abs=5e-4)
    three = Trajectory("a", [1, 2, 3], [0.0, 0.5, 1.0], [0.0, 0.0, 0.0])
    assert trip_label(three).travel_distance == pytest.approx(trip_label(eq).travel_distance, rel=1e-12)


triple = st.tuples(coords, coords, coords)


@settings(max_examples=1000)
@given(triple)
def test_haversine_metric_properties(abc):
    a, b, c = abc
    ab, ba = haversine_km(*a, *b), haversine_km(*b, *a)
    assert ab == pytest.approx(ba, abs=1e-9)
    assert ab >= 0
    assert haversine_km(*a, *a) == 0.0
    assert ab <= haversine_km(*a, *c) + haversine_km(*c, *b) + 1e-7


def test_haversine_zero_iff_identical():
    assert haversine_km(10.0, 20.0, 10.0, 20.0) == 0.0
    assert haversine_km(10.0, 20.0, 10.0 + 1e-9, 20.0) > 0.0


@given(st.lists(st.integers(1_388_534_400, 1_420_070_399), min_size=0, max_size=60), st.integers(0, 364))
def test_split_partition_property(stamps, day):
    corpus = Corpus([Trajectory(f"v{i}", [s, s + 60], [0, 0], [0, 0]) for i, s in enumerate(stamps)])
    cutoff = date.fromordinal(date(2014, 1, 1).toordinal() + day)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        tr, te = split_by_date(corpus, cutoff)
    assert len(tr) + len(te) == len(corpus)
    ids_tr = {t.trip_id for t in tr}
    assert ids_tr.isdisjoint({t.trip_id for t in te})
    assert all(datetime.fromtimestamp(t.departure, timezone.utc).date() < cutoff for t in tr)
    assert all(datetime.fromtimestamp(t.departure, timezone.utc).date() >= cutoff for t in te)


def test_split_porto_cutoff_day_counts():
    # Porto year runs 2013-07-01 .. 2014-06-30; day 274 of it is 2014-03-31
    start = date(2013, 7, 1)
    cutoff = date.fromordinal(start.toordinal() + 273)
    assert cutoff == date(2014, 3, 31)
    days = [date.fromordinal(start.toordinal() + k) for k in range(365)]
    stamps = [int(datetime(d.year, d.month, d.day, 12, tzinfo=timezone.utc).timestamp()) for d in days]
    corpus = Corpus([Trajectory("v", [s, s + 60], [0, 0], [0, 0]) for s in stamps])
    tr, te = split_by_date(corpus, cutoff)
    assert len(tr) == 273
    # the public file's last day is 2014-06-30; see the decisions ledger for the 90 vs 92 count
    assert len(te) == 92


def test_split_empty_side_warns_and_midnight_goes_to_test():
    mid = int(datetime(2014, 3, 31, tzinfo=timezone.utc).timestamp())
    corpus = Corpus([Trajectory("v", [mid, mid + 60], [0, 0], [0, 0])])
    with pytest.warns(UserWarning, match="training side is empty"):
        tr, te = split_by_date(corpus, date(2014, 3, 31))
    assert len(te) == 1 and len(tr) == 0
    with pytest.warns(UserWarning, match="test side is empty"):
        split_by_date(corpus, date(2014, 4, 1))


def test_split_respects_timezone():
    from zoneinfo import ZoneInfo

    ts = int(datetime(2014, 3, 30, 23, 30, tzinfo=timezone.utc).timestamp())  # 00:30 local in Lisbon (WEST)
    corpus = Corpus([Trajectory("v", [ts, ts + 60], [0, 0], [0, 0])])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        tr, te = split_by_date(corpus, date(2014, 3, 31), ZoneInfo("Europe/Lisbon"))
    assert len(te) == 1


def test_clean_rules():
    mk = lambda dur, n=2: Trajectory("v", np.linspace(1000, 1000 + dur, n).astype(int), np.zeros(n), np.zeros(n))
    kept, rep = clean_trips(Corpus([mk(30), mk(749), mk(7201), mk(100, 1), mk(60), mk(7200)]))
    assert [int(t.t[-1] - t.t[0]) for t in kept] == [749, 60, 7200]
    assert rep.removed == {"min_time": 1, "max_time": 1, "min_points": 1}
    for t in kept:
        assert trip_label(t).travel_time == t.t[-1] - t.t[0]


def test_trajectory_invariants():
    with pytest.raises(ValueError):
        Trajectory("v", [], [], [])
    with pytest.raises(ValueError):
        Trajectory("v", [10, 5], [0, 0], [0, 0])
    with pytest.raises(ValueError):
        Trajectory("v", [10], [181.0], [0])
    with pytest.raises(ValueError):
        Trajectory("v", [0], [1.0], [0])


def test_corpus_file_roundtrip(tmp_path):
    c = Corpus([Trajectory("a", [5, 20], [1.5, 1.25], [2.0, 2.5]), Trajectory("b", [7, 9, 11], [0, 1, 2], [3, 4, 5])], "train", "abcd")
    write_corpus(c, tmp_path / "c.tsv")
    back = read_corpus(tmp_path / "c.tsv")
    assert back.split == "train" and back.config_hash == "abcd"
    assert list(back) == list(c)


def test_generic_csv(tmp_path):
    p = tmp_path / "g.csv"
    p.write_text("trip_id,vehicle_id,timestamp,lon,lat\nA,v1,120,1.0,2.0\nA,v1,100,1.1,2.1\nB,v2,50,0,0\nB,v2,x,0,0\nB,v2,80,0.1,0\n")
    corpus, stats = read_generic_csv(p)
    assert stats == {"parsed": 2, "malformed": 1}
    a = [t for t in corpus if t.vehicle_id == "v1"][0]
    assert a.t.tolist() == [100, 120] and a.lon.tolist() == [1.1, 1.0]
