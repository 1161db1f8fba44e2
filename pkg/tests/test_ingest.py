import gzip

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pingflow.core import ConfigError, Ping, TimeWindow
from pingflow.ingest import (FilterSpec, IngestError, PingSchemaConfig, filter_pings, pings_from_frame, read_pings,
                             validate_frame, validate_ping)
from pingflow.synth import random_pings

from . import oracles


def write_csv(path, text):
    path.write_text(text)
    return str(path)


def test_validate_ping_examples():
    assert validate_ping(("u1", 1000, 10.0, 20.0, 15)) == Ping("u1", 1000, 10.0, 20.0, 15.0)
    assert validate_ping(("u1", 1_500_000_000_000, 1, 1, None)).timestamp_utc == 1_500_000_000
    assert validate_ping(("u1", 1000, 95, 0, None)) == "bad_coordinate"
    assert validate_ping(("u1", "abc", 1, 1, None)) == "bad_timestamp"
    assert validate_ping(("u1", 1000, 0, 0, -5)) == "bad_accuracy"
    assert validate_ping(("", 1000, 0, 0, None)) == "empty_user"


def test_reason_precedence():
    assert validate_ping(("", "abc", 95, 0, -1)) == "empty_user"
    assert validate_ping(("u", "abc", 95, 0, -1)) == "bad_timestamp"
    assert validate_ping(("u", 10, 95, 0, -1)) == "bad_coordinate"


def test_read_single_row(tmp_path, engine):
    path = write_csv(tmp_path / "p.csv", "user_id,timestamp,lat,lon,accuracy\nu1,1000,10.0,20.0,15\n")
    ds, report = read_pings([path], engine=engine)
    df = ds.to_pandas()
    assert len(df) == 1 and df.iloc[0]["user_id"] == "u1" and df.iloc[0]["accuracy"] == 15.0
    assert (report.read, report.emitted, report.rejected) == (1, 1, 0)


def test_read_rejects_and_counts(tmp_path, engine):
    path = write_csv(tmp_path / "p.csv", "user_id,timestamp,lat,lon,accuracy\n"
                                         "u1,1000,95,20,\nu1,1000,10,20,\nu2,2000,11,21,3\n")
    rejects = tmp_path / "rejects.csv"
    ds, report = read_pings([path], engine=engine, rejects_path=str(rejects))
    assert len(ds.to_pandas()) == 2
    assert report.read == report.emitted + report.rejected == 3
    assert report.reasons == {"bad_coordinate": 1}
    assert pd.read_csv(rejects).to_dict("records") == [{"file": path, "line": 2, "reason": "bad_coordinate"}]


def test_read_mapping_headerless_gzip(tmp_path, engine):
    path = tmp_path / "p.csv.gz"
    with gzip.open(path, "wt") as fh:
        fh.write("19.4;-99.1;u1;1672617600000\n19.5;-99.2;u2;1672617601000\n")
    schema = PingSchemaConfig(user_id=2, timestamp=3, lat=0, lon=1, accuracy=None, delimiter=";", has_header=False)
    ds, _ = read_pings([str(path)], schema, engine)
    df = ds.to_pandas()
    assert df["timestamp"].tolist() == [1672617600, 1672617601]
    assert df["accuracy"].isna().all()


def test_read_missing_file_and_column(tmp_path, engine):
    with pytest.raises(FileNotFoundError):
        read_pings([str(tmp_path / "nope.csv")], engine=engine)
    path = write_csv(tmp_path / "p.csv", "uid,timestamp,lat,lon\nu1,1,1,1\n")
    with pytest.raises(IngestError, match="user_id"):
        read_pings([path], engine=engine)


def test_read_mostly_invalid_file_fails(tmp_path, engine):
    path = write_csv(tmp_path / "p.csv", "user_id,timestamp,lat,lon\nu1,1,200,1\nu1,1,200,1\nu1,1,1,1\n")
    with pytest.raises(IngestError, match="column mapping"):
        read_pings([path], engine=engine)


def test_schema_config_errors():
    with pytest.raises(ConfigError):
        PingSchemaConfig(timestamp_unit="minutes")
    with pytest.raises(ConfigError):
        PingSchemaConfig(has_header=False)
    with pytest.raises(ConfigError):
        FilterSpec(bbox=(1, 0, 0, 1))


def test_read_many_chunks_and_files(tmp_path, make_engine):
    df = random_pings(50, 12_000, seed=4)
    df.iloc[:6000].to_csv(tmp_path / "a.csv", index=False)
    df.iloc[6000:].to_csv(tmp_path / "b.csv", index=False)
    eng = make_engine(2, max_partition_rows=1000)
    ds, report = read_pings([str(tmp_path / "a.csv"), str(tmp_path / "b.csv")], engine=eng)
    assert ds.num_partitions == 12 and report.emitted == 12_000
    got = ds.to_pandas()
    assert got["user_id"].tolist() == df["user_id"].tolist()
    np.testing.assert_array_equal(got["timestamp"], df["timestamp"])
    np.testing.assert_allclose(got["lat"], df["lat"], rtol=0, atol=1e-12)


def test_filter_bbox_example(engine):
    df = pd.DataFrame({"user_id": ["a", "b"], "timestamp": [10, 10], "lat": [0.5, 2.0], "lon": [0.5, 2.0]})
    out = filter_pings(pings_from_frame(df, engine), FilterSpec(bbox=(0, 0, 1, 1))).to_pandas()
    assert out["user_id"].tolist() == ["a"]


def test_empty_filter_is_identity(engine):
    ds = pings_from_frame(random_pings(5, 100), engine)
    assert filter_pings(ds, FilterSpec()) is ds


@pytest.mark.parametrize("workers", [1, 8])
def test_filter_matches_row_scan(make_engine, workers):
    df = random_pings(300, 100_000, seed=11)
    users = {f"u{i:04d}" for i in range(0, 300, 3)}
    spec = FilterSpec(bbox=(-99.2, 19.3, -99.0, 19.5), time_window=TimeWindow(1_672_617_600 + 86400 * 3,
                                                                            1_672_617_600 + 86400 * 20),
                      max_accuracy_m=60.0, user_allowlist=users)
    eng = make_engine(workers, max_partition_rows=9000)
    got = filter_pings(pings_from_frame(df, eng), spec).to_pandas()
    expect = oracles.filter_rows(df, spec.bbox, (spec.time_window.start_utc, spec.time_window.end_utc), 60.0, users)
    expect = pd.DataFrame(expect, columns=list(got.columns)).astype(got.dtypes.to_dict())
    pd.testing.assert_frame_equal(got, expect)


raw_values = st.one_of(st.none(), st.just(""), st.just("abc"), st.integers(-10**13, 10**13),
                       st.floats(-200, 200), st.just(float("nan")))


@settings(max_examples=200)
@given(st.lists(st.tuples(st.sampled_from(["", "u1", " u2 "]), raw_values, raw_values, raw_values, raw_values),
                min_size=1, max_size=20))
def test_vectorized_validation_matches_scalar(rows):
    frame = pd.DataFrame(rows, columns=["user_id", "timestamp", "lat", "lon", "accuracy"], dtype=object)
    valid, reasons = validate_frame(frame)
    scalar = [validate_ping(r) for r in rows]
    assert [s for s in scalar if isinstance(s, str)] == reasons.tolist()
    pings = [s for s in scalar if isinstance(s, Ping)]
    assert len(pings) == len(valid)
    for p, (_, row) in zip(pings, valid.iterrows()):
        assert p.user_id == row["user_id"] and p.timestamp_utc == row["timestamp"]


@settings(max_examples=20)
@given(st.floats(-99.3, -99.0), st.floats(19.2, 19.5), st.floats(0.01, 0.3), st.floats(0, 100))
def test_filter_idempotent(make_engine, lon0, lat0, span, acc):
    eng = make_engine(max_partition_rows=400)
    ds = pings_from_frame(random_pings(20, 1500, seed=2), eng)
    spec = FilterSpec(bbox=(lon0, lat0, lon0 + span, lat0 + span), max_accuracy_m=acc)
    once = filter_pings(ds, spec).to_pandas()
    twice = filter_pings(filter_pings(ds, spec), spec).to_pandas()
    pd.testing.assert_frame_equal(once, twice)
