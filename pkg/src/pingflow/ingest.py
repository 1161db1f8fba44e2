"""Reading, validating and filtering raw ping CSV files."""
from __future__ import annotations

import logging
import os
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .core import MS_THRESHOLD, ConfigError, Ping, TimeWindow
from .engine import Engine, Partition, PartitionedDataset, map_partitions, materialized, write_blocks

logger = logging.getLogger(__name__)

PING_COLUMNS = ("user_id", "timestamp", "lat", "lon", "accuracy")
PING_SCHEMA = {
    "user_id": "object",
    "timestamp": "int64",
    "lat": "float64",
    "lon": "float64",
    "accuracy": "float64",
}
REJECT_REASONS = ("bad_coordinate", "bad_timestamp", "empty_user", "bad_accuracy")
MAX_REJECT_ROWS = 1_000_000
MAX_INVALID_FRACTION = 0.5
# 2100-01-01T00:00:00Z
_MAX_TIMESTAMP = 4_102_444_800


class IngestError(RuntimeError):
    pass


@dataclass(frozen=True)
class PingSchemaConfig:
    """Where each ping field lives in the input files.

    With ``has_header=False`` the column entries are 0-based positions.
    ``accuracy`` may be None when the files carry no accuracy column.
    """

    user_id: str | int = "user_id"
    timestamp: str | int = "timestamp"
    lat: str | int = "lat"
    lon: str | int = "lon"
    accuracy: str | int | None = "accuracy"
    timestamp_unit: str = "auto"
    delimiter: str = ","
    has_header: bool = True

    def __post_init__(self):
        if self.timestamp_unit not in ("seconds", "milliseconds", "auto"):
            raise ConfigError(f"timestamp_unit must be seconds, milliseconds or auto, not {self.timestamp_unit!r}")
        if len(self.delimiter) != 1:
            raise ConfigError("delimiter must be a single character")
        for name in ("user_id", "timestamp", "lat", "lon"):
            if getattr(self, name) in (None, ""):
                raise ConfigError(f"required column {name!r} is not mapped")
        if not self.has_header:
            for name in ("user_id", "timestamp", "lat", "lon", "accuracy"):
                value = getattr(self, name)
                if value is not None and not isinstance(value, int):
                    raise ConfigError(f"without a header, column {name!r} must be a position, got {value!r}")

    def mapping(self) -> dict:
        return {f: getattr(self, f) for f in PING_COLUMNS if getattr(self, f) is not None}


HEADERLESS_SCHEMA = dict(user_id=0, timestamp=1, lat=2, lon=3, accuracy=4, has_header=False)


@dataclass(frozen=True)
class FilterSpec:
    bbox: tuple | None = None
    time_window: TimeWindow | None = None
    max_accuracy_m: float | None = None
    user_allowlist: frozenset | None = None

    def __post_init__(self):
        if self.bbox is not None:
            if len(self.bbox) != 4:
                raise ConfigError(f"bbox needs 4 values (min_lon, min_lat, max_lon, max_lat), got {self.bbox!r}")
            min_lon, min_lat, max_lon, max_lat = (float(v) for v in self.bbox)
            if not (min_lon < max_lon and min_lat < max_lat):
                raise ConfigError(f"bbox is not well-ordered: {self.bbox!r}")
            object.__setattr__(self, "bbox", (min_lon, min_lat, max_lon, max_lat))
        if self.max_accuracy_m is not None and self.max_accuracy_m < 0:
            raise ConfigError("max_accuracy_m must be >= 0")
        if self.user_allowlist is not None:
            object.__setattr__(self, "user_allowlist", frozenset(self.user_allowlist))

    @property
    def is_empty(self) -> bool:
        return self.bbox is None and self.time_window is None and self.max_accuracy_m is None \
            and self.user_allowlist is None


@dataclass
class IngestReport:
    read: int = 0
    emitted: int = 0
    rejected: int = 0
    reasons: Counter = field(default_factory=Counter)
    per_file: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# validation

def validate_ping(raw, timestamp_unit: str = "auto") -> Ping | str:
    """Validate one raw row (mapping with the PING_COLUMNS keys, or a 4/5-sequence).

    Returns a `Ping` or one of REJECT_REASONS.
    """
    if not isinstance(raw, dict):
        raw = dict(zip(PING_COLUMNS, raw))
    frame = pd.DataFrame({c: [raw.get(c)] for c in PING_COLUMNS})
    valid, reasons = validate_frame(frame, timestamp_unit)
    if len(valid):
        row = valid.iloc[0]
        acc = None if np.isnan(row["accuracy"]) else float(row["accuracy"])
        return Ping(row["user_id"], int(row["timestamp"]), float(row["lat"]), float(row["lon"]), acc)
    return reasons.iloc[0]


def _numeric(col: pd.Series) -> pd.Series:
    return pd.to_numeric(col, errors="coerce").astype("float64")


def _as_text(col: pd.Series) -> pd.Series:
    return col.astype(object).where(col.notna(), "").astype(str).str.strip()


def validate_frame(df: pd.DataFrame, timestamp_unit: str = "auto") -> tuple[pd.DataFrame, pd.Series]:
    """Vectorized validation of raw rows.

    Returns the valid rows converted to the ping schema and a Series of
    rejection reasons indexed like the rejected input rows. The first failing
    check wins, in the order empty_user, bad_timestamp, bad_coordinate,
    bad_accuracy.
    """
    n = len(df)
    users = _as_text(df["user_id"])
    ts = _numeric(df["timestamp"])
    lat = _numeric(df["lat"])
    lon = _numeric(df["lon"])
    if "accuracy" in df:
        blank = (_as_text(df["accuracy"]) == "")
        acc = _numeric(df["accuracy"])
    else:
        blank = pd.Series(True, index=df.index)
        acc = pd.Series(np.nan, index=df.index)

    finite_ts = np.isfinite(ts.to_numpy())
    ts_vals = ts.to_numpy(copy=True)
    if timestamp_unit == "milliseconds":
        ts_vals = ts_vals / 1000
    elif timestamp_unit == "auto":
        ts_vals = np.where(np.abs(ts_vals) > MS_THRESHOLD, ts_vals / 1000, ts_vals)
    with np.errstate(invalid="ignore"):
        ts_ok = finite_ts & (ts_vals >= 0) & (ts_vals < _MAX_TIMESTAMP)
        lat_v, lon_v = lat.to_numpy(), lon.to_numpy()
        coord_ok = (lat_v >= -90) & (lat_v <= 90) & (lon_v >= -180) & (lon_v <= 180)
        acc_v = acc.to_numpy()
        acc_ok = blank.to_numpy() | (np.isfinite(acc_v) & (acc_v >= 0))

    user_ok = (users != "").to_numpy()
    reason = np.full(n, "", dtype=object)
    reason[~acc_ok] = "bad_accuracy"
    reason[~coord_ok] = "bad_coordinate"
    reason[~ts_ok] = "bad_timestamp"
    reason[~user_ok] = "empty_user"
    ok = reason == ""

    valid = pd.DataFrame({
        "user_id": users.to_numpy()[ok].astype(object),
        "timestamp": np.floor(ts_vals[ok]).astype(np.int64),
        "lat": lat_v[ok].astype(np.float64),
        "lon": lon_v[ok].astype(np.float64),
        "accuracy": np.where(blank.to_numpy()[ok], np.nan, acc_v[ok]).astype(np.float64),
    })
    return valid, pd.Series(reason[~ok], index=df.index[~ok], dtype=object)


# --------------------------------------------------------------------------
# reading

def _read_file_task(path, file_index, schema: PingSchemaConfig, chunk_rows, out_dir, reject_cap):
    mapping = schema.mapping()
    header = 0 if schema.has_header else None
    try:
        reader = pd.read_csv(
            path, sep=schema.delimiter, header=header, dtype=str, keep_default_na=False,
            chunksize=chunk_rows, compression="gzip" if str(path).endswith(".gz") else None,
        )
    except pd.errors.EmptyDataError:
        return [], 0, Counter(), []
    parts, reasons, rejects = [], Counter(), []
    total = 0
    first_data_line = 2 if schema.has_header else 1
    with reader:
        for c, chunk in enumerate(reader):
            if mapping.get("accuracy") is not None and mapping["accuracy"] not in chunk.columns:
                # accuracy is optional: a file without the column has none
                mapping = {f: col for f, col in mapping.items() if f != "accuracy"}
            missing = [v for v in mapping.values() if v not in chunk.columns]
            if missing:
                raise IngestError(f"{path}: mapped column(s) {missing} not found; columns are {list(chunk.columns)}")
            with materialized(len(chunk)):
                raw = pd.DataFrame({f: chunk[col] for f, col in mapping.items()})
                valid, bad = validate_frame(raw, schema.timestamp_unit)
                if len(valid):
                    out = os.path.join(out_dir, f"file{file_index:04d}-chunk{c:05d}.bin")
                    write_blocks(out, [valid])
                    parts.append((out, len(valid), int(valid.memory_usage(index=False).sum())))
                reasons.update(bad.tolist())
                room = reject_cap - len(rejects)
                if room > 0:
                    lines = bad.index.to_numpy()[:room] + first_data_line
                    rejects.extend(zip(lines.tolist(), bad.tolist()[:room]))
            total += len(chunk)
    return parts, total, reasons, rejects


def read_pings(paths, schema: PingSchemaConfig | None = None, engine: Engine | None = None,
               rejects_path: str | None = None) -> tuple[PartitionedDataset, IngestReport]:
    """Read CSV (optionally .gz) ping files into a dataset of valid pings.

    Each input file is read by one worker in chunks of ``max_partition_rows``;
    every chunk becomes a partition. Invalid rows are counted per reason and,
    if `rejects_path` is given, written there as ``file,line,reason``.
    """
    schema = schema or PingSchemaConfig()
    engine = engine or Engine()
    paths = [str(p) for p in paths]
    for p in paths:
        if not os.path.isfile(p):
            raise FileNotFoundError(f"input file not found: {p}")
    out_dir = engine.new_stage_dir("ingest")
    results = engine.run(
        _read_file_task,
        [(p, i, schema, engine.max_partition_rows, out_dir, MAX_REJECT_ROWS) for i, p in enumerate(paths)],
    )
    report = IngestReport()
    partitions, reject_rows = [], []
    for path, (parts, total, reasons, rejects) in zip(paths, results):
        rejected = sum(reasons.values())
        report.read += total
        report.rejected += rejected
        report.emitted += total - rejected
        report.reasons.update(reasons)
        report.per_file[path] = {"read": total, "rejected": rejected}
        if total and rejected / total > MAX_INVALID_FRACTION:
            raise IngestError(
                f"{path}: {rejected} of {total} rows invalid ({dict(reasons)}); check the column mapping"
            )
        for out, rows, nbytes in parts:
            partitions.append(Partition(len(partitions), out, rows, nbytes))
        room = MAX_REJECT_ROWS - len(reject_rows)
        reject_rows.extend((path, line, reason) for line, reason in rejects[:max(room, 0)])
    if report.rejected:
        logger.info("rejected %d of %d rows: %s", report.rejected, report.read, dict(report.reasons))
    if rejects_path is not None:
        pd.DataFrame(reject_rows, columns=["file", "line", "reason"]).to_csv(rejects_path, index=False)
    return PartitionedDataset(engine, partitions, dict(PING_SCHEMA)), report


def pings_from_frame(df: pd.DataFrame, engine: Engine, partition_rows: int | None = None) -> PartitionedDataset:
    """Dataset from an in-memory frame already in the ping schema (accuracy optional)."""
    df = df.copy()
    if "accuracy" not in df:
        df["accuracy"] = np.nan
    df = df[list(PING_COLUMNS)].astype(PING_SCHEMA)
    return engine.from_pandas(df, partition_rows=partition_rows)


# --------------------------------------------------------------------------
# filtering

def filter_mask(df: pd.DataFrame, spec: FilterSpec) -> np.ndarray:
    keep = np.ones(len(df), dtype=bool)
    if spec.bbox is not None:
        min_lon, min_lat, max_lon, max_lat = spec.bbox
        lon, lat = df["lon"].to_numpy(), df["lat"].to_numpy()
        keep &= (lon >= min_lon) & (lon <= max_lon) & (lat >= min_lat) & (lat <= max_lat)
    if spec.time_window is not None:
        keep &= spec.time_window.contains(df["timestamp"].to_numpy())
    if spec.max_accuracy_m is not None:
        acc = df["accuracy"].to_numpy()
        keep &= np.isnan(acc) | (acc <= spec.max_accuracy_m)
    if spec.user_allowlist is not None:
        keep &= df["user_id"].isin(spec.user_allowlist).to_numpy()
    return keep


def filter_pings(ds: PartitionedDataset, spec: FilterSpec) -> PartitionedDataset:
    """Keep pings meeting every criterion present in `spec`; order within partitions is kept."""
    if spec.is_empty:
        return ds

    def apply(df):
        return df[filter_mask(df, spec)].reset_index(drop=True)

    return map_partitions(ds, apply, schema=dict(ds.record_schema))
