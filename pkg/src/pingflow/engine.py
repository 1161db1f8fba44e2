"""Partitioned, out-of-core batch execution.

Data lives on disk as partitions: spill files holding a sequence of
length-prefixed pickled DataFrame blocks. A worker materializes one partition
at a time, so memory stays bounded by ``worker_count * max_partition_rows``
regardless of dataset size.

Three operations cover the analytics in this package:

* `map_partitions` is lazy; it appends a transform to every partition.
* `shuffle_by_key` is a barrier; it hash-partitions rows so equal keys share a
  partition.
* `reduce_by_key` folds per partition, shuffles the partials and merges them.

Results never depend on ``worker_count``: partitions are processed in a fixed
order, shuffle fragments are concatenated in source order and reduced tables
are sorted by key.
"""
from __future__ import annotations

import graphlib
import itertools
import logging
import multiprocessing
import os
import pickle
import shutil
import struct
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Iterator, Sequence

import cloudpickle
import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

DEFAULT_MAX_PARTITION_ROWS = 1_000_000
DEFAULT_MAX_PARTITION_BYTES = 512 * 2**20

_LEN = struct.Struct("<Q")
# pandas' default siphash key; fixed so partition assignment is reproducible.
_HASH_KEY = "0123456789123456"
DISTINCT_BUCKETS = 16


class EngineError(RuntimeError):
    pass


class SchemaError(EngineError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class PlanError(EngineError):
    pass


class PartitionTooLarge(EngineError):
    def __init__(self, partition_id, nbytes, limit):
        super().__init__(f"partition {partition_id} holds {nbytes} bytes (limit {limit})")
        self.partition_id = partition_id


class PartitionFailure(EngineError):
    """A user function raised while processing a partition."""

    def __init__(self, partition_id, row_index, cause):
        where = f"partition {partition_id}" + (f", row {row_index}" if row_index is not None else "")
        super().__init__(f"{where}: {type(cause).__name__}: {cause}")
        self.partition_id = partition_id
        self.row_index = row_index
        self.cause = cause


class RowFailure(Exception):
    def __init__(self, row_index, cause):
        super().__init__(str(cause))
        self.row_index = row_index
        self.cause = cause


# --------------------------------------------------------------------------
# spill files

def write_blocks(path, frames: Iterable[pd.DataFrame], append=False) -> None:
    with open(path, "ab" if append else "wb") as fh:
        for frame in frames:
            payload = pickle.dumps(frame, protocol=pickle.HIGHEST_PROTOCOL)
            fh.write(_LEN.pack(len(payload)))
            fh.write(payload)


def read_blocks(path) -> Iterator[pd.DataFrame]:
    with open(path, "rb") as fh:
        while True:
            head = fh.read(_LEN.size)
            if not head:
                return
            (size,) = _LEN.unpack(head)
            yield pickle.loads(fh.read(size))


# --------------------------------------------------------------------------
# materialization accounting

_intervals: list[tuple[int, int, int]] = []


@contextmanager
def materialized(rows: int):
    """Record that `rows` rows are held in memory for the duration of the block."""
    start = time.monotonic_ns()
    try:
        yield
    finally:
        _intervals.append((start, time.monotonic_ns(), rows))


def _drain_intervals():
    out = list(_intervals)
    _intervals.clear()
    return out


def peak_concurrent_rows(intervals: Sequence[tuple[int, int, int]]) -> int:
    """Maximum over time of the summed rows of overlapping intervals."""
    events = []
    for start, end, rows in intervals:
        events.append((start, 1, rows))
        events.append((end, 0, rows))
    # ends sort before starts at equal instants
    events.sort()
    peak = level = 0
    for _, is_start, rows in events:
        level += rows if is_start else -rows
        peak = max(peak, level)
    return peak


def _invoke(payload: bytes):
    fn, args = cloudpickle.loads(payload)
    _drain_intervals()
    try:
        result = fn(*args)
    except BaseException as exc:
        _drain_intervals()
        return "error", exc, []
    return "ok", result, _drain_intervals()


# --------------------------------------------------------------------------
# datasets

@dataclass(frozen=True)
class Partition:
    id: int
    path: str
    rows: int
    bytes_estimate: int
    transforms: tuple = ()


@dataclass
class Engine:
    """Worker pool, spill directory and memory accounting shared by datasets."""

    worker_count: int = 1
    max_partition_rows: int = DEFAULT_MAX_PARTITION_ROWS
    max_partition_bytes: int = DEFAULT_MAX_PARTITION_BYTES
    work_dir: str | None = None
    intervals: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.worker_count < 1:
            raise ValueError("worker_count must be >= 1")
        if self.max_partition_rows < 1:
            raise ValueError("max_partition_rows must be >= 1")
        base = self.work_dir or os.environ.get("TOOL_WORK_DIR") or None
        if base:
            os.makedirs(base, exist_ok=True)
        self._root = tempfile.mkdtemp(prefix="pingflow-", dir=base)
        self._stage_ids = itertools.count()
        self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self):
        if self._pool is not None:
            self._pool.shutdown(cancel_futures=True)
            self._pool = None
        shutil.rmtree(self._root, ignore_errors=True)

    @property
    def peak_rows(self) -> int:
        return peak_concurrent_rows(self.intervals)

    def new_stage_dir(self, label: str) -> str:
        path = os.path.join(self._root, f"{next(self._stage_ids):04d}-{label}")
        os.makedirs(path)
        return path

    def run(self, fn: Callable, arglists: Sequence[tuple]) -> list:
        """Run ``fn(*args)`` for every entry; results in input order.

        At most ``worker_count`` calls execute at once. The first failure
        cancels pending calls and is re-raised.
        """
        if self.worker_count == 1 or len(arglists) <= 1:
            outcomes = []
            for args in arglists:
                outcomes.append(_invoke(cloudpickle.dumps((fn, args))))
                if outcomes[-1][0] == "error":
                    break
            return self._unpack(outcomes)
        if self._pool is None:
            self._pool = ProcessPoolExecutor(
                self.worker_count, mp_context=multiprocessing.get_context("fork")
            )
        futures = [self._pool.submit(_invoke, cloudpickle.dumps((fn, args))) for args in arglists]
        outcomes = []
        for fut in futures:
            outcome = fut.result()
            outcomes.append(outcome)
            if outcome[0] == "error":
                for pending in futures:
                    pending.cancel()
                break
        return self._unpack(outcomes)

    def _unpack(self, outcomes):
        results = []
        for status, value, intervals in outcomes:
            self.intervals.extend(intervals)
            if status == "error":
                raise value
            results.append(value)
        return results

    # sources -------------------------------------------------------------

    def from_pandas(self, df: pd.DataFrame, partition_rows: int | None = None) -> PartitionedDataset:
        step = min(partition_rows or self.max_partition_rows, self.max_partition_rows)
        stage = self.new_stage_dir("source")
        parts = []
        for i, start in enumerate(range(0, len(df), step)):
            chunk = df.iloc[start:start + step].reset_index(drop=True)
            path = os.path.join(stage, f"part-{i:05d}.bin")
            write_blocks(path, [chunk])
            parts.append(Partition(i, path, len(chunk), _nbytes(chunk)))
        return PartitionedDataset(self, parts, schema_of(df))

    def from_frames(self, frames: Iterable[pd.DataFrame], schema: dict | None = None) -> PartitionedDataset:
        """One partition per frame; frames larger than the row limit are chunked."""
        stage = self.new_stage_dir("source")
        parts = []
        for frame in frames:
            if schema is None:
                schema = schema_of(frame)
            for start in range(0, max(len(frame), 1), self.max_partition_rows):
                chunk = frame.iloc[start:start + self.max_partition_rows].reset_index(drop=True)
                if chunk.empty:
                    continue
                path = os.path.join(stage, f"part-{len(parts):05d}.bin")
                write_blocks(path, [chunk])
                parts.append(Partition(len(parts), path, len(chunk), _nbytes(chunk)))
        return PartitionedDataset(self, parts, schema or {})


def schema_of(df: pd.DataFrame) -> dict:
    return {str(c): str(t) for c, t in df.dtypes.items()}


def empty_frame(schema: dict) -> pd.DataFrame:
    return pd.DataFrame({c: pd.Series(dtype=t) for c, t in schema.items()})


def _nbytes(df: pd.DataFrame) -> int:
    return int(df.memory_usage(index=False, deep=False).sum())


@dataclass(frozen=True)
class PartitionedDataset:
    """Ordered partitions plus their pending transforms.

    ``record_schema`` describes records as consumers see them (after
    transforms); ``block_schema`` describes what is stored on disk.
    """

    engine: Engine
    partitions: tuple
    record_schema: dict
    partitioner_key: str | tuple | None = None
    block_schema: dict | None = None

    def __post_init__(self):
        object.__setattr__(self, "partitions", tuple(self.partitions))
        if self.block_schema is None:
            object.__setattr__(self, "block_schema", dict(self.record_schema))

    @property
    def num_partitions(self) -> int:
        return len(self.partitions)

    @property
    def num_rows(self) -> int:
        """Stored row count (before pending transforms)."""
        return sum(p.rows for p in self.partitions)

    def with_engine(self, engine: Engine) -> PartitionedDataset:
        return replace(self, engine=engine)

    def materialize(self, partition: Partition) -> pd.DataFrame:
        """Load one partition and apply its pending transforms."""
        return _materialize(partition, self.block_schema, self.engine.max_partition_bytes)

    def iter_frames(self) -> Iterator[pd.DataFrame]:
        for part in self.partitions:
            yield self.materialize(part)

    def to_pandas(self) -> pd.DataFrame:
        """Collect every partition, in order, into one frame."""
        _, frames = _run_partitions(
            self, _load_partition, lambda p: (p, self.block_schema, self.engine.max_partition_bytes)
        )
        frames = [f for f in frames if len(f)]
        if not frames:
            return empty_frame(self.record_schema)
        return pd.concat(frames, ignore_index=True)


def _load_partition(partition, schema, max_bytes):
    return _materialize(partition, schema, max_bytes)


def _materialize(partition: Partition, schema: dict, max_bytes: int) -> pd.DataFrame:
    blocks = list(read_blocks(partition.path))
    if not blocks:
        df = empty_frame(schema)
    elif len(blocks) == 1:
        df = blocks[0]
    else:
        df = pd.concat(blocks, ignore_index=True)
    nbytes = _nbytes(df)
    if nbytes > max_bytes:
        raise PartitionTooLarge(partition.id, nbytes, max_bytes)
    with materialized(len(df)):
        return _apply_transforms(df, partition)


def _apply_transforms(df: pd.DataFrame, partition: Partition) -> pd.DataFrame:
    for fn in partition.transforms:
        try:
            df = fn(df)
        except RowFailure as exc:
            raise PartitionFailure(partition.id, exc.row_index, exc.cause) from exc.cause
        except (PartitionFailure, PartitionTooLarge):
            raise
        except Exception as exc:
            raise PartitionFailure(partition.id, None, exc) from exc
    return df


# --------------------------------------------------------------------------
# operations

def map_partitions(ds: PartitionedDataset, fn: Callable[[pd.DataFrame], pd.DataFrame],
                   schema: dict | None = None) -> PartitionedDataset:
    """Lazily apply `fn` to every partition.

    `fn` must be pure and should accept an empty frame (used to infer the
    output schema unless `schema` is given). The partitioner key is kept,
    so `fn` must not move rows between keys.
    """
    if schema is None:
        try:
            schema = schema_of(fn(empty_frame(ds.record_schema)))
        except Exception:
            schema = dict(ds.record_schema)
    parts = [replace(p, transforms=p.transforms + (fn,)) for p in ds.partitions]
    return replace(ds, partitions=parts, record_schema=schema)


def map_rows(ds: PartitionedDataset, fn: Callable[[Any], dict]) -> PartitionedDataset:
    """Apply `fn` to each row (a namedtuple) and build records from the returned dicts.

    A failing row is reported with its partition id and row index.
    """

    def per_partition(df):
        out = []
        for i, row in enumerate(df.itertuples(index=False)):
            try:
                out.append(fn(row))
            except Exception as exc:
                raise RowFailure(i, exc) from exc
        return pd.DataFrame(out) if out else df.iloc[:0]

    return map_partitions(ds, per_partition, schema=dict(ds.record_schema))


def _key_list(key) -> list[str]:
    return [key] if isinstance(key, str) else list(key)


def hash_rows(df: pd.DataFrame, key, hash_key=_HASH_KEY) -> np.ndarray:
    """Stable 64-bit hash of the key columns' canonical encoding."""
    cols = _key_list(key)
    if len(cols) == 1:
        return pd.util.hash_pandas_object(df[cols[0]], index=False, hash_key=hash_key).to_numpy()
    return pd.util.hash_pandas_object(df[cols], index=False, hash_key=hash_key).to_numpy()


def _check_key(ds, key):
    schema = ds.record_schema
    missing = [k for k in _key_list(key) if k not in schema]
    if missing:
        raise SchemaError(f"unknown key field(s) {missing}; schema has {sorted(schema)}")


def _shuffle_task(partition, schema, max_bytes, key, n, out_dir):
    df = _materialize(partition, schema, max_bytes)
    counts = [0] * n
    if df.empty:
        return counts, _nbytes(df)
    with materialized(len(df)):
        targets = hash_rows(df, key) % np.uint64(n)
        order = np.argsort(targets, kind="stable")
        sorted_targets = targets[order]
        bounds = np.searchsorted(sorted_targets, np.arange(n + 1, dtype=np.uint64))
        for t in range(n):
            lo, hi = bounds[t], bounds[t + 1]
            if hi > lo:
                chunk = df.iloc[order[lo:hi]].reset_index(drop=True)
                write_blocks(os.path.join(out_dir, f"frag-{partition.id:05d}-{t:05d}.bin"), [chunk])
                counts[t] = int(hi - lo)
    return counts, _nbytes(df) // max(len(df), 1)


def _split_task(path, key, max_rows):
    """Re-partition an oversized shuffle output without breaking key co-location.

    Keys are packed first-fit-decreasing into bins of at most `max_rows`; a
    single key above the limit cannot be split and raises. Returns a list of
    (path, rows).
    """
    cols = _key_list(key)
    sizes = None
    for block in read_blocks(path):
        with materialized(len(block)):
            counts = block.groupby(cols, sort=False).size()
        sizes = counts if sizes is None else sizes.add(counts, fill_value=0)
    sizes = sizes.astype(np.int64).reset_index(name="_n")
    hot = sizes[sizes["_n"] > max_rows]
    if len(hot):
        raise EngineError(
            f"key {tuple(hot.iloc[0][cols])} holds {int(hot.iloc[0]['_n'])} rows, "
            f"above max_partition_rows={max_rows}"
        )
    sizes = sizes.sort_values(["_n"] + cols, ascending=[False] + [True] * len(cols), kind="stable")
    loads, bins = [], []
    for n in sizes["_n"].to_numpy():
        for b, load in enumerate(loads):
            if load + n <= max_rows:
                loads[b] += n
                bins.append(b)
                break
        else:
            loads.append(n)
            bins.append(len(loads) - 1)
    sizes["_bin"] = bins
    assignment = sizes.drop(columns="_n")
    out_paths = [f"{path}.{b}" for b in range(len(loads))]
    for block in read_blocks(path):
        with materialized(len(block)):
            tagged = block.merge(assignment, on=cols, how="left", sort=False)
            for b, chunk in tagged.groupby("_bin", sort=True):
                write_blocks(out_paths[b], [chunk.drop(columns="_bin").reset_index(drop=True)], append=True)
    return list(zip(out_paths, (int(x) for x in loads)))


def shuffle_by_key(ds: PartitionedDataset, key, target_partitions: int | None = None) -> PartitionedDataset:
    """Hash-partition rows so all rows sharing a key value land in one partition.

    A target partition that ends up above ``max_partition_rows`` is split once
    more, packing whole keys into bins; a single key with more rows than the
    limit raises `EngineError`.
    """
    _check_key(ds, key)
    engine = ds.engine
    total = sum(p.rows for p in ds.partitions)
    if target_partitions is None:
        target_partitions = max(len(ds.partitions), -(-2 * total // engine.max_partition_rows), 1)
    if target_partitions < 1:
        raise ValueError("target_partitions must be >= 1")
    stage = engine.new_stage_dir("shuffle")
    used, results = _run_partitions(
        ds, _shuffle_task, lambda p: (p, ds.block_schema, engine.max_partition_bytes, key, target_partitions, stage)
    )
    totals = np.zeros(target_partitions, dtype=np.int64)
    row_bytes = 0
    for counts, per_row in results:
        totals += np.asarray(counts, dtype=np.int64)
        row_bytes = max(row_bytes, per_row)

    parts = []
    sources = [p.id for p in used]
    for t in range(target_partitions):
        if totals[t] == 0:
            continue
        path = os.path.join(stage, f"part-{t:05d}.bin")
        with open(path, "wb") as out:
            for src in sources:
                frag = os.path.join(stage, f"frag-{src:05d}-{t:05d}.bin")
                if os.path.exists(frag):
                    with open(frag, "rb") as fh:
                        shutil.copyfileobj(fh, out)
                    os.remove(frag)
        parts.append((path, int(totals[t])))

    oversized = [(i, path) for i, (path, rows) in enumerate(parts) if rows > engine.max_partition_rows]
    if oversized:
        pieces = engine.run(_split_task, [(path, key, engine.max_partition_rows) for _, path in oversized])
        replaced = {}
        for (i, path), split in zip(oversized, pieces):
            os.remove(path)
            replaced[i] = split
        parts = [q for i, pr in enumerate(parts) for q in replaced.get(i, [pr])]

    out = [Partition(i, path, rows, rows * row_bytes) for i, (path, rows) in enumerate(parts)]
    return PartitionedDataset(engine, out, dict(ds.record_schema), partitioner_key=key)


def _run_partitions(ds: PartitionedDataset, task, args_for) -> list:
    """Run `task` per partition; an oversized partition is split in two and retried once."""
    try:
        return ds.partitions, ds.engine.run(task, [args_for(p) for p in ds.partitions])
    except PartitionTooLarge as exc:
        logger.warning("%s; splitting and retrying", exc)
        bad = next(p for p in ds.partitions if p.id == exc.partition_id)
        halves = _split_rows(ds.engine, bad)
        parts = []
        for p in ds.partitions:
            parts.extend(halves if p.id == bad.id else [p])
        # renumber after the split partition so fragment names stay unique
        base = max(p.id for p in ds.partitions) + 1
        parts = [p if p in ds.partitions else replace(p, id=base + k) for k, p in enumerate(parts)]
        retry = replace(ds, partitions=parts)
        try:
            return retry.partitions, retry.engine.run(task, [args_for(p) for p in retry.partitions])
        except PartitionTooLarge as again:
            raise EngineError(f"partition still too large after split: {again}") from again


def _split_rows(engine, partition):
    stage = engine.new_stage_dir("split")
    paths = (os.path.join(stage, "a.bin"), os.path.join(stage, "b.bin"))
    counts = [0, 0]
    for block in read_blocks(partition.path):
        half = len(block) // 2
        for s, chunk in enumerate((block.iloc[:half], block.iloc[half:])):
            if len(chunk):
                write_blocks(paths[s], [chunk.reset_index(drop=True)], append=True)
                counts[s] += len(chunk)
    return [Partition(partition.id, path, c, partition.bytes_estimate * c // max(partition.rows, 1),
                      partition.transforms) for path, c in zip(paths, counts) if c]


@dataclass(frozen=True)
class Aggregator:
    """Two-phase fold.

    ``partial`` reduces one partition to partial aggregates (a frame that still
    carries the key columns); ``merge`` combines a concatenation of partials
    and must satisfy ``merge(concat(merge(a), merge(b))) == merge(concat(a, b))``;
    ``finalize`` turns merged partials into one row per key.
    """

    partial: Callable[[pd.DataFrame], pd.DataFrame]
    merge: Callable[[pd.DataFrame], pd.DataFrame]
    finalize: Callable[[pd.DataFrame], pd.DataFrame] | None = None


def count_rows(name="count") -> Callable[[Any], Aggregator]:
    def build(key):
        cols = _key_list(key)

        def partial(df):
            return df.groupby(cols, sort=False).size().rename(name).reset_index()

        def merge(df):
            return df.groupby(cols, sort=False)[name].sum().reset_index()

        return Aggregator(partial, merge)

    return build


def sum_column(column: str, name: str | None = None) -> Callable[[Any], Aggregator]:
    name = name or column

    def build(key):
        cols = _key_list(key)

        def partial(df):
            return df.groupby(cols, sort=False)[column].sum().rename(name).reset_index()

        def merge(df):
            return df.groupby(cols, sort=False)[name].sum().reset_index()

        return Aggregator(partial, merge)

    return build


def reduce_by_key(ds: PartitionedDataset, key, fold: Aggregator | Callable[[Any], Aggregator]) -> pd.DataFrame:
    """Aggregate per distinct key; returns a table sorted by key.

    `fold` is an `Aggregator` or a factory taking the key (like `count_rows()`).
    The result does not depend on partitioning or worker count provided the
    fold is associative and commutative.
    """
    _check_key(ds, key)
    agg = fold if isinstance(fold, Aggregator) else fold(key)
    partials = map_partitions(ds, agg.partial)

    def merge_all(df):
        df = agg.merge(df)
        return agg.finalize(df) if agg.finalize else df

    if ds.partitioner_key is not None and _key_list(ds.partitioner_key) == _key_list(key):
        merged = map_partitions(partials, merge_all)
    else:
        merged = map_partitions(shuffle_by_key(partials, key), merge_all)
    table = merged.to_pandas()
    cols = _key_list(key)
    table = table.sort_values(cols, kind="stable").reset_index(drop=True)
    if table.duplicated(cols).any():
        raise EngineError("fold produced more than one row for some key")
    return table


def count_distinct(ds: PartitionedDataset, key, column: str, name: str = "count",
                   buckets: int = DISTINCT_BUCKETS) -> pd.DataFrame:
    """Number of distinct `column` values per key; returns a table sorted by key.

    Values are salted into `buckets` hash buckets before reducing, so one
    key's distinct values are spread over `buckets` reduce keys rather than
    all held together (a busy tile seen by every user stays under the
    partition limit). Buckets are disjoint, so per-bucket counts add up.
    """
    cols = _key_list(key)
    _check_key(ds, cols + [column])
    if buckets < 1:
        raise ValueError("buckets must be >= 1")
    schema = {c: ds.record_schema[c] for c in cols + [column]}
    schema["_bucket"] = "int64"

    def salt(df):
        out = df[cols + [column]].drop_duplicates()
        return out.assign(_bucket=(hash_rows(out, column) % np.uint64(buckets)).astype(np.int64))

    salted_keys = cols + ["_bucket"]

    def dedupe(df):
        return df.drop_duplicates()

    def finalize(df):
        return df.groupby(salted_keys, sort=False).size().rename(name).reset_index()

    table = reduce_by_key(map_partitions(ds, salt, schema=schema), salted_keys, Aggregator(dedupe, dedupe, finalize))
    if table.empty:
        return pd.DataFrame({**{c: pd.Series(dtype=schema[c]) for c in cols}, name: pd.Series(dtype="int64")})
    return table.groupby(cols, sort=True)[name].sum().astype(np.int64).reset_index()


# --------------------------------------------------------------------------
# plans

STAGE_KINDS = ("source", "map", "shuffle", "reduce")


@dataclass(frozen=True)
class Stage:
    name: str
    kind: str
    inputs: tuple = ()
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in STAGE_KINDS:
            raise PlanError(f"unknown stage kind {self.kind!r}")


@dataclass
class ExecutionPlan:
    stages: list
    worker_count: int = 1

    def validate(self) -> list[str]:
        """Return stage names in execution order; raise PlanError if not a DAG."""
        if self.worker_count < 1:
            raise PlanError("worker_count must be >= 1")
        names = [s.name for s in self.stages]
        if len(set(names)) != len(names):
            raise PlanError("duplicate stage names")
        graph = {}
        for s in self.stages:
            unknown = [i for i in s.inputs if i not in names]
            if unknown:
                raise PlanError(f"stage {s.name!r} reads unknown input(s) {unknown}")
            if s.kind == "source" and s.inputs:
                raise PlanError(f"source stage {s.name!r} cannot have inputs")
            if s.kind != "source" and len(s.inputs) != 1:
                raise PlanError(f"stage {s.name!r} needs exactly one input")
            graph[s.name] = set(s.inputs)
        try:
            order = list(graph.keys())
            return list(graphlib.TopologicalSorter({n: graph[n] for n in order}).static_order())
        except graphlib.CycleError as exc:
            raise PlanError(f"plan has a cycle: {exc.args[1]}") from exc


def execute(plan: ExecutionPlan, worker_count: int | None = None, engine: Engine | None = None,
            **engine_options) -> dict:
    """Run every stage of `plan`; returns {stage name: output}.

    Source stages take ``params={"dataset": ds}`` or ``{"frame": df}``; map
    stages ``{"fn": f}``; shuffle stages ``{"key": k, "target_partitions": n}``;
    reduce stages ``{"key": k, "fold": agg}``. Map outputs are returned as
    collected DataFrames only if they are terminal.
    """
    order = plan.validate()
    workers = worker_count or plan.worker_count
    if workers < 1:
        raise PlanError("worker_count must be >= 1")
    own = engine is None
    engine = engine or Engine(worker_count=workers, **engine_options)
    by_name = {s.name: s for s in plan.stages}
    consumed = {i for s in plan.stages for i in s.inputs}
    outputs = {}
    try:
        for name in order:
            s = by_name[name]
            src = outputs[s.inputs[0]] if s.inputs else None
            if s.kind == "source":
                if "dataset" in s.params:
                    outputs[name] = s.params["dataset"].with_engine(engine)
                else:
                    outputs[name] = engine.from_pandas(s.params["frame"])
            elif s.kind == "map":
                outputs[name] = map_partitions(src, s.params["fn"])
            elif s.kind == "shuffle":
                outputs[name] = shuffle_by_key(src, s.params["key"], s.params.get("target_partitions"))
            else:
                outputs[name] = reduce_by_key(src, s.params["key"], s.params["fold"])
        result = {}
        for name, out in outputs.items():
            if name in consumed:
                continue
            result[name] = out.to_pandas() if isinstance(out, PartitionedDataset) else out
        return result
    finally:
        if own:
            engine.close()
