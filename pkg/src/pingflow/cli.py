"""Command-line entry point.

    pingflow <subcommand> --config run.toml [--section.key value ...] [--workers N] [--out DIR]

Subcommands: stats, homework, od, landuse, displacement, anomalies, poi, grid.
Every run writes its tables as CSV (dates as ISO local dates), optional SVG
charts and GeoJSON, and a ``manifest.toml`` describing the run. Published
aggregate rows supported by fewer than ``thresholds.k_anonymity`` users are
withheld.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
Weekdays are numbered from Monday = 0; hours are local hours 0-23.
"""
from __future__ import annotations

import copy
import datetime as dt
import hashlib
import json
import logging
import os
import sys
import time
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field

import pandas as pd
import tomli
import tomli_w

from . import __version__
from .charts import emit_chart
from .core import (DEFAULT_HOME_HOURS, DEFAULT_WORK_DAYS, DEFAULT_WORK_HOURS, ConfigError, DaySchedule,
                   LocalClock, TimeWindow, day_to_date)
from .displacement import (DEFAULT_K_ANONYMITY, DEFAULT_THRESHOLD_M, EventConfig, GroupingSpec,
                           displacement_rates, displacement_series, group_users, tile_population_anomalies)
from .engine import DEFAULT_MAX_PARTITION_ROWS, Engine, map_partitions
from .homework import MeanShiftParams, infer_home_work, od_matrix
from .ingest import FilterSpec, PingSchemaConfig, filter_pings, read_pings
from .landuse import cluster_signatures, hierarchical_cluster, normalize_profiles, \
    tile_activity_profiles
from .poi import DEFAULT_RADIUS_M, daily_visits, load_pois, visit_rate_change
from .spatial import Tessellation, load_tessellation, make_grid
from .stats import UserFilterCriteria, filter_users, user_stats

logger = logging.getLogger("pingflow")

SUBCOMMANDS = ("stats", "homework", "od", "landuse", "displacement", "anomalies", "poi", "grid")
USAGE = (
    "usage: pingflow <subcommand> --config <path> [--key value ...] [--workers N] [--out DIR]\n"
    f"subcommands: {', '.join(SUBCOMMANDS)}\n"
    "overrides use dotted keys, e.g. --thresholds.k_anonymity 20 --clock.utc_offset_minutes -360\n"
)

DEFAULTS = {
    "input": {"paths": []},
    "schema": {"user_id": "user_id", "timestamp": "timestamp", "lat": "lat", "lon": "lon",
               "accuracy": "accuracy", "timestamp_unit": "auto", "delimiter": ",", "has_header": True},
    "filter": {},
    "users": {},
    "clock": {"utc_offset_minutes": 0},
    "tessellation": {},
    "schedule": {"home_hours": sorted(DEFAULT_HOME_HOURS), "work_hours": sorted(DEFAULT_WORK_HOURS),
                 "work_days": sorted(DEFAULT_WORK_DAYS)},
    "meanshift": {"bandwidth_m": 300.0, "convergence_tol_m": 1.0, "max_iterations": 100},
    "event": {},
    "grouping": {"kind": "none"},
    "thresholds": {"displacement_m": DEFAULT_THRESHOLD_M, "k_anonymity": DEFAULT_K_ANONYMITY,
                   "min_home_pings": 5, "min_work_pings": 5},
    "landuse": {"k": 6, "linkage": "ward", "metric": "euclidean", "count_mode": "pings"},
    "poi": {"radius_m": DEFAULT_RADIUS_M},
    "run": {"workers": 1, "max_partition_rows": DEFAULT_MAX_PARTITION_ROWS, "output_dir": "out"},
}

# keys holding file paths, resolved against the config file's directory
_PATH_KEYS = {("input", "paths"), ("tessellation", "path"), ("poi", "path"), ("run", "work_dir"),
              ("run", "output_dir")}


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# configuration

def parse_value(text: str):
    """A flag value read as a TOML literal when possible, else as a bare string."""
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def parse_args(argv):
    """(subcommand, config path, overrides) from the command line."""
    if not argv or argv[0] in ("-h", "--help"):
        raise UsageError("")
    sub, rest = argv[0], list(argv[1:])
    if sub not in SUBCOMMANDS:
        raise UsageError(f"unknown subcommand {sub!r}")
    config_path, overrides = None, {}
    i = 0
    while i < len(rest):
        flag = rest[i]
        if not flag.startswith("--") or len(flag) == 2:
            raise UsageError(f"unexpected argument {flag!r}")
        name, eq, inline = flag[2:].partition("=")
        if eq:
            value, i = inline, i + 1
        elif i + 1 < len(rest):
            value, i = rest[i + 1], i + 2
        else:
            raise UsageError(f"flag {flag} needs a value")
        if name == "config":
            config_path = value
        elif name == "workers":
            overrides["run.workers"] = parse_value(value)
        elif name == "out":
            overrides["run.output_dir"] = value
        else:
            overrides[name] = parse_value(value)
    if config_path is None and sub != "grid":
        raise UsageError("--config is required")
    return sub, config_path, overrides


def apply_overrides(config: dict, overrides: dict) -> dict:
    """Nested copy of `config` with dotted `section.field` keys set from `overrides`."""
    out = copy.deepcopy(config)
    for key, value in overrides.items():
        *sections, leaf = key.split(".")
        node = out
        for s in sections:
            node = node.setdefault(s, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {s!r} is not a section")
        node[leaf] = value
    return out


def load_config(path: str | None, overrides: dict | None = None) -> tuple[dict, str]:
    """Defaults, then the TOML file, then overrides; relative paths resolve against the file's directory."""
    merged = copy.deepcopy(DEFAULTS)
    base = os.getcwd()
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path, "rb") as fh:
                doc = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        base = os.path.dirname(os.path.abspath(path))
        for section, values in doc.items():
            if not isinstance(values, dict):
                raise ConfigError(f"{path}: top-level key {section!r} must be a [section]")
            merged.setdefault(section, {}).update(values)
    _resolve_paths(merged, base)
    flags = apply_overrides({}, overrides or {})
    _resolve_paths(flags, os.getcwd())
    for section, values in flags.items():
        if not isinstance(values, dict):
            raise ConfigError(f"override {section!r} must name a section key, e.g. --run.workers")
        merged.setdefault(section, {}).update(values)
    unknown = set(merged) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    return merged, base


def _resolve_paths(cfg: dict, base: str):
    for section, key in _PATH_KEYS:
        value = cfg.get(section, {}).get(key)
        if isinstance(value, list):
            cfg[section][key] = [_resolve(base, v) for v in value]
        elif value is not None:
            cfg[section][key] = _resolve(base, value)


def _resolve(base, value):
    if not isinstance(value, str):
        raise ConfigError(f"expected a path string, got {value!r}")
    return value if os.path.isabs(value) else os.path.normpath(os.path.join(base, value))


def parse_time(value, clock: LocalClock) -> int:
    """Epoch seconds from an integer or an ISO-8601 string; a naive string is local clock time."""
    if isinstance(value, bool):
        raise ConfigError(f"not a time: {value!r}")
    if isinstance(value, (int, float)):
        return int(value)
    if isinstance(value, dt.datetime):
        stamp = value
    elif isinstance(value, dt.date):
        stamp = dt.datetime(value.year, value.month, value.day)
    elif isinstance(value, str):
        try:
            stamp = dt.datetime.fromisoformat(value.replace("Z", "+00:00"))
        except ValueError as exc:
            raise ConfigError(f"not an ISO time: {value!r}") from exc
    else:
        raise ConfigError(f"not a time: {value!r}")
    if stamp.tzinfo is None:
        stamp = stamp.replace(tzinfo=dt.timezone(dt.timedelta(seconds=clock.offset_seconds)))
    return int(stamp.timestamp())


def _window(section: dict, prefix: str, clock) -> TimeWindow | None:
    start, end = section.get(f"{prefix}start"), section.get(f"{prefix}end")
    if start is None and end is None:
        return None
    if start is None or end is None:
        raise ConfigError(f"{prefix}start and {prefix}end must be given together")
    try:
        return TimeWindow(parse_time(start, clock), parse_time(end, clock))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _build(cls, section: str, values: dict):
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


@dataclass
class RunConfig:
    """Validated settings for one run."""

    raw: dict
    inputs: list
    schema: PingSchemaConfig
    filter: FilterSpec
    users: UserFilterCriteria | None
    clock: LocalClock
    schedule: DaySchedule
    meanshift: MeanShiftParams
    event: EventConfig | None
    grouping: GroupingSpec
    threshold_m: float
    k_anonymity: int
    min_home_pings: int
    min_work_pings: int
    workers: int
    max_partition_rows: int
    work_dir: str | None
    output_dir: str
    tessellation: dict = field(default_factory=dict)
    landuse: dict = field(default_factory=dict)
    poi: dict = field(default_factory=dict)

    def tess(self) -> Tessellation | None:
        t = self.tessellation
        if t.get("path"):
            return load_tessellation(t["path"])
        if t.get("grid_bbox") is not None:
            return make_grid(tuple(t["grid_bbox"]), float(t.get("cell_size_m", 1000.0)))
        return None


def validate_config(cfg: dict, subcommand: str) -> RunConfig:
    """Check every field the subcommand needs; raises ConfigError."""
    clock = _build(LocalClock, "clock", cfg["clock"])
    schema = _build(PingSchemaConfig, "schema", cfg["schema"])
    f = dict(cfg["filter"])
    window = _window(f, "", clock)
    spec = _build(FilterSpec, "filter", {
        "bbox": tuple(f["bbox"]) if f.get("bbox") is not None else None,
        "time_window": window,
        "max_accuracy_m": f.get("max_accuracy_m"),
        "user_allowlist": f.get("users"),
    })
    users = _build(UserFilterCriteria, "users", cfg["users"]) if cfg["users"] else None
    schedule = _build(DaySchedule, "schedule", cfg["schedule"])
    meanshift = _build(MeanShiftParams, "meanshift", cfg["meanshift"])
    th = cfg["thresholds"]
    k = th.get("k_anonymity")
    if not isinstance(k, int) or isinstance(k, bool) or k < 0:
        raise ConfigError("thresholds.k_anonymity must be an integer >= 0")
    for key in ("min_home_pings", "min_work_pings"):
        if not isinstance(th.get(key), int) or th[key] < 1:
            raise ConfigError(f"thresholds.{key} must be an integer >= 1")
    if not float(th.get("displacement_m", -1)) >= 0:
        raise ConfigError("thresholds.displacement_m must be >= 0")
    run = cfg["run"]
    workers = run.get("workers")
    if not isinstance(workers, int) or isinstance(workers, bool) or workers < 1:
        raise ConfigError("run.workers must be an integer >= 1")
    rows = run.get("max_partition_rows")
    if not isinstance(rows, int) or rows < 1:
        raise ConfigError("run.max_partition_rows must be an integer >= 1")

    ev = cfg["event"]
    event = None
    if ev:
        if "time" not in ev:
            raise ConfigError("[event] needs time")
        base = _window(ev, "baseline_", clock)
        obs = _window(ev, "observation_", clock)
        if base is None or obs is None:
            raise ConfigError("[event] needs baseline_start/end and observation_start/end")
        epi = ev.get("epicenter")
        event = _build(EventConfig, "event", {"event_time_utc": parse_time(ev["time"], clock),
                                              "baseline_window": base, "observation_window": obs,
                                              "epicenter": tuple(epi) if epi is not None else None})
    g = cfg["grouping"]
    grouping = _build(GroupingSpec, "grouping", {
        "kind": g.get("kind", "none"), "ring_edges_km": tuple(g.get("ring_edges_km", ())),
        "attribute_name": g.get("attribute"), "quantile_count": g.get("quantiles", 4)})

    tess = cfg["tessellation"]
    if tess.get("path") and not os.path.isfile(tess["path"]):
        raise ConfigError(f"tessellation file not found: {tess['path']}")
    if tess.get("grid_bbox") is not None:
        box = tess["grid_bbox"]
        if len(box) != 4 or not (box[0] < box[2] and box[1] < box[3]):
            raise ConfigError(f"tessellation.grid_bbox is not a valid bbox: {box!r}")
        if not float(tess.get("cell_size_m", 1000.0)) > 0:
            raise ConfigError("tessellation.cell_size_m must be > 0")

    needs_pings = subcommand != "grid"
    inputs = cfg["input"].get("paths") or []
    if isinstance(inputs, str):
        inputs = [inputs]
    if needs_pings:
        if not inputs:
            raise ConfigError("input.paths is empty")
        for p in inputs:
            if not os.path.isfile(p):
                raise ConfigError(f"input file not found: {p}")
    has_tess = bool(tess.get("path")) or tess.get("grid_bbox") is not None
    if subcommand in ("landuse", "anomalies", "od", "grid") and not has_tess:
        raise ConfigError(f"{subcommand} needs [tessellation] path or grid_bbox")
    if subcommand in ("displacement", "anomalies", "poi") and event is None:
        raise ConfigError(f"{subcommand} needs an [event] section")
    if subcommand == "displacement" and grouping.kind == "tile_attribute_quantiles" and not has_tess:
        raise ConfigError("tile_attribute_quantiles grouping needs a tessellation")
    if subcommand == "landuse":
        lu = cfg["landuse"]
        if not isinstance(lu.get("k"), int) or lu["k"] < 1:
            raise ConfigError("landuse.k must be an integer >= 1")
        if lu.get("linkage") not in ("ward", "average"):
            raise ConfigError("landuse.linkage must be ward or average")
        if lu.get("count_mode") not in ("pings", "distinct_users"):
            raise ConfigError("landuse.count_mode must be pings or distinct_users")
    if subcommand == "poi":
        path = cfg["poi"].get("path")
        if not path or not os.path.isfile(path):
            raise ConfigError(f"poi.path not found: {path}")
        if not float(cfg["poi"].get("radius_m", DEFAULT_RADIUS_M)) > 0:
            raise ConfigError("poi.radius_m must be > 0")
    return RunConfig(
        raw=cfg, inputs=list(inputs), schema=schema, filter=spec, users=users, clock=clock, schedule=schedule,
        meanshift=meanshift, event=event, grouping=grouping, threshold_m=float(th["displacement_m"]),
        k_anonymity=k, min_home_pings=th["min_home_pings"], min_work_pings=th["min_work_pings"],
        workers=workers, max_partition_rows=rows, work_dir=run.get("work_dir"),
        output_dir=run.get("output_dir") or "out", tessellation=dict(tess), landuse=dict(cfg["landuse"]),
        poi=dict(cfg["poi"]),
    )


# --------------------------------------------------------------------------
# outputs

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def suppress(df: pd.DataFrame, column: str, k: int) -> pd.DataFrame:
    """Drop rows whose user count in `column` is below k."""
    return df[df[column].to_numpy() >= k].reset_index(drop=True)


def with_dates(df: pd.DataFrame) -> pd.DataFrame:
    """Replace the integer `day` column by an ISO `date` column in the same position."""
    if "day" not in df:
        return df
    out = df.copy()
    out.insert(list(df.columns).index("day"), "date", [day_to_date(int(d)).isoformat() for d in df["day"]])
    return out.drop(columns="day")


def coverage_frame(coverage: Counter, k: int) -> pd.DataFrame:
    rows = sorted((reason, int(n)) for reason, n in coverage.items())
    return suppress(pd.DataFrame(rows, columns=["reason", "users"]).astype({"users": "int64"}), "users", k)


class Run:
    """Per-run state: output files, stage timings, counts."""

    def __init__(self, subcommand: str, config: RunConfig):
        self.subcommand = subcommand
        self.config = config
        self.stages: dict = {}
        self.counts: dict = {"read": 0, "emitted": 0, "rejected": 0, "filtered": 0}
        self.outputs: list = []
        self.out = config.output_dir

    @contextmanager
    def stage(self, name):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.stages[name] = round(time.perf_counter() - start, 6)

    def write_csv(self, name: str, df: pd.DataFrame):
        with_dates(df).to_csv(os.path.join(self.out, name), index=False, lineterminator="\n")
        self.outputs.append(name)

    def write_text(self, name: str, text: str | None):
        if text is None:
            return
        with open(os.path.join(self.out, name), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        self.outputs.append(name)

    def write_manifest(self, status: str = "ok", error: str | None = None):
        snapshot = _toml_safe(self.config.raw)
        doc = {
            "tool": {"name": "pingflow", "version": __version__, "subcommand": self.subcommand, "status": status},
            "inputs": {p: sha256_file(p) for p in self.config.inputs if os.path.isfile(p)},
            "counts": dict(self.counts),
            "stages": dict(self.stages),
            "outputs": sorted(self.outputs),
            "config": snapshot,
        }
        if error:
            doc["tool"]["error"] = error
        with open(os.path.join(self.out, "manifest.toml"), "wb") as fh:
            tomli_w.dump(doc, fh)


def _toml_safe(value):
    if isinstance(value, dict):
        return {str(k): _toml_safe(v) for k, v in value.items() if v is not None}
    if isinstance(value, (list, tuple)):
        return [_toml_safe(v) for v in value if v is not None]
    return value


def _row_count(ds) -> int:
    counts = map_partitions(ds, lambda df: pd.DataFrame({"rows": [len(df)]}), schema={"rows": "int64"})
    return int(counts.to_pandas()["rows"].sum())


def load_pings(run: Run, engine: Engine):
    """Read, validate and filter the inputs; fills the manifest counts."""
    cfg = run.config
    with run.stage("ingest"):
        ds, report = read_pings(cfg.inputs, cfg.schema, engine, os.path.join(run.out, "rejects.csv"))
    run.outputs.append("rejects.csv")
    run.counts.update(read=report.read, emitted=report.emitted, rejected=report.rejected)
    run.counts["rejected_by_reason"] = dict(sorted(report.reasons.items()))
    with run.stage("filter"):
        ds = filter_pings(ds, cfg.filter)
        kept = _row_count(ds) if not cfg.filter.is_empty else report.emitted
    run.counts["filtered"] = report.emitted - kept
    if cfg.users is not None:
        with run.stage("user_filter"):
            stats = user_stats(ds, cfg.clock)
            ds = filter_users(ds, stats, cfg.users)
            run.counts["users_total"] = len(stats)
            run.counts["users_kept"] = int(cfg.users.mask(stats).sum())
    return ds


# --------------------------------------------------------------------------
# subcommands

def cmd_stats(run: Run, engine: Engine):
    cfg = run.config
    ds = load_pings_unfiltered_users(run, engine)
    with run.stage("user_stats"):
        stats = user_stats(ds, cfg.clock)
    if cfg.users is not None:
        stats = stats.assign(qualifies=cfg.users.mask(stats))
        run.counts["users_total"] = len(stats)
        run.counts["users_kept"] = int(stats["qualifies"].sum())
    run.write_csv("user_stats.csv", stats)


def load_pings_unfiltered_users(run: Run, engine: Engine):
    # stats reports every user; the user criteria only mark who qualifies
    users, run.config.users = run.config.users, None
    try:
        return load_pings(run, engine)
    finally:
        run.config.users = users


def _homework(run: Run, engine: Engine, ds, tess):
    cfg = run.config
    with run.stage("homework"):
        return infer_home_work(ds, cfg.clock, cfg.schedule, cfg.meanshift, tess,
                               cfg.min_home_pings, cfg.min_work_pings)


def cmd_homework(run: Run, engine: Engine):
    tess = run.config.tess()
    table = _homework(run, engine, load_pings(run, engine), tess)
    run.counts["users_with_home"] = int(table["home_lon"].notna().sum())
    run.counts["users_with_work"] = int(table["work_lon"].notna().sum())
    run.write_csv("homework.csv", table)


def cmd_od(run: Run, engine: Engine):
    cfg = run.config
    tess = cfg.tess()
    table = _homework(run, engine, load_pings(run, engine), tess)
    with run.stage("od"):
        od = od_matrix(table)
    run.write_csv("od.csv", suppress(od.to_frame(), "users", cfg.k_anonymity))
    run.write_csv("od_coverage.csv", coverage_frame(od.coverage, cfg.k_anonymity))


def cmd_landuse(run: Run, engine: Engine):
    cfg = run.config
    tess = cfg.tess()
    ds = load_pings(run, engine)
    lu = cfg.landuse
    with run.stage("profiles"):
        profiles = tile_activity_profiles(ds, tess, cfg.clock, lu["count_mode"])
    published = suppress(profiles, "users", cfg.k_anonymity)
    run.write_csv("profiles.csv", published)
    normed = normalize_profiles(published)
    if len(normed) < lu["k"]:
        raise ConfigError(f"landuse.k = {lu['k']} but only {len(normed)} tile profile(s) are publishable")
    with run.stage("cluster"):
        clustering = hierarchical_cluster(normed, lu["k"], lu["linkage"], lu.get("metric", "euclidean"))
    run.write_csv("landuse_labels.csv", clustering.labels_frame())
    run.write_csv("merge_tree.csv", clustering.merge_tree_frame())
    run.write_csv("cluster_signatures.csv", cluster_signatures(normed, clustering))
    labelled = Tessellation([t for t in tess if t.tile_id in clustering.labels])
    geo = labelled.to_geojson({t: {"cluster": int(c)} for t, c in clustering.labels.items()})
    run.write_text("landuse.geojson", json.dumps(geo, sort_keys=True) + "\n")


def cmd_displacement(run: Run, engine: Engine):
    cfg = run.config
    event = cfg.event
    tess = cfg.tess()
    ds = load_pings(run, engine)
    before = filter_pings(ds, FilterSpec(time_window=event.baseline_window))
    homes = _homework(run, engine, before, tess)
    with run.stage("displacement"):
        records, coverage = displacement_series(ds, homes, event, cfg.clock, cfg.threshold_m,
                                                cfg.schedule.home_hours, event.baseline_window)
        groups, gcov = group_users(homes, tess, cfg.grouping, event)
        grouped = None if cfg.grouping.kind == "none" else groups
        rates = displacement_rates(records, grouped, cfg.k_anonymity)
    coverage.update({f"grouping_{r}": n for r, n in gcov.items() if r != "no_home"})
    run.counts["users_observed"] = int(records["user_id"].nunique())
    run.write_csv("displacement_rates.csv", rates)
    run.write_csv("displacement_coverage.csv", coverage_frame(coverage, cfg.k_anonymity))
    run.write_text("displacement_rates.svg", emit_chart(rates, "rate", "group", title="displacement rate"))


def cmd_anomalies(run: Run, engine: Engine):
    cfg = run.config
    tess = cfg.tess()
    ds = load_pings(run, engine)
    with run.stage("anomalies"):
        table = tile_population_anomalies(ds, tess, cfg.clock, cfg.event, cfg.k_anonymity)
    run.write_csv("anomalies.csv", table)
    run.write_text("anomalies.svg", emit_chart(table, "z_score", "tile_id", title="population z-score"))


def cmd_poi(run: Run, engine: Engine):
    cfg = run.config
    pois = load_pois(cfg.poi["path"], float(cfg.poi.get("radius_m", DEFAULT_RADIUS_M)))
    ds = load_pings(run, engine)
    with run.stage("visits"):
        visits = daily_visits(ds, pois, cfg.clock)
        change = visit_rate_change(visits, cfg.event, cfg.clock, cfg.k_anonymity, pois)
    run.write_csv("poi_visits.csv", suppress(visits, "unique_visitors", cfg.k_anonymity))
    run.write_csv("poi_change.csv", change)
    run.write_text("poi_change.svg", emit_chart(change, "pct_change", "poi_id", title="visitor change"))


def cmd_grid(run: Run, engine: Engine):
    with run.stage("grid"):
        tess = run.config.tess()
    run.counts["tiles"] = len(tess)
    run.write_text("grid.geojson", json.dumps(tess.to_geojson(), sort_keys=True) + "\n")


COMMANDS = {"stats": cmd_stats, "homework": cmd_homework, "od": cmd_od, "landuse": cmd_landuse,
            "displacement": cmd_displacement, "anomalies": cmd_anomalies, "poi": cmd_poi, "grid": cmd_grid}


def run(subcommand: str, config_path: str | None, overrides: dict | None = None) -> int:
    """Run one subcommand; returns the process exit code."""
    try:
        raw, _ = load_config(config_path, overrides)
        config = validate_config(raw, subcommand)
    except ConfigError as exc:
        print(f"pingflow: config error: {exc}", file=sys.stderr)
        return 2
    os.makedirs(config.output_dir, exist_ok=True)
    state = Run(subcommand, config)
    try:
        with Engine(config.workers, config.max_partition_rows, work_dir=config.work_dir) as engine:
            COMMANDS[subcommand](state, engine)
    except ConfigError as exc:
        print(f"pingflow: config error: {exc}", file=sys.stderr)
        state.write_manifest("config_error", str(exc))
        return 2
    except Exception as exc:  # noqa: BLE001 - every failure maps to exit 1
        logger.debug("run failed", exc_info=True)
        print(f"pingflow: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        state.write_manifest("failed", f"{type(exc).__name__}: {exc}")
        return 1
    state.write_manifest()
    return 0


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=os.environ.get("PINGFLOW_LOG", "WARNING"), format="%(levelname)s %(message)s")
    try:
        sub, config_path, overrides = parse_args(argv)
    except UsageError as exc:
        if str(exc):
            print(f"pingflow: {exc}", file=sys.stderr)
        print(USAGE, file=sys.stderr, end="")
        return 2 if argv and argv[0] not in ("-h", "--help") else (0 if argv else 2)
    return run(sub, config_path, overrides)


if __name__ == "__main__":
    sys.exit(main())
