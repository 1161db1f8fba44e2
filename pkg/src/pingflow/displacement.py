"""Post-event displacement and population-density anomalies.

A user's position on night `d` is the component-wise median of their pings
between 22:00 on `d` and 05:59 on `d + 1` (with the default night hours; any
hour before noon is attributed to the previous date). A user is displaced on
night `d` when that position lies more than a threshold from their
pre-event home.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .core import DEFAULT_HOME_HOURS, ConfigError, LocalClock, TimeWindow, local_fields
from .engine import Aggregator, PartitionedDataset, count_distinct, map_partitions, reduce_by_key, shuffle_by_key
from .spatial import Tessellation, assign_tile, assign_tiles, haversine_m

DEFAULT_THRESHOLD_M = 500.0
DEFAULT_K_ANONYMITY = 10
MIN_BASELINE_DAYS = 7
GROUPING_KINDS = ("epicenter_rings", "tile_attribute_quantiles", "none")
RECORD_COLUMNS = ["user_id", "day", "night_lon", "night_lat", "distance_from_home_m", "displaced"]
RATE_COLUMNS = ["day", "group", "observed_users", "displaced_users", "rate"]
ANOMALY_COLUMNS = ["tile_id", "day", "observed_users", "baseline_mean", "baseline_std", "z_score", "pct_change"]


@dataclass(frozen=True)
class EventConfig:
    event_time_utc: int
    baseline_window: TimeWindow
    observation_window: TimeWindow
    epicenter: tuple | None = None

    def __post_init__(self):
        if not self.baseline_window.end_utc <= self.event_time_utc <= self.observation_window.start_utc:
            raise ConfigError(
                "windows must satisfy baseline.end <= event_time <= observation.start "
                f"(got {self.baseline_window.end_utc}, {self.event_time_utc}, {self.observation_window.start_utc})"
            )
        if self.epicenter is not None:
            lon, lat = (float(v) for v in self.epicenter)
            if not (-180 <= lon <= 180 and -90 <= lat <= 90):
                raise ConfigError(f"epicenter out of range: {self.epicenter!r}")
            object.__setattr__(self, "epicenter", (lon, lat))


@dataclass(frozen=True)
class GroupingSpec:
    kind: str = "none"
    ring_edges_km: tuple = ()
    attribute_name: str | None = None
    quantile_count: int = 4

    def __post_init__(self):
        if self.kind not in GROUPING_KINDS:
            raise ConfigError(f"grouping kind must be one of {GROUPING_KINDS}")
        edges = tuple(float(e) for e in self.ring_edges_km)
        object.__setattr__(self, "ring_edges_km", edges)
        if self.kind == "epicenter_rings":
            if not edges or edges[0] <= 0 or any(b <= a for a, b in zip(edges, edges[1:])):
                raise ConfigError("ring_edges_km must be positive and strictly ascending")
        if self.kind == "tile_attribute_quantiles":
            if not self.attribute_name:
                raise ConfigError("tile_attribute_quantiles needs attribute_name")
            if self.quantile_count < 1:
                raise ConfigError("quantile_count must be >= 1")


# --------------------------------------------------------------------------
# nightly positions

def night_days(ts: np.ndarray, clock: LocalClock, night_hours=DEFAULT_HOME_HOURS):
    """(mask of night-hour pings, night date for each masked ping)."""
    days, hours, _ = local_fields(ts, clock)
    mask = np.isin(hours, list(night_hours))
    nd = np.where(hours < 12, days - 1, days)
    return mask, nd[mask]


def nightly_position(user_day_pings: pd.DataFrame, clock: LocalClock,
                     night_hours=DEFAULT_HOME_HOURS) -> tuple | None:
    """Median (lon, lat) of the night-hour pings, or None if there are none."""
    mask, _ = night_days(user_day_pings["timestamp"].to_numpy(), clock, night_hours)
    if not mask.any():
        return None
    return (float(np.median(user_day_pings["lon"].to_numpy()[mask])),
            float(np.median(user_day_pings["lat"].to_numpy()[mask])))


def _records_for(df, homes, clock, night_hours, days, threshold_m):
    empty = pd.DataFrame({"user_id": pd.Series(dtype=object), "day": pd.Series(dtype="int64"),
                          "night_lon": pd.Series(dtype="float64"), "night_lat": pd.Series(dtype="float64"),
                          "distance_from_home_m": pd.Series(dtype="float64"),
                          "displaced": pd.Series(dtype=bool)})
    if df.empty:
        return empty
    mask, nd = night_days(df["timestamp"].to_numpy(), clock, night_hours)
    night = pd.DataFrame({"user_id": df["user_id"].to_numpy()[mask], "day": nd,
                          "lon": df["lon"].to_numpy()[mask], "lat": df["lat"].to_numpy()[mask]})
    night = night[np.isin(night["day"].to_numpy(), days)]
    if night.empty:
        return empty
    pos = night.groupby(["user_id", "day"], sort=True)[["lon", "lat"]].median().reset_index()
    home = homes.reindex(pos["user_id"])
    dist = haversine_m(pos["lon"].to_numpy(), pos["lat"].to_numpy(),
                       home["home_lon"].to_numpy(), home["home_lat"].to_numpy())
    return pd.DataFrame({
        "user_id": pos["user_id"].to_numpy(), "day": pos["day"].to_numpy().astype(np.int64),
        "night_lon": pos["lon"].to_numpy(), "night_lat": pos["lat"].to_numpy(),
        "distance_from_home_m": dist, "displaced": dist > threshold_m,
    })


def _home_index(homes: pd.DataFrame) -> pd.DataFrame:
    have = homes.dropna(subset=["home_lon", "home_lat"])
    return have.set_index("user_id")[["home_lon", "home_lat"]]


def displacement_series(ds: PartitionedDataset, homes: pd.DataFrame, event: EventConfig,
                        clock: LocalClock = LocalClock(), threshold_m: float = DEFAULT_THRESHOLD_M,
                        night_hours=DEFAULT_HOME_HOURS, homes_window: TimeWindow | None = None,
                        window: TimeWindow | None = None):
    """Per-user, per-night distance from home over the observation window.

    Returns ``(records, coverage)``; records are sorted by (user_id, day) and
    coverage counts users left out (no home, or no night positions).
    `homes_window`, if given, is the window the homes were computed on and
    must end by the event time. `window` replaces the observation window,
    e.g. to measure the baseline period itself.
    """
    if homes_window is not None and homes_window.end_utc > event.event_time_utc:
        raise ConfigError("homes must come from data before the event")
    if threshold_m < 0:
        raise ConfigError("threshold_m must be >= 0")
    home_idx = _home_index(homes)
    with_home = frozenset(home_idx.index)
    window = window or event.observation_window
    days = window.local_days(clock)

    def in_window(df):
        return df[window.contains(df["timestamp"].to_numpy())].reset_index(drop=True)

    observed = map_partitions(ds, in_window, schema=dict(ds.record_schema))
    seen = reduce_by_key(map_partitions(observed, lambda df: df[["user_id"]]), "user_id",
                         Aggregator(lambda df: df.drop_duplicates(), lambda df: df.drop_duplicates()))
    housed = map_partitions(observed, lambda df: df[df["user_id"].isin(with_home)].reset_index(drop=True),
                            schema=dict(ds.record_schema))
    byuser = shuffle_by_key(housed, "user_id")
    records = map_partitions(byuser, lambda df: _records_for(df, home_idx, clock, night_hours, days, threshold_m))
    table = records.to_pandas().sort_values(["user_id", "day"], kind="stable").reset_index(drop=True)

    seen_users = set(seen["user_id"])
    coverage = Counter()
    coverage["no_home"] = len(seen_users - with_home)
    coverage["no_night_position"] = len((seen_users & with_home) - set(table["user_id"]))
    return table[RECORD_COLUMNS], coverage


# --------------------------------------------------------------------------
# grouping and rates

def group_users(homes: pd.DataFrame, tess: Tessellation | None, grouping: GroupingSpec,
                event: EventConfig | None = None):
    """Map users with a home to a group id; returns ``(DataFrame[user_id, group], coverage)``.

    Rings: group i is the first ring edge at or beyond the home's distance to
    the epicenter, with one open-ended group past the last edge. Quantiles:
    equal-frequency bins of the home tile's attribute over users, a value
    equal to a bin edge going to the lower bin.
    """
    coverage = Counter()
    have = homes.dropna(subset=["home_lon", "home_lat"])
    coverage["no_home"] = len(homes) - len(have)
    users = have["user_id"].to_numpy()
    if grouping.kind == "none":
        groups = np.full(len(users), "all", dtype=object)
    elif grouping.kind == "epicenter_rings":
        if event is None or event.epicenter is None:
            raise ConfigError("epicenter_rings grouping needs an event epicenter")
        ex, ey = event.epicenter
        km = haversine_m(have["home_lon"].to_numpy(), have["home_lat"].to_numpy(), ex, ey) / 1000.0
        groups = np.searchsorted(np.asarray(grouping.ring_edges_km), np.atleast_1d(km), side="left").astype(str)
    else:
        if tess is None:
            raise ConfigError("tile_attribute_quantiles grouping needs a tessellation")
        attr = tess.attribute(grouping.attribute_name)
        tiles = have["home_tile"] if "home_tile" in have else pd.Series(
            [assign_tile(x, y, tess) for x, y in zip(have["home_lon"], have["home_lat"])], index=have.index)
        values = tiles.map(lambda t: attr.get(t, np.nan) if isinstance(t, str) else np.nan).to_numpy(dtype=float)
        no_tile = tiles.map(lambda t: not isinstance(t, str)).to_numpy(dtype=bool)
        missing = np.isnan(values) & ~no_tile
        coverage["no_home_tile"] = int(no_tile.sum())
        coverage["missing_attribute"] = int(missing.sum())
        ok = ~np.isnan(values)
        users, values = users[ok], values[ok]
        if len(values):
            edges = np.quantile(values, np.arange(1, grouping.quantile_count) / grouping.quantile_count)
            groups = np.searchsorted(edges, values, side="left").astype(str)
        else:
            groups = np.array([], dtype=str)
    out = pd.DataFrame({"user_id": users, "group": np.asarray(groups, dtype=object)})
    return out.sort_values("user_id", kind="stable").reset_index(drop=True), coverage


def displacement_rates(records: pd.DataFrame, groups: pd.DataFrame | None = None,
                       k_anonymity: int = DEFAULT_K_ANONYMITY) -> pd.DataFrame:
    """Daily displaced share per group; rows with fewer than `k_anonymity` observed users are dropped."""
    rec = records[["user_id", "day", "displaced"]]
    if groups is None:
        rec = rec.assign(group="all")
    else:
        rec = rec.merge(groups[["user_id", "group"]], on="user_id", how="inner")
    per_user = rec.groupby(["day", "group", "user_id"], sort=False)["displaced"].any().reset_index()
    g = per_user.groupby(["day", "group"], sort=True)["displaced"]
    out = pd.DataFrame({"observed_users": g.size(), "displaced_users": g.sum()}).reset_index()
    out = out.astype({"observed_users": "int64", "displaced_users": "int64"})
    out["rate"] = out["displaced_users"] / out["observed_users"]
    out = out[out["observed_users"] >= k_anonymity]
    return out[RATE_COLUMNS].reset_index(drop=True)


# --------------------------------------------------------------------------
# baselines

def compare_to_baseline(counts: pd.DataFrame, key: str, value: str, baseline_days: np.ndarray,
                        observation_days: np.ndarray, k_anonymity: int) -> pd.DataFrame:
    """Baseline mean/std per key (zero-filled over every baseline day) against each observation day.

    Keys are those with activity in either period; observation days are
    zero-filled too. Rows whose count is below `k_anonymity` are dropped.
    z_score is NaN when the baseline std is 0, pct_change when its mean is 0.
    """
    keys = np.sort(counts[key].unique()) if len(counts) else np.array([], dtype=object)
    full = counts.set_index([key, "day"])[value]
    base_idx = pd.MultiIndex.from_product([keys, baseline_days], names=[key, "day"])
    base = full.reindex(base_idx, fill_value=0).to_numpy(dtype=np.float64).reshape(len(keys), len(baseline_days))
    mean = base.mean(axis=1) if len(baseline_days) else np.zeros(len(keys))
    std = base.std(axis=1, ddof=0) if len(baseline_days) else np.zeros(len(keys))
    obs_idx = pd.MultiIndex.from_product([keys, observation_days], names=[key, "day"])
    obs = full.reindex(obs_idx, fill_value=0).to_numpy(dtype=np.int64)
    m = np.repeat(mean, len(observation_days))
    s = np.repeat(std, len(observation_days))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(s > 0, (obs - m) / s, np.nan)
        pct = np.where(m > 0, (obs - m) / m, np.nan)
    out = pd.DataFrame({
        key: obs_idx.get_level_values(0), "day": obs_idx.get_level_values(1).astype(np.int64),
        value: obs, "baseline_mean": m, "baseline_std": s, "z_score": z, "pct_change": pct,
    })
    return out[out[value] >= k_anonymity].reset_index(drop=True)


def tile_population_anomalies(ds: PartitionedDataset, tess: Tessellation, clock: LocalClock,
                              event: EventConfig, k_anonymity: int = DEFAULT_K_ANONYMITY) -> pd.DataFrame:
    """Distinct users per tile and observation day, compared with the tile's baseline days."""
    baseline_days = event.baseline_window.local_days(clock)
    if len(baseline_days) < MIN_BASELINE_DAYS:
        raise ConfigError(f"baseline covers {len(baseline_days)} local days; need at least {MIN_BASELINE_DAYS}")
    obs_days = event.observation_window.local_days(clock)
    base_w, obs_w = event.baseline_window, event.observation_window

    def tag(df):
        ts = df["timestamp"].to_numpy()
        keep = base_w.contains(ts) | obs_w.contains(ts)
        sub = df[keep]
        tiles = assign_tiles(sub["lon"].to_numpy(), sub["lat"].to_numpy(), tess)
        hit = np.array([t is not None for t in tiles], dtype=bool)
        days, _, _ = local_fields(sub["timestamp"].to_numpy()[hit], clock)
        return pd.DataFrame({"tile_id": tiles[hit].astype(object), "day": days.astype(np.int64),
                             "user_id": sub["user_id"].to_numpy()[hit]})

    tagged = map_partitions(ds, tag, schema={"tile_id": "object", "day": "int64", "user_id": "object"})
    counts = count_distinct(tagged, ["tile_id", "day"], "user_id", "observed_users")
    out = compare_to_baseline(counts, "tile_id", "observed_users",
                              baseline_days, obs_days, k_anonymity)
    return out[ANOMALY_COLUMNS]
