"""Daily unique visitors at points of interest and their change after an event."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .core import ConfigError, LocalClock, local_fields
from .displacement import DEFAULT_K_ANONYMITY, MIN_BASELINE_DAYS, EventConfig, compare_to_baseline
from .engine import PartitionedDataset, count_distinct, map_partitions
from .spatial import EARTH_RADIUS_M, GridIndex, haversine_m

DEFAULT_RADIUS_M = 100.0
VISIT_COLUMNS = ["poi_id", "day", "unique_visitors"]
CHANGE_COLUMNS = ["poi_id", "day", "visitors", "baseline_mean", "pct_change", "z_score"]


@dataclass(frozen=True)
class PointOfInterest:
    poi_id: str
    lon: float
    lat: float
    radius_m: float = DEFAULT_RADIUS_M

    def __post_init__(self):
        if not self.radius_m > 0:
            raise ConfigError(f"POI {self.poi_id}: radius_m must be > 0")
        if not (-180 <= self.lon <= 180 and -90 <= self.lat <= 90):
            raise ConfigError(f"POI {self.poi_id}: coordinates out of range")

    @property
    def location(self):
        return (self.lon, self.lat)

    def bbox(self):
        """Bounding box in degrees that contains the whole visit circle."""
        dlat = math.degrees(self.radius_m / EARTH_RADIUS_M) * 1.01
        coslat = math.cos(math.radians(min(abs(self.lat) + dlat, 89.9)))
        dlon = min(dlat / coslat, 180.0)
        return (self.lon - dlon, self.lat - dlat, self.lon + dlon, self.lat + dlat)


def check_unique(pois) -> list[PointOfInterest]:
    pois = list(pois)
    seen = set()
    for p in pois:
        if p.poi_id in seen:
            raise ConfigError(f"duplicate poi_id {p.poi_id!r}")
        seen.add(p.poi_id)
    return pois


def load_pois(path, default_radius_m: float = DEFAULT_RADIUS_M) -> list[PointOfInterest]:
    """POIs from a CSV with columns poi_id,lon,lat and optional radius_m."""
    df = pd.read_csv(path, dtype={"poi_id": str})
    missing = {"poi_id", "lon", "lat"} - set(df.columns)
    if missing:
        raise ConfigError(f"{path}: missing column(s) {sorted(missing)}")
    radius = df["radius_m"] if "radius_m" in df else pd.Series(np.nan, index=df.index)
    return check_unique(
        PointOfInterest(str(r.poi_id), float(r.lon), float(r.lat),
                        float(rad) if pd.notna(rad) else default_radius_m)
        for r, rad in zip(df.itertuples(index=False), radius)
    )


class POIIndex:
    """Grid-bucket index over the POIs' visit-circle bounding boxes."""

    def __init__(self, pois):
        self.pois = check_unique(pois)
        self.grid = GridIndex([p.bbox() for p in self.pois])
        self.lon = np.array([p.lon for p in self.pois])
        self.lat = np.array([p.lat for p in self.pois])
        self.radius = np.array([p.radius_m for p in self.pois])
        self.ids = np.array([p.poi_id for p in self.pois], dtype=object)

    def pairs(self, lon: np.ndarray, lat: np.ndarray):
        """(ping index, poi index) for every ping within a POI's radius."""
        bins = self.grid.bin_of(lon, lat)
        ping_idx, poi_idx = [], []
        order = np.argsort(bins, kind="stable")
        sb = bins[order]
        starts = np.flatnonzero(np.r_[True, sb[1:] != sb[:-1]]) if len(sb) else np.array([], dtype=int)
        ends = np.r_[starts[1:], len(sb)]
        for s, e in zip(starts, ends):
            b = int(sb[s])
            cands = self.grid.cells.get(b) if b >= 0 else None
            if not cands:
                continue
            idx = order[s:e]
            c = np.asarray(cands)
            d = haversine_m(lon[idx][:, None], lat[idx][:, None], self.lon[c][None, :], self.lat[c][None, :])
            pi, ci = np.nonzero(d <= self.radius[c][None, :])
            ping_idx.append(idx[pi])
            poi_idx.append(c[ci])
        if not ping_idx:
            return np.array([], dtype=np.int64), np.array([], dtype=np.int64)
        return np.concatenate(ping_idx), np.concatenate(poi_idx)


def daily_visits(ds: PartitionedDataset, pois, clock: LocalClock = LocalClock()) -> pd.DataFrame:
    """Distinct visitors per (poi_id, local day).

    A user visits a POI on a day when any of their pings that day lies within
    the POI's radius. A ping may count for several overlapping POIs.
    """
    index = pois if isinstance(pois, POIIndex) else POIIndex(pois)

    def tag(df):
        pi, ci = index.pairs(df["lon"].to_numpy(), df["lat"].to_numpy())
        days, _, _ = local_fields(df["timestamp"].to_numpy()[pi], clock)
        return pd.DataFrame({"poi_id": index.ids[ci].astype(object), "day": days.astype(np.int64),
                             "user_id": df["user_id"].to_numpy()[pi]})

    tagged = map_partitions(ds, tag, schema={"poi_id": "object", "day": "int64", "user_id": "object"})
    table = count_distinct(tagged, ["poi_id", "day"], "user_id", "unique_visitors")
    return table[VISIT_COLUMNS].astype({"unique_visitors": "int64"})


def visit_rate_change(visits: pd.DataFrame, event: EventConfig, clock: LocalClock = LocalClock(),
                      k_anonymity: int = DEFAULT_K_ANONYMITY, pois=None) -> pd.DataFrame:
    """Observation-day visitors per POI against the POI's zero-filled baseline.

    POIs listed in `pois` but never visited are included (all zeros).
    """
    baseline_days = event.baseline_window.local_days(clock)
    if len(baseline_days) < MIN_BASELINE_DAYS:
        raise ConfigError(f"baseline covers {len(baseline_days)} local days; need at least {MIN_BASELINE_DAYS}")
    obs_days = event.observation_window.local_days(clock)
    counts = visits.rename(columns={"unique_visitors": "visitors"})[["poi_id", "day", "visitors"]]
    if pois is not None:
        extra = sorted({p.poi_id for p in pois} - set(counts["poi_id"]))
        if extra:
            pad = pd.DataFrame({"poi_id": extra, "day": int(baseline_days[0]), "visitors": 0})
            counts = pd.concat([counts, pad], ignore_index=True)
    out = compare_to_baseline(counts, "poi_id", "visitors", baseline_days, obs_days, k_anonymity)
    return out[CHANGE_COLUMNS]
