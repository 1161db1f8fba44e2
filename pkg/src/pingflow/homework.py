"""Home and work inference with flat-kernel mean shift, and commuting OD matrices."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .core import ConfigError, DaySchedule, LocalClock, local_fields
from .engine import PartitionedDataset, map_partitions, shuffle_by_key
from .spatial import Tessellation, assign_tile, from_local_xy, to_local_xy

HOMEWORK_COLUMNS = ["user_id", "home_lon", "home_lat", "home_tile", "home_support",
                    "work_lon", "work_lat", "work_tile", "work_support"]
HOME, WORK, OTHER = "home", "work", "other"
# local equirectangular frame is only trusted over this extent
MAX_EXTENT_M = 200_000.0
_CHUNK = 4_000_000


@dataclass(frozen=True)
class MeanShiftParams:
    bandwidth_m: float = 300.0
    convergence_tol_m: float = 1.0
    max_iterations: int = 100
    seed_bin_m: float | None = None
    mode_merge_m: float | None = None

    def __post_init__(self):
        if not self.bandwidth_m > 0 or not self.convergence_tol_m > 0:
            raise ConfigError("bandwidth_m and convergence_tol_m must be > 0")
        if not self.bandwidth_m > self.convergence_tol_m:
            raise ConfigError("bandwidth_m must exceed convergence_tol_m")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if self.seed_bin_m is None:
            object.__setattr__(self, "seed_bin_m", self.bandwidth_m / 2)
        if self.mode_merge_m is None:
            object.__setattr__(self, "mode_merge_m", self.bandwidth_m / 2)
        if self.seed_bin_m <= 0 or self.mode_merge_m < 0:
            raise ConfigError("seed_bin_m must be > 0 and mode_merge_m >= 0")


@dataclass(frozen=True)
class ModeCluster:
    center: tuple
    member_count: int
    member_indices: frozenset
    iterations: int = 0


@dataclass(frozen=True)
class Anchor:
    lon: float
    lat: float
    tile_id: str | None
    support: int


@dataclass(frozen=True)
class HomeWorkResult:
    user_id: str
    home: Anchor | None = None
    work: Anchor | None = None

    def as_row(self) -> dict:
        row = {"user_id": self.user_id}
        for name, a in (("home", self.home), ("work", self.work)):
            row[f"{name}_lon"] = a.lon if a else np.nan
            row[f"{name}_lat"] = a.lat if a else np.nan
            row[f"{name}_tile"] = a.tile_id if a else None
            row[f"{name}_support"] = a.support if a else pd.NA
        return row


# --------------------------------------------------------------------------
# period labels

def label_periods(ts: np.ndarray, clock: LocalClock, schedule: DaySchedule) -> np.ndarray:
    _, hours, weekdays = local_fields(ts, clock)
    home = np.isin(hours, list(schedule.home_hours))
    work = np.isin(hours, list(schedule.work_hours)) & np.isin(weekdays, list(schedule.work_days))
    return np.where(home, HOME, np.where(work, WORK, OTHER))


def label_period(timestamp_utc: int, clock: LocalClock, schedule: DaySchedule = DaySchedule()) -> str:
    return str(label_periods(np.array([timestamp_utc], dtype=np.int64), clock, schedule)[0])


# --------------------------------------------------------------------------
# mean shift

def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)


def mean_shift_xy(xy: np.ndarray, params: MeanShiftParams):
    """Flat-kernel mean shift on planar coordinates in meters.

    Returns ``(centers, labels, iterations)`` with centers ordered by member
    count (descending) and then by (x, y). Points are processed in
    lexicographic order so the result does not depend on input order, and
    coordinates are taken relative to their centroid so a translation of
    the input translates the modes.
    """
    xy = np.asarray(xy, dtype=np.float64)
    if xy.ndim != 2 or len(xy) == 0:
        raise ValueError("mean shift needs at least one point")
    order = np.lexsort((xy[:, 1], xy[:, 0]))
    pts = xy[order]
    origin = pts.mean(axis=0)
    rel = pts - origin
    bw2 = params.bandwidth_m ** 2

    seeds = np.unique(np.round(rel / params.seed_bin_m), axis=0) * params.seed_bin_m
    centers = seeds.copy()
    active = np.ones(len(seeds), dtype=bool)
    iterations = np.zeros(len(seeds), dtype=np.int64)
    dead = np.zeros(len(seeds), dtype=bool)
    step = max(1, _CHUNK // max(len(rel), 1))
    for _ in range(params.max_iterations):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        for lo in range(0, len(idx), step):
            chunk = idx[lo:lo + step]
            within = _sq_dists(centers[chunk], rel) <= bw2
            counts = within.sum(axis=1)
            empty = counts == 0
            new = (within.astype(np.float64) @ rel) / np.maximum(counts, 1)[:, None]
            shift = np.sqrt(((new - centers[chunk]) ** 2).sum(axis=1))
            new[empty] = centers[chunk][empty]
            centers[chunk] = new
            iterations[chunk] += 1
            dead[chunk[empty]] = True
            active[chunk[(shift < params.convergence_tol_m) | empty]] = False
    centers, iterations = centers[~dead], iterations[~dead]

    support = np.concatenate([
        (_sq_dists(centers[lo:lo + step], rel) <= bw2).sum(axis=1) for lo in range(0, len(centers), step)
    ]) if len(centers) else np.zeros(0, dtype=np.int64)
    # more in-bandwidth points first, ties broken by position
    rank = np.lexsort((centers[:, 1], centers[:, 0], -support))
    kept: list[int] = []
    merge2 = params.mode_merge_m ** 2
    for i in rank:
        if all(((centers[i] - centers[k]) ** 2).sum() > merge2 for k in kept):
            kept.append(i)
    modes = centers[kept]
    mode_iters = iterations[kept]

    nearest = np.concatenate([
        np.argmin(_sq_dists(rel[lo:lo + step], modes), axis=1) for lo in range(0, len(rel), step)
    ])
    counts = np.bincount(nearest, minlength=len(modes))
    nonempty = np.flatnonzero(counts)
    final = np.lexsort((modes[nonempty, 1], modes[nonempty, 0], -counts[nonempty]))
    final = nonempty[final]
    relabel = np.full(len(modes), -1)
    relabel[final] = np.arange(len(final))
    labels = np.empty(len(xy), dtype=np.int64)
    labels[order] = relabel[nearest]
    return modes[final] + origin, labels, mode_iters[final]


def mean_shift(points, params: MeanShiftParams = MeanShiftParams()) -> list[ModeCluster]:
    """Cluster (lon, lat) points; modes sorted by member count, then (lon, lat).

    Works in a local equirectangular frame centred on the points' centroid,
    so all points must lie within a 200 km square.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        raise ValueError("mean shift needs at least one point")
    lon0, lat0 = pts[:, 0].mean(), pts[:, 1].mean()
    x, y = to_local_xy(pts[:, 0], pts[:, 1], lon0, lat0)
    if np.ptp(x) > MAX_EXTENT_M or np.ptp(y) > MAX_EXTENT_M:
        raise ValueError("points span more than 200 km; the local projection is not valid")
    centers, labels, iters = mean_shift_xy(np.column_stack([x, y]), params)
    lon, lat = from_local_xy(centers[:, 0], centers[:, 1], lon0, lat0)
    return [
        ModeCluster((float(lon[k]), float(lat[k])), int((labels == k).sum()),
                    frozenset(np.flatnonzero(labels == k).tolist()), int(iters[k]))
        for k in range(len(centers))
    ]


# --------------------------------------------------------------------------
# home / work

def _anchor(lon, lat, params, tess, min_pings):
    if len(lon) < min_pings:
        return None
    best = mean_shift(np.column_stack([lon, lat]), params)[0]
    if best.member_count < min_pings:
        return None
    tile = assign_tile(best.center[0], best.center[1], tess) if tess is not None else None
    return Anchor(best.center[0], best.center[1], tile, best.member_count)


def user_home_work(user_pings: pd.DataFrame, clock: LocalClock, schedule: DaySchedule,
                   params: MeanShiftParams, tess: Tessellation | None,
                   min_home_pings: int = 5, min_work_pings: int = 5) -> HomeWorkResult:
    """Home and work anchors for one user's pings.

    Each anchor is the largest mean-shift mode of that period's pings; it is
    absent when that mode holds fewer than the minimum supporting pings.
    """
    users = user_pings["user_id"].unique()
    if len(users) > 1:
        raise ValueError("pings belong to more than one user")
    user = str(users[0]) if len(users) else ""
    labels = label_periods(user_pings["timestamp"].to_numpy(), clock, schedule)
    lon, lat = user_pings["lon"].to_numpy(), user_pings["lat"].to_numpy()
    home = labels == HOME
    work = labels == WORK
    return HomeWorkResult(
        user,
        _anchor(lon[home], lat[home], params, tess, min_home_pings),
        _anchor(lon[work], lat[work], params, tess, min_work_pings),
    )


def _empty_homework() -> pd.DataFrame:
    return pd.DataFrame({
        "user_id": pd.Series(dtype=object), "home_lon": pd.Series(dtype="float64"),
        "home_lat": pd.Series(dtype="float64"), "home_tile": pd.Series(dtype=object),
        "home_support": pd.Series(dtype="Int64"), "work_lon": pd.Series(dtype="float64"),
        "work_lat": pd.Series(dtype="float64"), "work_tile": pd.Series(dtype=object),
        "work_support": pd.Series(dtype="Int64"),
    })


def infer_home_work(ds: PartitionedDataset, clock: LocalClock, schedule: DaySchedule = DaySchedule(),
                    params: MeanShiftParams = MeanShiftParams(), tess: Tessellation | None = None,
                    min_home_pings: int = 5, min_work_pings: int = 5) -> pd.DataFrame:
    """Home/work table (HOMEWORK_COLUMNS) for every user, sorted by user_id."""
    byuser = shuffle_by_key(ds, "user_id") if ds.partitioner_key != "user_id" else ds

    def per_partition(df):
        if df.empty:
            return _empty_homework()
        rows = [user_home_work(g, clock, schedule, params, tess, min_home_pings, min_work_pings).as_row()
                for _, g in df.groupby("user_id", sort=True)]
        return pd.DataFrame(rows, columns=HOMEWORK_COLUMNS).astype(_empty_homework().dtypes.to_dict())

    out = map_partitions(byuser, per_partition, schema={c: str(t) for c, t in _empty_homework().dtypes.items()})
    table = out.to_pandas()
    return table.sort_values("user_id", kind="stable").reset_index(drop=True)


def results_from_table(table: pd.DataFrame) -> list[HomeWorkResult]:
    out = []
    for row in table.itertuples(index=False):
        anchors = []
        for name in ("home", "work"):
            lon = getattr(row, f"{name}_lon")
            if pd.isna(lon):
                anchors.append(None)
            else:
                tile = getattr(row, f"{name}_tile")
                anchors.append(Anchor(float(lon), float(getattr(row, f"{name}_lat")),
                                      None if pd.isna(tile) else str(tile), int(getattr(row, f"{name}_support"))))
        out.append(HomeWorkResult(str(row.user_id), *anchors))
    return out


# --------------------------------------------------------------------------
# OD matrix

@dataclass
class ODMatrix:
    entries: dict
    total_users: int
    coverage: Counter

    def to_frame(self) -> pd.DataFrame:
        rows = sorted((h, w, n) for (h, w), n in self.entries.items())
        return pd.DataFrame(rows, columns=["home_tile", "work_tile", "users"]).astype({"users": "int64"})


def od_matrix(results) -> ODMatrix:
    """Users per (home tile, work tile). Users lacking either tile are only counted in `coverage`."""
    if isinstance(results, pd.DataFrame):
        results = results_from_table(results)
    entries: Counter = Counter()
    coverage: Counter = Counter()
    for r in results:
        h = r.home.tile_id if r.home else None
        w = r.work.tile_id if r.work else None
        if h is not None and w is not None:
            entries[(h, w)] += 1
        elif h is None and w is None:
            coverage["no_home_or_work_tile"] += 1
        elif h is None:
            coverage["no_home_tile"] += 1
        else:
            coverage["no_work_tile"] += 1
    return ODMatrix(dict(entries), sum(entries.values()), coverage)
