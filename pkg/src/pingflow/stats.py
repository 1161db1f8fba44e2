"""Per-user activity statistics and user selection."""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
import pandas as pd

from .core import ConfigError, LocalClock, local_day
from .engine import Aggregator, PartitionedDataset, map_partitions, reduce_by_key

STATS_COLUMNS = ["user_id", "total_pings", "active_days", "span_days", "avg_pings_per_active_day"]


class ConsistencyError(RuntimeError):
    pass


@dataclass(frozen=True)
class UserFilterCriteria:
    min_active_days: int | None = None
    min_total_pings: int | None = None
    min_avg_pings_per_day: float | None = None
    min_span_days: int | None = None

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v is not None and v < 0:
                raise ConfigError(f"{f.name} must be >= 0, got {v}")

    def mask(self, stats: pd.DataFrame) -> np.ndarray:
        keep = np.ones(len(stats), dtype=bool)
        if self.min_active_days is not None:
            keep &= stats["active_days"].to_numpy() >= self.min_active_days
        if self.min_total_pings is not None:
            keep &= stats["total_pings"].to_numpy() >= self.min_total_pings
        if self.min_avg_pings_per_day is not None:
            keep &= stats["avg_pings_per_active_day"].to_numpy() >= self.min_avg_pings_per_day
        if self.min_span_days is not None:
            keep &= stats["span_days"].to_numpy() >= self.min_span_days
        return keep


def _day_counts(clock):
    # Mergeable summary: pings per (user, local day). Summing duplicates is
    # associative and commutative, so partials from any partitioning agree.
    def partial(df):
        days = local_day(df["timestamp"].to_numpy(), clock)
        return (pd.DataFrame({"user_id": df["user_id"].to_numpy(), "day": days})
                .groupby(["user_id", "day"], sort=False).size().rename("n").reset_index())

    def merge(df):
        return df.groupby(["user_id", "day"], sort=False)["n"].sum().reset_index()

    def finalize(df):
        g = df.groupby("user_id", sort=False)
        out = pd.DataFrame({
            "total_pings": g["n"].sum(),
            "active_days": g.size(),
            "span_days": g["day"].max() - g["day"].min() + 1,
        }).reset_index()
        out["avg_pings_per_active_day"] = out["total_pings"] / out["active_days"]
        return out.astype({"total_pings": "int64", "active_days": "int64", "span_days": "int64"})

    return Aggregator(partial, merge, finalize)


def user_stats(ds: PartitionedDataset, clock: LocalClock = LocalClock()) -> pd.DataFrame:
    """One row per user: total pings, active local days, span in days and pings per active day."""
    table = reduce_by_key(ds, "user_id", _day_counts(clock))
    return table[STATS_COLUMNS]


def qualifying_users(stats: pd.DataFrame, criteria: UserFilterCriteria) -> frozenset:
    return frozenset(stats.loc[criteria.mask(stats), "user_id"])


def filter_users(ds: PartitionedDataset, stats: pd.DataFrame, criteria: UserFilterCriteria) -> PartitionedDataset:
    """Restrict `ds` to users meeting every threshold in `criteria`.

    Every user in `ds` must appear in `stats`; this is checked up front.
    """
    known = set(stats["user_id"])
    present = reduce_by_key(map_partitions(ds, lambda df: df[["user_id"]].drop_duplicates()), "user_id",
                            Aggregator(lambda df: df.drop_duplicates(), lambda df: df.drop_duplicates()))
    missing = sorted(set(present["user_id"]) - known)
    if missing:
        raise ConsistencyError(f"{len(missing)} user(s) missing from stats, e.g. {missing[:3]}")
    keep = qualifying_users(stats, criteria)
    if len(keep) == len(known):
        return ds

    def apply(df):
        return df[df["user_id"].isin(keep)].reset_index(drop=True)

    return map_partitions(ds, apply, schema=dict(ds.record_schema))
