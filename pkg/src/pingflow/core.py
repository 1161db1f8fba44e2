"""Shared domain types and local-time arithmetic.

Times are integer epoch seconds (UTC). Local time is a fixed UTC offset for
the whole run; there is no DST handling. Weekdays count from Monday = 0.
Internally, local calendar dates are carried as integer day numbers since
1970-01-01 so they vectorize cleanly; `day_to_date` converts for output.
"""
from __future__ import annotations

import datetime as _dt
import math
from dataclasses import dataclass, field

import numpy as np

SECONDS_PER_DAY = 86_400
SECONDS_PER_WEEK = 7 * SECONDS_PER_DAY
HOURS_PER_WEEK = 168
# 1970-01-01 was a Thursday.
_EPOCH_WEEKDAY = 3
# Above this an epoch timestamp is taken to be in milliseconds.
MS_THRESHOLD = 10**11

_EPOCH_DATE = _dt.date(1970, 1, 1)


class ConfigError(ValueError):
    """A configuration or parameter value violates its contract."""


@dataclass(frozen=True)
class Ping:
    user_id: str
    timestamp_utc: int
    lat: float
    lon: float
    accuracy_m: float | None = None

    def __post_init__(self):
        if not self.user_id:
            raise ValueError("user_id must be non-empty")
        if not (-90.0 <= self.lat <= 90.0) or not (-180.0 <= self.lon <= 180.0):
            raise ValueError(f"coordinate out of range: lat={self.lat} lon={self.lon}")
        if self.accuracy_m is not None and not self.accuracy_m >= 0:
            raise ValueError(f"negative accuracy: {self.accuracy_m}")


@dataclass(frozen=True)
class LocalClock:
    utc_offset_minutes: int = 0

    def __post_init__(self):
        if not -720 <= self.utc_offset_minutes <= 840:
            raise ConfigError(f"UTC offset {self.utc_offset_minutes} min outside [-720, 840]")

    @property
    def offset_seconds(self) -> int:
        return self.utc_offset_minutes * 60


@dataclass(frozen=True)
class TimeWindow:
    """Half-open interval [start_utc, end_utc) of epoch seconds."""

    start_utc: int
    end_utc: int

    def __post_init__(self):
        if not self.start_utc < self.end_utc:
            raise ConfigError(f"empty time window [{self.start_utc}, {self.end_utc})")

    def contains(self, ts):
        return (ts >= self.start_utc) & (ts < self.end_utc)

    def local_days(self, clock: LocalClock) -> np.ndarray:
        """Local day numbers touched by the window, in order."""
        first = local_day(self.start_utc, clock)
        last = local_day(self.end_utc - 1, clock)
        return np.arange(first, last + 1, dtype=np.int64)


DEFAULT_HOME_HOURS = frozenset({22, 23, 0, 1, 2, 3, 4, 5})
DEFAULT_WORK_HOURS = frozenset(range(9, 17))
DEFAULT_WORK_DAYS = frozenset(range(5))


@dataclass(frozen=True)
class DaySchedule:
    home_hours: frozenset = field(default=DEFAULT_HOME_HOURS)
    work_hours: frozenset = field(default=DEFAULT_WORK_HOURS)
    work_days: frozenset = field(default=DEFAULT_WORK_DAYS)

    def __post_init__(self):
        object.__setattr__(self, "home_hours", frozenset(int(h) for h in self.home_hours))
        object.__setattr__(self, "work_hours", frozenset(int(h) for h in self.work_hours))
        object.__setattr__(self, "work_days", frozenset(int(d) for d in self.work_days))
        if not self.home_hours or not self.work_hours:
            raise ConfigError("home_hours and work_hours must be non-empty")
        if self.home_hours & self.work_hours:
            raise ConfigError(f"home and work hours overlap: {sorted(self.home_hours & self.work_hours)}")
        if not all(0 <= h <= 23 for h in self.home_hours | self.work_hours):
            raise ConfigError("hours must lie in [0, 23]")
        if not all(0 <= d <= 6 for d in self.work_days):
            raise ConfigError("work_days must lie in [0, 6]")


def local_day(ts, clock: LocalClock):
    """Local day number (days since 1970-01-01) for scalar or array timestamps."""
    if isinstance(ts, np.ndarray):
        return (ts.astype(np.int64) + clock.offset_seconds) // SECONDS_PER_DAY
    return (int(ts) + clock.offset_seconds) // SECONDS_PER_DAY


def local_fields(ts: np.ndarray, clock: LocalClock):
    """Vectorized (day number, hour, weekday) for an array of timestamps."""
    local = np.asarray(ts, dtype=np.int64) + clock.offset_seconds
    days = local // SECONDS_PER_DAY
    hours = (local % SECONDS_PER_DAY) // 3600
    weekdays = (days + _EPOCH_WEEKDAY) % 7
    return days, hours, weekdays


def day_to_date(day: int) -> _dt.date:
    return _EPOCH_DATE + _dt.timedelta(days=int(day))


def date_to_day(date: _dt.date) -> int:
    return (date - _EPOCH_DATE).days


def to_local(timestamp_utc: int, clock: LocalClock) -> tuple[_dt.date, int, int]:
    """Return (local date, local hour, weekday with Monday = 0)."""
    local = int(timestamp_utc) + clock.offset_seconds
    day, rem = divmod(local, SECONDS_PER_DAY)
    return day_to_date(day), rem // 3600, (day + _EPOCH_WEEKDAY) % 7


def hour_of_week(timestamp_utc, clock: LocalClock):
    """Hour index within the local week, 0 = Monday 00:00-00:59, 167 = Sunday 23:00-23:59.

    Accepts a scalar or a numpy array.
    """
    if isinstance(timestamp_utc, np.ndarray):
        _, hours, weekdays = local_fields(timestamp_utc, clock)
        return weekdays * 24 + hours
    _, hour, weekday = to_local(timestamp_utc, clock)
    return weekday * 24 + hour


def from_local(date: _dt.date, hour: int, minute: int, second: int, clock: LocalClock) -> int:
    """Inverse of `to_local` at second resolution."""
    return date_to_day(date) * SECONDS_PER_DAY + hour * 3600 + minute * 60 + second - clock.offset_seconds


def normalize_timestamp(value: float, unit: str = "auto") -> int:
    """Convert a raw timestamp to epoch seconds; `unit` is seconds, milliseconds or auto."""
    if unit == "milliseconds" or (unit == "auto" and abs(value) > MS_THRESHOLD):
        return int(math.floor(value / 1000))
    return int(math.floor(value))
