"""Synthetic ping corpora with known ground truth."""
from __future__ import annotations

import numpy as np
import pandas as pd

from .core import SECONDS_PER_DAY, DaySchedule, LocalClock
from .spatial import from_local_xy, to_local_xy

# 2023-01-02T00:00:00Z, a Monday
DEFAULT_START = 1_672_617_600


def user_ids(n: int) -> np.ndarray:
    width = max(4, len(str(n - 1)))
    return np.array([f"u{i:0{width}d}" for i in range(n)], dtype=object)


def random_pings(n_users: int, n_pings: int, bbox=(-99.3, 19.2, -98.9, 19.6), start_utc=DEFAULT_START,
                 days: int = 28, seed: int = 0, accuracy_missing: float = 0.2) -> pd.DataFrame:
    """Uniform pings: random users, times and positions; some accuracies missing."""
    rng = np.random.default_rng(seed)
    ids = user_ids(n_users)
    acc = rng.gamma(2.0, 20.0, n_pings)
    acc[rng.random(n_pings) < accuracy_missing] = np.nan
    return pd.DataFrame({
        "user_id": ids[rng.integers(0, n_users, n_pings)],
        "timestamp": start_utc + rng.integers(0, days * SECONDS_PER_DAY, n_pings),
        "lat": rng.uniform(bbox[1], bbox[3], n_pings),
        "lon": rng.uniform(bbox[0], bbox[2], n_pings),
        "accuracy": acc,
    })


def jitter(lon, lat, sigma_m, rng):
    """Gaussian jitter of `sigma_m` meters per axis around each point."""
    lon = np.asarray(lon, dtype=np.float64)
    lat = np.asarray(lat, dtype=np.float64)
    dx = rng.normal(0, sigma_m, lon.shape)
    dy = rng.normal(0, sigma_m, lat.shape)
    return from_local_xy(dx, dy, lon, lat)


def _local_ts(rng, day0_utc, clock, hours, count):
    """`count` timestamps on the local day starting at `day0_utc` local midnight, in the given hours."""
    hours = np.asarray(sorted(hours))
    h = hours[rng.integers(0, len(hours), count)]
    return day0_utc - clock.offset_seconds + h * 3600 + rng.integers(0, 3600, count)


def planted_commuters(n_users: int, bbox=(-99.25, 19.25, -98.95, 19.55), start_utc=DEFAULT_START,
                      days: int = 21, clock: LocalClock = LocalClock(), schedule: DaySchedule = DaySchedule(),
                      night_pings: int = 4, work_pings: int = 4, other_pings: int = 2,
                      jitter_m: float = 30.0, min_separation_m: float = 2000.0, seed: int = 0):
    """Users with a planted home and work anchor.

    Night-hour pings scatter around home, weekday work-hour pings around
    work, and evening pings land anywhere in the bbox. Returns
    ``(pings, anchors)``.
    """
    rng = np.random.default_rng(seed)
    ids = user_ids(n_users)
    home_lon = rng.uniform(bbox[0], bbox[2], n_users)
    home_lat = rng.uniform(bbox[1], bbox[3], n_users)
    work_lon = np.empty(n_users)
    work_lat = np.empty(n_users)
    for i in range(n_users):
        while True:
            wl, wt = rng.uniform(bbox[0], bbox[2]), rng.uniform(bbox[1], bbox[3])
            x, y = to_local_xy(wl, wt, home_lon[i], home_lat[i])
            if np.hypot(x, y) >= min_separation_m:
                break
        work_lon[i], work_lat[i] = wl, wt
    other_hours = set(range(24)) - set(schedule.home_hours) - set(schedule.work_hours)
    frames = []
    for i in range(n_users):
        ts_all, lon_all, lat_all = [], [], []
        for d in range(days):
            day0 = start_utc + d * SECONDS_PER_DAY
            weekday = (day0 // SECONDS_PER_DAY + 3) % 7
            ts = _local_ts(rng, day0, clock, schedule.home_hours, night_pings)
            lo, la = jitter(np.full(night_pings, home_lon[i]), np.full(night_pings, home_lat[i]), jitter_m, rng)
            ts_all.append(ts), lon_all.append(lo), lat_all.append(la)
            if weekday in schedule.work_days:
                ts = _local_ts(rng, day0, clock, schedule.work_hours, work_pings)
                lo, la = jitter(np.full(work_pings, work_lon[i]), np.full(work_pings, work_lat[i]), jitter_m, rng)
                ts_all.append(ts), lon_all.append(lo), lat_all.append(la)
            if other_pings and other_hours:
                ts_all.append(_local_ts(rng, day0, clock, other_hours, other_pings))
                lon_all.append(rng.uniform(bbox[0], bbox[2], other_pings))
                lat_all.append(rng.uniform(bbox[1], bbox[3], other_pings))
        ts = np.concatenate(ts_all)
        frames.append(pd.DataFrame({"user_id": ids[i], "timestamp": ts.astype(np.int64),
                                    "lat": np.concatenate(lat_all), "lon": np.concatenate(lon_all)}))
    pings = pd.concat(frames, ignore_index=True)
    pings["accuracy"] = np.nan
    anchors = pd.DataFrame({"user_id": ids, "home_lon": home_lon, "home_lat": home_lat,
                            "work_lon": work_lon, "work_lat": work_lat})
    return pings, anchors


def displacement_scenario(ring_users=(300, 400, 300), ring_relocated=(90, 80, 30), ring_bands_km=((1, 4), (6, 14), (16, 30)),
                          epicenter=(-99.13, 19.43), start_utc=DEFAULT_START, baseline_days=14,
                          observation_days=7, clock: LocalClock = LocalClock(), nightly_pings=3,
                          jitter_m=30.0, relocation_km=10.0, seed=0):
    """Users sleeping at home every night; a planted subset relocates after the event.

    Homes are placed at a random bearing inside each ring band around the
    epicenter; relocated users sleep `relocation_km` away from home on every
    observation night. Returns ``(pings, truth, times)`` with truth columns
    user_id, ring, relocated, home_lon, home_lat and times a dict of
    baseline_start, event, observation_end.
    """
    rng = np.random.default_rng(seed)
    n = sum(ring_users)
    ids = user_ids(n)
    ring = np.repeat(np.arange(len(ring_users)), ring_users)
    relocated = np.zeros(n, dtype=bool)
    offset = 0
    for r, (count, moved) in enumerate(zip(ring_users, ring_relocated)):
        relocated[offset:offset + moved] = True
        offset += count
    lo_km = np.array([ring_bands_km[r][0] for r in ring])
    hi_km = np.array([ring_bands_km[r][1] for r in ring])
    dist = rng.uniform(lo_km, hi_km) * 1000
    theta = rng.uniform(0, 2 * np.pi, n)
    home_lon, home_lat = from_local_xy(dist * np.cos(theta), dist * np.sin(theta), *epicenter)
    phi = rng.uniform(0, 2 * np.pi, n)
    away_lon, away_lat = from_local_xy(relocation_km * 1000 * np.cos(phi), relocation_km * 1000 * np.sin(phi),
                                       home_lon, home_lat)
    event = start_utc + baseline_days * SECONDS_PER_DAY - clock.offset_seconds
    night_hours = (22, 23, 0, 1, 2, 3)
    frames = []
    for d in range(baseline_days + observation_days):
        day0 = start_utc + d * SECONDS_PER_DAY
        post = d >= baseline_days
        for j in range(nightly_pings):
            # the first ping of every night is in the evening, so each night is observed
            hours = night_hours[:2] if j == 0 else night_hours
            h = np.asarray(hours)[rng.integers(0, len(hours), n)]
            # early-morning hours belong to the previous evening's night
            ts = day0 - clock.offset_seconds + h * 3600 + np.where(h < 12, SECONDS_PER_DAY, 0) \
                + rng.integers(0, 3600, n)
            at_lon = np.where(post & relocated, away_lon, home_lon)
            at_lat = np.where(post & relocated, away_lat, home_lat)
            lo, la = jitter(at_lon, at_lat, jitter_m, rng)
            keep = ts < event + observation_days * SECONDS_PER_DAY
            frames.append(pd.DataFrame({"user_id": ids[keep], "timestamp": ts[keep].astype(np.int64),
                                        "lat": la[keep], "lon": lo[keep]}))
    pings = pd.concat(frames, ignore_index=True)
    pings["accuracy"] = np.nan
    truth = pd.DataFrame({"user_id": ids, "ring": ring, "relocated": relocated,
                          "home_lon": home_lon, "home_lat": home_lat})
    times = {"baseline_start": start_utc - clock.offset_seconds, "event": int(event),
             "observation_end": int(event + observation_days * SECONDS_PER_DAY)}
    return pings, truth, times
