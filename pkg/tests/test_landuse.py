import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.cluster.hierarchy import fcluster
from scipy.cluster.hierarchy import linkage as scipy_linkage

from pingflow.core import ConfigError, LocalClock
from pingflow.ingest import pings_from_frame
from pingflow.landuse import (BIN_COLUMNS, cluster_signatures, hierarchical_cluster, normalize_profiles,
                              tile_activity_profiles)
from pingflow.spatial import make_grid
from pingflow.synth import DEFAULT_START, random_pings

from . import oracles

BBOX = (-99.25, 19.25, -98.95, 19.55)


def profile_frame(x, prefix="t"):
    df = pd.DataFrame(x, columns=BIN_COLUMNS)
    df.insert(0, "tile_id", [f"{prefix}{i:03d}" for i in range(len(x))])
    return df


def partition(labels):
    groups = {}
    for tile, c in labels.items():
        groups.setdefault(c, set()).add(tile)
    return {frozenset(g) for g in groups.values()}


# --------------------------------------------------------------------------
# profiles

def test_monday_half_past_midnight_is_bin_zero(engine):
    tess = make_grid((0, 0, 0.01, 0.01), 5000)
    df = pd.DataFrame({"user_id": ["u"], "timestamp": [DEFAULT_START + 1800], "lat": [0.005], "lon": [0.005]})
    prof = tile_activity_profiles(pings_from_frame(df, engine), tess)
    assert len(prof) == 1
    assert prof.iloc[0]["h0"] == 1 and prof.iloc[0][BIN_COLUMNS].sum() == 1
    assert prof.iloc[0]["total_events"] == 1 and prof.iloc[0]["users"] == 1


def test_pings_outside_tiles_ignored(engine):
    tess = make_grid((0, 0, 0.01, 0.01), 5000)
    df = pd.DataFrame({"user_id": ["u", "v"], "timestamp": [DEFAULT_START] * 2, "lat": [0.005, 5.0],
                       "lon": [0.005, 5.0]})
    prof = tile_activity_profiles(pings_from_frame(df, engine), tess)
    assert prof["total_events"].sum() == 1
    df = df.iloc[1:]
    assert tile_activity_profiles(pings_from_frame(df, engine), tess).empty


def test_bad_count_mode(engine):
    with pytest.raises(ConfigError):
        tile_activity_profiles(pings_from_frame(random_pings(2, 10), engine), make_grid(BBOX, 5000), count_mode="x")


@pytest.mark.parametrize("workers,count_mode", [(1, "pings"), (8, "pings"), (2, "distinct_users")])
def test_profiles_match_oracle(make_engine, workers, count_mode):
    df = random_pings(400, 100_000, seed=31)
    tess = make_grid(BBOX, 5000)
    eng = make_engine(workers, max_partition_rows=7_000)
    got = tile_activity_profiles(pings_from_frame(df, eng), tess, LocalClock(-360), count_mode)
    expect = oracles.activity_profiles(df, oracles.tiles_of(tess), -360, count_mode == "distinct_users")
    assert got["tile_id"].tolist() == sorted(expect)
    for row in got.itertuples(index=False):
        vec, total, users = expect[row.tile_id]
        assert list(row[1:169]) == vec
        assert (row.total_events, row.users) == (total, users)
    if count_mode == "pings":
        inside = sum(total for _, total, _ in expect.values())
        assert got[BIN_COLUMNS].to_numpy().sum() == inside < len(df)


# --------------------------------------------------------------------------
# normalization

def test_normalize_example_and_idempotent():
    x = np.zeros((2, 168))
    x[0, :2] = 2
    x[1, 5] = 7
    norm = normalize_profiles(profile_frame(x))
    assert norm.iloc[0]["h0"] == 0.5 and norm.iloc[0]["h1"] == 0.5
    assert norm.iloc[1]["h5"] == 1.0
    pd.testing.assert_frame_equal(normalize_profiles(norm), norm)


def test_normalize_drops_empty(caplog):
    x = np.zeros((2, 168))
    x[0, 3] = 1
    norm = normalize_profiles(profile_frame(x))
    assert norm["tile_id"].tolist() == ["t000"]
    assert "dropping 1" in caplog.text


@settings(max_examples=30)
@given(st.integers(0, 10_000), st.integers(1, 12))
def test_normalized_rows_sum_to_one(seed, n):
    x = np.random.default_rng(seed).poisson(2.0, (n, 168))
    x[:, 0] += 1
    norm = normalize_profiles(profile_frame(x))
    np.testing.assert_allclose(norm[BIN_COLUMNS].sum(axis=1), 1.0, rtol=1e-12)
    assert (norm[BIN_COLUMNS].to_numpy() >= 0).all()


# --------------------------------------------------------------------------
# clustering

def random_profiles(seed, n):
    x = np.random.default_rng(seed).gamma(1.0, 1.0, (n, 168))
    return normalize_profiles(profile_frame(x))


def test_k_extremes():
    prof = random_profiles(0, 12)
    assert set(hierarchical_cluster(prof, 1).labels.values()) == {0}
    assert sorted(hierarchical_cluster(prof, 12).labels.values()) == list(range(12))
    with pytest.raises(ConfigError):
        hierarchical_cluster(prof, 13)
    with pytest.raises(ConfigError):
        hierarchical_cluster(prof, 0)
    with pytest.raises(ConfigError):
        hierarchical_cluster(prof, 2, linkage="single")
    with pytest.raises(ConfigError):
        hierarchical_cluster(prof, 2, metric="cosine")


def test_single_tile():
    c = hierarchical_cluster(random_profiles(0, 1), 1)
    assert c.labels == {"t000": 0} and c.merge_tree == []


@settings(max_examples=20)
@given(st.integers(0, 10_000), st.integers(2, 30), st.data())
def test_ward_equals_scipy(seed, n, data):
    prof = random_profiles(seed, n)
    k = data.draw(st.integers(1, n))
    ours = hierarchical_cluster(prof, k)
    z = scipy_linkage(prof[BIN_COLUMNS].to_numpy(), method="ward")
    np.testing.assert_allclose([d for _, _, d in ours.merge_tree], z[:, 2], rtol=1e-9)
    ref = fcluster(z, k, criterion="maxclust")
    assert partition(ours.labels) == partition(dict(zip(prof["tile_id"], ref)))


@settings(max_examples=20)
@given(st.integers(0, 10_000), st.integers(2, 25), st.sampled_from(["euclidean", "cosine"]))
def test_average_linkage_matches_scipy(seed, n, metric):
    prof = random_profiles(seed, n)
    k = max(1, n // 3)
    ours = hierarchical_cluster(prof, k, linkage="average", metric=metric)
    ref = fcluster(scipy_linkage(prof[BIN_COLUMNS].to_numpy(), method="average", metric=metric), k, "maxclust")
    assert partition(ours.labels) == partition(dict(zip(prof["tile_id"], ref)))


@settings(max_examples=20)
@given(st.integers(0, 10_000), st.integers(2, 30))
def test_merge_distances_non_decreasing(seed, n):
    tree = hierarchical_cluster(random_profiles(seed, n), 1).merge_tree_frame()
    assert len(tree) == n - 1
    assert (np.diff(tree["distance"]) >= 0).all()
    assert tree["right"].iloc[-1].startswith("m") or n == 2


@settings(max_examples=20)
@given(st.integers(0, 10_000), st.integers(2, 25), st.randoms(use_true_random=False))
def test_clustering_permutation_invariant(seed, n, rnd):
    prof = random_profiles(seed, n)
    perm = list(range(n))
    rnd.shuffle(perm)
    a = hierarchical_cluster(prof, max(1, n // 4))
    b = hierarchical_cluster(prof.iloc[perm], max(1, n // 4))
    assert a.labels == b.labels
    pd.testing.assert_frame_equal(a.merge_tree_frame(), b.merge_tree_frame())


def test_labels_ranked_by_size():
    x = np.zeros((6, 168))
    x[:4, 10] = 1  # four identical tiles
    x[4:, 100] = 1
    c = hierarchical_cluster(normalize_profiles(profile_frame(x)), 2)
    assert [c.labels[f"t{i:03d}"] for i in range(6)] == [0, 0, 0, 0, 1, 1]


# --------------------------------------------------------------------------
# signatures

def test_signatures_are_cluster_means():
    prof = random_profiles(3, 15)
    c = hierarchical_cluster(prof, 3)
    sig = cluster_signatures(prof, c)
    assert sig["tiles"].sum() == 15
    for row in sig.itertuples(index=False):
        members = [t for t, lab in c.labels.items() if lab == row.cluster]
        naive = prof.set_index("tile_id").loc[members, BIN_COLUMNS].to_numpy().mean(axis=0)
        np.testing.assert_allclose(list(row[2:]), naive, rtol=1e-12)
        assert row.tiles == len(members)


def test_signatures_need_labels():
    prof = random_profiles(3, 5)
    c = hierarchical_cluster(prof.iloc[:4], 2)
    with pytest.raises(ValueError):
        cluster_signatures(prof, c)
