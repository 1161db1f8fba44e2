"""Hour-of-week activity profiles per tile and agglomerative land-use clustering."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .core import HOURS_PER_WEEK, ConfigError, LocalClock, hour_of_week
from .engine import PartitionedDataset, count_distinct, count_rows, map_partitions, reduce_by_key
from .spatial import Tessellation, assign_tiles

logger = logging.getLogger(__name__)

BIN_COLUMNS = [f"h{i}" for i in range(HOURS_PER_WEEK)]
COUNT_MODES = ("pings", "distinct_users")
LINKAGES = ("ward", "average")


def _tagged(tess, clock):
    def tag(df):
        tiles = assign_tiles(df["lon"].to_numpy(), df["lat"].to_numpy(), tess)
        hit = np.array([t is not None for t in tiles], dtype=bool)
        return pd.DataFrame({
            "tile_id": tiles[hit].astype(object),
            "how": hour_of_week(df["timestamp"].to_numpy()[hit], clock).astype(np.int64),
            "user_id": df["user_id"].to_numpy()[hit],
        })

    return tag


def tile_activity_profiles(ds: PartitionedDataset, tess: Tessellation, clock: LocalClock = LocalClock(),
                           count_mode: str = "pings") -> pd.DataFrame:
    """168-bin hour-of-week counts per tile.

    Columns: tile_id, h0..h167, total_events, users (distinct users seen in
    the tile). Tiles without events are omitted; pings outside every tile are
    ignored. With count_mode="distinct_users" a bin counts distinct users
    rather than pings.
    """
    if count_mode not in COUNT_MODES:
        raise ConfigError(f"count_mode must be one of {COUNT_MODES}")
    tagged = map_partitions(ds, _tagged(tess, clock),
                            schema={"tile_id": "object", "how": "int64", "user_id": "object"})
    # reduce per (tile, bin) rather than per tile so a busy tile never has to
    # fit in one partition
    if count_mode == "pings":
        bins = reduce_by_key(tagged, ["tile_id", "how"], count_rows("n"))
    else:
        bins = count_distinct(tagged, ["tile_id", "how"], "user_id", "n")
    if bins.empty:
        return pd.DataFrame(columns=["tile_id", *BIN_COLUMNS, "total_events", "users"])
    users = count_distinct(tagged, "tile_id", "user_id", "users").set_index("tile_id")["users"]
    wide = bins.set_index(["tile_id", "how"])["n"].unstack("how", fill_value=0)
    wide = wide.reindex(columns=range(HOURS_PER_WEEK), fill_value=0).sort_index()
    wide.columns = BIN_COLUMNS
    wide = wide.astype(np.int64)
    wide["total_events"] = wide[BIN_COLUMNS].sum(axis=1)
    wide["users"] = users.reindex(wide.index).astype(np.int64)
    return wide.rename_axis("tile_id").reset_index()[["tile_id", *BIN_COLUMNS, "total_events", "users"]]


def normalize_profiles(profiles: pd.DataFrame) -> pd.DataFrame:
    """Scale each profile's bins to sum to one; zero-total profiles are dropped with a warning."""
    bins = profiles[BIN_COLUMNS].to_numpy(dtype=np.float64)
    sums = bins.sum(axis=1)
    empty = sums <= 0
    if empty.any():
        logger.warning("dropping %d profile(s) with no events: %s", int(empty.sum()),
                       list(profiles.loc[empty, "tile_id"])[:5])
    out = profiles.loc[~empty].copy()
    out[BIN_COLUMNS] = bins[~empty] / sums[~empty, None]
    return out.reset_index(drop=True)


@dataclass
class LandUseClustering:
    labels: dict
    merge_tree: list
    k: int
    tile_ids: list

    def labels_frame(self) -> pd.DataFrame:
        return pd.DataFrame(sorted(self.labels.items()), columns=["tile_id", "cluster"])

    def merge_tree_frame(self) -> pd.DataFrame:
        """Merge steps; leaves are named by tile_id, the cluster formed at step s by ``m<s>``."""
        n = len(self.tile_ids)

        def name(node):
            return self.tile_ids[node] if node < n else f"m{node - n}"

        return pd.DataFrame(
            [(s, name(a), name(b), d) for s, (a, b, d) in enumerate(self.merge_tree)],
            columns=["step", "left", "right", "distance"],
        )


def _ward_nn_chain(x: np.ndarray):
    """Ward merges via the nearest-neighbour chain, using centroids and sizes.

    The Ward distance between clusters A and B is
    sqrt(2 |A| |B| / (|A| + |B|)) * ||centroid(A) - centroid(B)||, which for
    singletons is the Euclidean distance. Ties in the neighbour search go to
    the cluster whose smallest member index is lowest. Returns unsorted
    (rep_a, rep_b, distance) triples where rep is each side's smallest
    leaf index.
    """
    n = len(x)
    centroid = x.astype(np.float64).copy()
    size = np.ones(n, dtype=np.float64)
    rep = np.arange(n)
    alive = np.ones(n, dtype=bool)
    merges = []
    chain: list[int] = []
    while len(merges) < n - 1:
        if not chain:
            chain.append(int(np.flatnonzero(alive)[0]))
        top = chain[-1]
        others = np.flatnonzero(alive)
        others = others[others != top]
        diff = centroid[others] - centroid[top]
        d = np.sqrt(2 * size[others] * size[top] / (size[others] + size[top])) * np.sqrt((diff ** 2).sum(axis=1))
        best = d.min()
        tied = others[d == best]
        prev = chain[-2] if len(chain) > 1 else None
        nxt = prev if prev is not None and prev in tied else int(tied[np.argmin(rep[tied])])
        if nxt == prev:
            chain.pop()
            chain.pop()
            a, b = sorted((top, nxt), key=lambda i: rep[i])
            merges.append((int(rep[a]), int(rep[b]), float(best)))
            total = size[a] + size[b]
            centroid[a] = (centroid[a] * size[a] + centroid[b] * size[b]) / total
            size[a] = total
            alive[b] = False
        else:
            chain.append(nxt)
    return merges


def _build_tree(n, merges):
    """Sort merges by (distance, reps) and renumber as scipy-style node ids."""
    merges = sorted(merges, key=lambda m: (m[2], m[0], m[1]))
    parent = list(range(n))
    node_of = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    tree = []
    for step, (ra, rb, dist) in enumerate(merges):
        a, b = find(ra), find(rb)
        na, nb = sorted((node_of[a], node_of[b]))
        tree.append((na, nb, dist))
        root, child = (a, b) if a < b else (b, a)
        parent[child] = root
        node_of[root] = n + step
    return tree


def _cut(n, tree, k):
    parent = list(range(2 * n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for step, (a, b, _) in enumerate(tree[: n - k]):
        parent[find(a)] = n + step
        parent[find(b)] = n + step
    return [find(i) for i in range(n)]


def hierarchical_cluster(profiles: pd.DataFrame, k: int, linkage: str = "ward",
                         metric: str = "euclidean") -> LandUseClustering:
    """Agglomerative clustering of normalized profiles into `k` land-use classes.

    Ward linkage on Euclidean distance is the default; average linkage (with
    any scipy metric, e.g. cosine) is available as an alternative. Labels
    are numbered by decreasing cluster size, ties by smallest tile_id.
    """
    ordered = profiles.sort_values("tile_id", kind="stable").reset_index(drop=True)
    tile_ids = [str(t) for t in ordered["tile_id"]]
    n = len(tile_ids)
    if not 1 <= k <= n:
        raise ConfigError(f"k must lie in [1, {n}], got {k}")
    x = ordered[BIN_COLUMNS].to_numpy(dtype=np.float64)
    if linkage == "ward":
        if metric != "euclidean":
            raise ConfigError("ward linkage requires the euclidean metric")
        tree = _build_tree(n, _ward_nn_chain(x)) if n > 1 else []
    elif linkage == "average":
        from scipy.cluster.hierarchy import linkage as scipy_linkage

        z = scipy_linkage(x, method="average", metric=metric) if n > 1 else np.zeros((0, 4))
        tree = [(int(a), int(b), float(d)) for a, b, d, _ in z]
    else:
        raise ConfigError(f"linkage must be one of {LINKAGES}")

    roots = _cut(n, tree, k)
    groups: dict[int, list[int]] = {}
    for leaf, root in enumerate(roots):
        groups.setdefault(root, []).append(leaf)
    ranked = sorted(groups.values(), key=lambda members: (-len(members), members[0]))
    labels = {tile_ids[leaf]: c for c, members in enumerate(ranked) for leaf in members}
    return LandUseClustering(labels, tree, k, tile_ids)


def cluster_signatures(profiles: pd.DataFrame, clustering: LandUseClustering) -> pd.DataFrame:
    """Mean normalized profile per cluster (columns cluster, tiles, h0..h167)."""
    missing = set(profiles["tile_id"]) - set(clustering.labels)
    if missing:
        raise ValueError(f"{len(missing)} profile(s) not covered by the clustering")
    labelled = profiles.assign(cluster=profiles["tile_id"].map(clustering.labels))
    means = labelled.groupby("cluster", sort=True)[BIN_COLUMNS].mean()
    means.insert(0, "tiles", labelled.groupby("cluster", sort=True).size())
    return means.reset_index()
