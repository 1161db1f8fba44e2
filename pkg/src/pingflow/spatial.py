"""Tessellations, tile assignment, regular grids and great-circle distance.

Containment is the planar even-odd rule in lon/lat space with boundary
points counted as inside. When several tiles contain a point (shared edges,
overlaps) the lexicographically smallest tile_id wins.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .core import ConfigError

EARTH_RADIUS_M = 6_371_000.0
METERS_PER_DEGREE = 111_320.0


class TessellationError(ValueError):
    pass


def haversine_m(lon1, lat1, lon2, lat2):
    """Great-circle distance in meters; scalars or broadcastable arrays."""
    lon1, lat1, lon2, lat2 = (np.radians(np.asarray(v, dtype=np.float64)) for v in (lon1, lat1, lon2, lat2))
    a = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    d = 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))
    return float(d) if d.ndim == 0 else d


def to_local_xy(lon, lat, lon0, lat0):
    """Equirectangular projection to meters east/north of (lon0, lat0)."""
    k = math.pi / 180 * EARTH_RADIUS_M
    x = (np.asarray(lon, dtype=np.float64) - lon0) * k * np.cos(np.radians(lat0))
    y = (np.asarray(lat, dtype=np.float64) - lat0) * k
    return x, y


def from_local_xy(x, y, lon0, lat0):
    k = math.pi / 180 * EARTH_RADIUS_M
    lon = lon0 + np.asarray(x, dtype=np.float64) / (k * np.cos(np.radians(lat0)))
    lat = lat0 + np.asarray(y, dtype=np.float64) / k
    return lon, lat


# --------------------------------------------------------------------------
# geometry primitives

def _orient(ax, ay, bx, by, cx, cy):
    v = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
    return (v > 0) - (v < 0)


def _on_segment(ax, ay, bx, by, cx, cy):
    return min(ax, bx) <= cx <= max(ax, bx) and min(ay, by) <= cy <= max(ay, by)


def segments_intersect(p1, p2, p3, p4) -> bool:
    """True if closed segments p1p2 and p3p4 share at least one point."""
    o1 = _orient(*p1, *p2, *p3)
    o2 = _orient(*p1, *p2, *p4)
    o3 = _orient(*p3, *p4, *p1)
    o4 = _orient(*p3, *p4, *p2)
    if o1 != o2 and o3 != o4:
        return True
    return (
        (o1 == 0 and _on_segment(*p1, *p2, *p3))
        or (o2 == 0 and _on_segment(*p1, *p2, *p4))
        or (o3 == 0 and _on_segment(*p3, *p4, *p1))
        or (o4 == 0 and _on_segment(*p3, *p4, *p2))
    )


def ring_self_intersects(ring: np.ndarray) -> bool:
    """Sweep over segments ordered by min x; adjacent segments may share their common vertex only."""
    pts = [tuple(map(float, p)) for p in ring]
    segs = [(pts[i], pts[i + 1]) for i in range(len(pts) - 1)]
    n = len(segs)
    order = sorted(range(n), key=lambda i: min(segs[i][0][0], segs[i][1][0]))
    active: list[int] = []
    for i in order:
        (ax, ay), (bx, by) = segs[i]
        lo_x = min(ax, bx)
        active = [j for j in active if max(segs[j][0][0], segs[j][1][0]) >= lo_x]
        for j in active:
            if abs(i - j) == 1 or abs(i - j) == n - 1:
                # neighbours: only a collinear overlap beyond the shared vertex is a defect
                (cx, cy), (dx, dy) = segs[j]
                shared = segs[i][0] if segs[i][0] in segs[j] else segs[i][1]
                other_i = segs[i][1] if shared == segs[i][0] else segs[i][0]
                other_j = segs[j][1] if shared == segs[j][0] else segs[j][0]
                if _orient(*shared, *other_i, *other_j) == 0 and (
                    (other_j[0] - shared[0]) * (other_i[0] - shared[0])
                    + (other_j[1] - shared[1]) * (other_i[1] - shared[1]) > 0
                ):
                    return True
                continue
            if segments_intersect(segs[i][0], segs[i][1], segs[j][0], segs[j][1]):
                return True
        active.append(i)
    return False


def points_in_rings(lon: np.ndarray, lat: np.ndarray, rings) -> np.ndarray:
    """Even-odd containment over all rings (holes included), boundary inclusive."""
    inside = np.zeros(len(lon), dtype=bool)
    boundary = np.zeros(len(lon), dtype=bool)
    for ring in rings:
        xs, ys = ring[:, 0], ring[:, 1]
        for k in range(len(ring) - 1):
            x1, y1, x2, y2 = xs[k], ys[k], xs[k + 1], ys[k + 1]
            crosses = (y1 > lat) != (y2 > lat)
            if crosses.any():
                with np.errstate(divide="ignore", invalid="ignore"):
                    x_at = (x2 - x1) * (lat - y1) / (y2 - y1) + x1
                inside ^= crosses & (lon < x_at)
            cross = (x2 - x1) * (lat - y1) - (y2 - y1) * (lon - x1)
            boundary |= (cross == 0) & (lon >= min(x1, x2)) & (lon <= max(x1, x2)) \
                & (lat >= min(y1, y2)) & (lat <= max(y1, y2))
    return inside | boundary


# --------------------------------------------------------------------------
# tiles and index

@dataclass(frozen=True)
class Tile:
    tile_id: str
    rings: tuple
    attributes: dict = field(default_factory=dict)

    @property
    def bbox(self):
        outer = self.rings[0]
        return (float(outer[:, 0].min()), float(outer[:, 1].min()),
                float(outer[:, 0].max()), float(outer[:, 1].max()))


def make_tile(tile_id, rings, attributes=None, check=True) -> Tile:
    arrays = []
    for ring in rings:
        arr = np.asarray(ring, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] < 2:
            raise TessellationError(f"tile {tile_id}: malformed ring")
        arr = arr[:, :2]
        if len(arr) < 4:
            raise TessellationError(f"tile {tile_id}: ring has {len(arr)} vertices, need at least 4")
        if not np.array_equal(arr[0], arr[-1]):
            raise TessellationError(f"tile {tile_id}: ring is not closed")
        if check and ring_self_intersects(arr):
            raise TessellationError(f"tile {tile_id}: self-intersecting ring")
        arrays.append(arr)
    if not arrays:
        raise TessellationError(f"tile {tile_id}: no rings")
    return Tile(str(tile_id), tuple(arrays), dict(attributes or {}))


class GridIndex:
    """Uniform bins over the union of item bounding boxes (about `bins_per_item` bins per item)."""

    def __init__(self, bboxes, bins_per_item=4):
        b = np.asarray(bboxes, dtype=np.float64).reshape(-1, 4)
        self.count = len(b)
        if self.count == 0:
            self.x0 = self.y0 = 0.0
            self.nx = self.ny = 1
            self.dx = self.dy = 1.0
            self.cells = {}
            return
        self.x0, self.y0 = b[:, 0].min(), b[:, 1].min()
        w, h = b[:, 2].max() - self.x0, b[:, 3].max() - self.y0
        target = bins_per_item * self.count
        if w <= 0 and h <= 0:
            nx = ny = 1
        elif h <= 0:
            nx, ny = target, 1
        elif w <= 0:
            nx, ny = 1, target
        else:
            nx = max(1, int(round(math.sqrt(target * w / h))))
            ny = max(1, math.ceil(target / nx))
        self.nx, self.ny = nx, ny
        self.dx = w / nx if w > 0 else 1.0
        self.dy = h / ny if h > 0 else 1.0
        cells: dict[int, list[int]] = {}
        ix0, iy0 = self._ix(b[:, 0]), self._iy(b[:, 1])
        ix1, iy1 = self._ix(b[:, 2]), self._iy(b[:, 3])
        for item in range(self.count):
            for iy in range(iy0[item], iy1[item] + 1):
                for ix in range(ix0[item], ix1[item] + 1):
                    cells.setdefault(iy * nx + ix, []).append(item)
        self.cells = cells

    def _ix(self, x):
        return np.clip(np.floor((np.asarray(x) - self.x0) / self.dx), 0, self.nx - 1).astype(np.int64)

    def _iy(self, y):
        return np.clip(np.floor((np.asarray(y) - self.y0) / self.dy), 0, self.ny - 1).astype(np.int64)

    def bin_of(self, x, y) -> np.ndarray:
        """Bin id per point; -1 outside the indexed extent."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        ids = self._iy(y) * self.nx + self._ix(x)
        fx = (x - self.x0) / self.dx
        fy = (y - self.y0) / self.dy
        outside = (fx < 0) | (fy < 0) | (fx > self.nx) | (fy > self.ny)
        return np.where(outside, -1, ids)

    def candidates(self, x, y) -> list[int]:
        b = int(self.bin_of(np.array([x]), np.array([y]))[0])
        return self.cells.get(b, []) if b >= 0 else []


class Tessellation:
    """Immutable set of tiles with a grid-bucket index over tile bounding boxes."""

    def __init__(self, tiles):
        tiles = list(tiles)
        ids = [t.tile_id for t in tiles]
        seen = set()
        for tid in ids:
            if tid in seen:
                raise TessellationError(f"duplicate tile_id {tid!r}")
            seen.add(tid)
        # sorted order doubles as the tie-break order
        self.tiles = sorted(tiles, key=lambda t: t.tile_id)
        self.by_id = {t.tile_id: t for t in self.tiles}
        self.index = GridIndex([t.bbox for t in self.tiles])
        self.index.cells = {k: sorted(v) for k, v in self.index.cells.items()}

    def __len__(self):
        return len(self.tiles)

    def __iter__(self):
        return iter(self.tiles)

    @property
    def tile_ids(self) -> list[str]:
        return [t.tile_id for t in self.tiles]

    def attribute(self, name) -> dict:
        return {t.tile_id: t.attributes[name] for t in self.tiles if name in t.attributes}

    def to_geojson(self, properties: dict | None = None) -> dict:
        """FeatureCollection; `properties` maps tile_id to extra feature properties."""
        features = []
        for t in self.tiles:
            props = {"tile_id": t.tile_id, **t.attributes, **((properties or {}).get(t.tile_id, {}))}
            features.append({
                "type": "Feature",
                "properties": props,
                "geometry": {"type": "Polygon", "coordinates": [r.tolist() for r in t.rings]},
            })
        return {"type": "FeatureCollection", "features": features}


def assign_tiles(lon, lat, tess: Tessellation) -> np.ndarray:
    """Vectorized tile assignment; object array with None where no tile contains the point."""
    lon = np.asarray(lon, dtype=np.float64)
    lat = np.asarray(lat, dtype=np.float64)
    out = np.full(len(lon), None, dtype=object)
    if len(lon) == 0 or len(tess) == 0:
        return out
    bins = tess.index.bin_of(lon, lat)
    order = np.argsort(bins, kind="stable")
    sorted_bins = bins[order]
    starts = np.flatnonzero(np.r_[True, sorted_bins[1:] != sorted_bins[:-1]])
    ends = np.r_[starts[1:], len(order)]
    for s, e in zip(starts, ends):
        b = int(sorted_bins[s])
        cands = tess.index.cells.get(b) if b >= 0 else None
        if not cands:
            continue
        idx = order[s:e]
        open_ = np.ones(len(idx), dtype=bool)
        for ti in cands:
            tile = tess.tiles[ti]
            minx, miny, maxx, maxy = tile.bbox
            sel = idx[open_]
            px, py = lon[sel], lat[sel]
            box = (px >= minx) & (px <= maxx) & (py >= miny) & (py <= maxy)
            if not box.any():
                continue
            hit = np.zeros(len(sel), dtype=bool)
            hit[box] = points_in_rings(px[box], py[box], tile.rings)
            out[sel[hit]] = tile.tile_id
            open_[np.flatnonzero(open_)[hit]] = False
            if not open_.any():
                break
    return out


def assign_tile(lon: float, lat: float, tess: Tessellation) -> str | None:
    for ti in tess.index.candidates(lon, lat):
        tile = tess.tiles[ti]
        minx, miny, maxx, maxy = tile.bbox
        if minx <= lon <= maxx and miny <= lat <= maxy and \
                points_in_rings(np.array([lon]), np.array([lat]), tile.rings)[0]:
            return tile.tile_id
    return None


# --------------------------------------------------------------------------
# loading and grids

def _numeric_attributes(props: dict) -> dict:
    attrs = {}
    for k, v in props.items():
        if k in ("tile_id", "id") or isinstance(v, bool) or v is None:
            continue
        try:
            attrs[k] = float(v)
        except (TypeError, ValueError):
            continue
    return attrs


def load_tessellation(document, check_rings=True) -> Tessellation:
    """Tessellation from a GeoJSON FeatureCollection (dict, JSON text, or file path).

    Each feature must be a Polygon or MultiPolygon; MultiPolygon parts become
    tiles ``<id>#k``. The id comes from property ``tile_id``, falling back to
    property ``id`` and then the feature ``id``. Numeric properties become
    tile attributes.
    """
    if isinstance(document, (str, os.PathLike)) and not str(document).lstrip().startswith("{"):
        with open(document) as fh:
            document = json.load(fh)
    elif isinstance(document, str):
        document = json.loads(document)
    if document.get("type") != "FeatureCollection":
        raise TessellationError("expected a GeoJSON FeatureCollection")
    tiles = []
    for n, feat in enumerate(document.get("features", [])):
        props = feat.get("properties") or {}
        tid = props.get("tile_id", props.get("id", feat.get("id")))
        if tid is None:
            raise TessellationError(f"feature {n} has no tile_id")
        tid = str(tid)
        geom = feat.get("geometry") or {}
        attrs = _numeric_attributes(props)
        if geom.get("type") == "Polygon":
            tiles.append(make_tile(tid, geom["coordinates"], attrs, check_rings))
        elif geom.get("type") == "MultiPolygon":
            for k, poly in enumerate(geom["coordinates"]):
                tiles.append(make_tile(f"{tid}#{k}", poly, attrs, check_rings))
        else:
            raise TessellationError(f"tile {tid}: unsupported geometry {geom.get('type')!r}")
    return Tessellation(tiles)


def make_grid(bbox, cell_size_m: float) -> Tessellation:
    """Regular lon/lat grid covering `bbox` with roughly square cells of `cell_size_m`.

    Cell edges in degrees are fixed at the bbox center latitude; cells are
    anchored at the min corner and the last row/column may overhang the bbox.
    """
    if cell_size_m <= 0:
        raise ConfigError("cell_size_m must be > 0")
    min_lon, min_lat, max_lon, max_lat = (float(v) for v in bbox)
    if min_lon > max_lon:
        raise ConfigError("bbox spans the antimeridian; not supported")
    if not (min_lon < max_lon and min_lat < max_lat):
        raise ConfigError(f"bbox is not well-ordered: {bbox!r}")
    center = math.radians((min_lat + max_lat) / 2)
    dlat = cell_size_m / METERS_PER_DEGREE
    dlon = cell_size_m / (METERS_PER_DEGREE * math.cos(center))
    rows = max(1, math.ceil((max_lat - min_lat) / dlat - 1e-9))
    cols = max(1, math.ceil((max_lon - min_lon) / dlon - 1e-9))
    tiles = []
    for r in range(rows):
        y0, y1 = min_lat + r * dlat, min_lat + (r + 1) * dlat
        for c in range(cols):
            x0, x1 = min_lon + c * dlon, min_lon + (c + 1) * dlon
            ring = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1], [x0, y0]])
            tiles.append(Tile(f"r{r}c{c}", (ring,), {}))
    return Tessellation(tiles)
