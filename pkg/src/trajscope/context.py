"""Map context: roads, POIs, traffic lights, spatial index, proximity filtering.

Elements live in a ContextDb backed by a uniform lon/lat grid index whose
cell size is fixed in meters at the dataset's reference latitude. Distances
between elements and a view polyline use a local equirectangular plane for
projection and haversine for the reported measure, which keeps index-based
filtering and brute-force scans bit-identical (both call the same measure).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

from .core import METERS_PER_DEG_LAT, haversine_m

LonLat = tuple[float, float]

ROAD_LAYER = "road"
POI_LAYER = "poi"
LIGHT_LAYER = "light"
CONTEXT_LAYERS = (POI_LAYER, ROAD_LAYER, LIGHT_LAYER)


class ContextError(ValueError):
    """Malformed context file or feature."""


@dataclass(frozen=True, slots=True)
class RoadSegment:
    """A named road polyline with a class such as motorway/primary/residential."""

    road_id: str
    road_class: str
    points: tuple[LonLat, ...]
    name: Optional[str] = None

    def __post_init__(self) -> None:
        if len(self.points) < 2:
            raise ValueError(f"road {self.road_id!r} needs at least 2 points")


@dataclass(frozen=True, slots=True)
class Poi:
    """A point of interest with a category tag."""

    poi_id: str
    category: str
    lon: float
    lat: float
    name: Optional[str] = None


@dataclass(frozen=True, slots=True)
class TrafficLight:
    """A signalized intersection point."""

    light_id: str
    lon: float
    lat: float


ContextElement = Union[RoadSegment, Poi, TrafficLight]


def element_id(element: ContextElement) -> str:
    if isinstance(element, RoadSegment):
        return element.road_id
    if isinstance(element, Poi):
        return element.poi_id
    return element.light_id


@dataclass(frozen=True, slots=True)
class FilterPolicy:
    """Per-layer proximity thresholds in meters (boundary distances kept)."""

    theta_poi_m: float = 100.0
    theta_road_m: float = 100.0
    theta_light_m: float = 100.0

    def theta_for(self, layer: str) -> float:
        if layer == POI_LAYER:
            return self.theta_poi_m
        if layer == ROAD_LAYER:
            return self.theta_road_m
        if layer == LIGHT_LAYER:
            return self.theta_light_m
        raise ValueError(f"unknown context layer {layer!r}")


def _coords(view: Sequence) -> list[LonLat]:
    """Normalize a polyline given as TrajPoints or (lon, lat) pairs."""
    out: list[LonLat] = []
    for p in view:
        if hasattr(p, "lon"):
            out.append((float(p.lon), float(p.lat)))
        else:
            out.append((float(p[0]), float(p[1])))
    if not out:
        raise ValueError("empty view polyline")
    return out


def _bbox(coords: Iterable[LonLat]) -> tuple[float, float, float, float]:
    lons = [c[0] for c in coords]
    lats = [c[1] for c in coords]
    return min(lons), min(lats), max(lons), max(lats)


def _to_plane(lon: float, lat: float, lon0: float, lat0: float, coslat0: float) -> tuple[float, float]:
    return ((lon - lon0) * METERS_PER_DEG_LAT * coslat0, (lat - lat0) * METERS_PER_DEG_LAT)


def point_to_segment_m(lon: float, lat: float, a: LonLat, b: LonLat) -> float:
    """Haversine distance from a point to the nearest point of segment a-b.

    The nearest point is found in a local plane anchored at the query point,
    then measured back with haversine.
    """
    coslat0 = math.cos(math.radians(lat))
    ax, ay = _to_plane(a[0], a[1], lon, lat, coslat0)
    bx, by = _to_plane(b[0], b[1], lon, lat, coslat0)
    dx, dy = bx - ax, by - ay
    denom = dx * dx + dy * dy
    if denom <= 0.0:
        t = 0.0
    else:
        # Project the origin (the query point) onto the segment.
        t = max(0.0, min(1.0, (-(ax * dx) - (ay * dy)) / denom))
    nx, ny = ax + t * dx, ay + t * dy
    nlon = lon + nx / (METERS_PER_DEG_LAT * coslat0) if coslat0 > 0 else lon
    nlat = lat + ny / METERS_PER_DEG_LAT
    return haversine_m(lon, lat, nlon, nlat)


def point_to_polyline_m(lon: float, lat: float, line: Sequence) -> float:
    """Minimum haversine distance from a point to a polyline (or single point)."""
    pts = _coords(line)
    if len(pts) == 1:
        return haversine_m(lon, lat, pts[0][0], pts[0][1])
    return min(point_to_segment_m(lon, lat, a, b) for a, b in zip(pts, pts[1:]))


def _pt_seg_plane(px: float, py: float, ax: float, ay: float, bx: float, by: float) -> float:
    dx, dy = bx - ax, by - ay
    denom = dx * dx + dy * dy
    if denom <= 0.0:
        return math.hypot(px - ax, py - ay)
    t = max(0.0, min(1.0, ((px - ax) * dx + (py - ay) * dy) / denom))
    return math.hypot(px - (ax + t * dx), py - (ay + t * dy))


def _orient(ax: float, ay: float, bx: float, by: float, cx: float, cy: float) -> float:
    return (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)


def _segments_intersect(p1, p2, p3, p4) -> bool:
    d1 = _orient(*p3, *p4, *p1)
    d2 = _orient(*p3, *p4, *p2)
    d3 = _orient(*p1, *p2, *p3)
    d4 = _orient(*p1, *p2, *p4)
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and d1 != 0 and d2 != 0 and d3 != 0 and d4 != 0:
        return True
    # Collinear/touching cases fall through to endpoint distances, which
    # evaluate to 0 when the segments actually touch.
    return False


def _seg_seg_plane(p1, p2, p3, p4) -> float:
    if _segments_intersect(p1, p2, p3, p4):
        return 0.0
    return min(
        _pt_seg_plane(*p1, *p3, *p4),
        _pt_seg_plane(*p2, *p3, *p4),
        _pt_seg_plane(*p3, *p1, *p2),
        _pt_seg_plane(*p4, *p1, *p2),
    )


def polyline_to_polyline_m(line_a: Sequence, line_b: Sequence) -> float:
    """Minimum distance in meters between two polylines (planar local frame).

    Exact 0 when they intersect. Single-point inputs degenerate to point
    distances.
    """
    a = _coords(line_a)
    b = _coords(line_b)
    lon0, lat0 = a[0]
    coslat0 = math.cos(math.radians(lat0))
    ap = [_to_plane(lon, lat, lon0, lat0, coslat0) for lon, lat in a]
    bp = [_to_plane(lon, lat, lon0, lat0, coslat0) for lon, lat in b]
    if len(ap) == 1:
        ap = [ap[0], ap[0]]
    if len(bp) == 1:
        bp = [bp[0], bp[0]]
    best = math.inf
    for s1, s2 in zip(ap, ap[1:]):
        for s3, s4 in zip(bp, bp[1:]):
            d = _seg_seg_plane(s1, s2, s3, s4)
            if d < best:
                best = d
                if best == 0.0:
                    return 0.0
    return best


def element_view_distance_m(element: ContextElement, view: Sequence) -> float:
    """dis(element, view): the proximity measure used by all filtering paths.

    Point elements use min haversine to the view polyline; road polylines
    use the planar polyline-polyline minimum (0 on intersection).
    """
    if isinstance(element, RoadSegment):
        return polyline_to_polyline_m(element.points, view)
    return point_to_polyline_m(element.lon, element.lat, view)


class GridIndex:
    """Uniform lon/lat grid over element bounding boxes.

    Cell edges are ``cell_m`` meters at the reference latitude. Elements are
    inserted into every cell their bbox overlaps, so a query with a padded
    bbox returns a superset of all elements within the pad distance.
    """

    def __init__(self, cell_m: float = 250.0, ref_lat: float = 0.0) -> None:
        if cell_m <= 0:
            raise ValueError("cell size must be positive")
        self.cell_m = cell_m
        self.ref_lat = ref_lat
        coslat = max(math.cos(math.radians(ref_lat)), 0.01)
        self._dlat = cell_m / METERS_PER_DEG_LAT
        self._dlon = cell_m / (METERS_PER_DEG_LAT * coslat)
        self._cells: dict[tuple[int, int], list] = {}

    def _cell_range(self, bbox: tuple[float, float, float, float]) -> tuple[int, int, int, int]:
        x0 = math.floor(bbox[0] / self._dlon)
        y0 = math.floor(bbox[1] / self._dlat)
        x1 = math.floor(bbox[2] / self._dlon)
        y1 = math.floor(bbox[3] / self._dlat)
        return x0, y0, x1, y1

    def insert(self, key, bbox: tuple[float, float, float, float]) -> None:
        x0, y0, x1, y1 = self._cell_range(bbox)
        for x in range(x0, x1 + 1):
            for y in range(y0, y1 + 1):
                self._cells.setdefault((x, y), []).append(key)

    def query(self, bbox: tuple[float, float, float, float], pad_m: float = 0.0) -> set:
        """Keys of all elements whose bbox may lie within pad_m of bbox."""
        # One extra cell absorbs degree-conversion slack away from ref_lat.
        pad = pad_m + self.cell_m
        dlon_pad = pad / (METERS_PER_DEG_LAT * max(math.cos(math.radians(self.ref_lat)), 0.01))
        dlat_pad = pad / METERS_PER_DEG_LAT
        padded = (bbox[0] - dlon_pad, bbox[1] - dlat_pad, bbox[2] + dlon_pad, bbox[3] + dlat_pad)
        x0, y0, x1, y1 = self._cell_range(padded)
        out: set = set()
        for x in range(x0, x1 + 1):
            for y in range(y0, y1 + 1):
                hits = self._cells.get((x, y))
                if hits:
                    out.update(hits)
        return out


@dataclass
class ContextDb:
    """All context elements plus a grid index for candidate retrieval."""

    roads: tuple[RoadSegment, ...] = ()
    pois: tuple[Poi, ...] = ()
    lights: tuple[TrafficLight, ...] = ()
    cell_m: float = 250.0
    index: GridIndex = field(init=False, repr=False)

    def __post_init__(self) -> None:
        lats: list[float] = [p[1] for r in self.roads for p in r.points]
        lats += [p.lat for p in self.pois]
        lats += [l.lat for l in self.lights]
        ref_lat = sum(lats) / len(lats) if lats else 0.0
        self.index = GridIndex(cell_m=self.cell_m, ref_lat=ref_lat)
        for i, road in enumerate(self.roads):
            self.index.insert((ROAD_LAYER, i), _bbox(road.points))
        for i, poi in enumerate(self.pois):
            self.index.insert((POI_LAYER, i), (poi.lon, poi.lat, poi.lon, poi.lat))
        for i, light in enumerate(self.lights):
            self.index.insert((LIGHT_LAYER, i), (light.lon, light.lat, light.lon, light.lat))

    def elements(self, layer: str) -> tuple:
        if layer == ROAD_LAYER:
            return self.roads
        if layer == POI_LAYER:
            return self.pois
        if layer == LIGHT_LAYER:
            return self.lights
        raise ValueError(f"unknown context layer {layer!r}")

    def candidates(self, layer: str, bbox: tuple[float, float, float, float], pad_m: float) -> list:
        pool = self.elements(layer)
        keys = self.index.query(bbox, pad_m=pad_m)
        idxs = sorted(i for (kind, i) in keys if kind == layer)
        return [pool[i] for i in idxs]


def load_context(path: Union[str, Path], cell_m: float = 250.0) -> ContextDb:
    """Load a context GeoJSON FeatureCollection into a ContextDb.

    Features declare ``properties.layer`` of road/poi/light. Roads are
    LineStrings with ``id`` and ``class``; POIs are Points with ``id`` and
    ``category``; lights are Points with ``id``. Malformed features raise
    ContextError naming the feature index.
    """
    path = Path(path)
    with path.open() as fh:
        doc = json.load(fh)
    if doc.get("type") != "FeatureCollection":
        raise ContextError(f"{path}: expected a FeatureCollection")
    roads: list[RoadSegment] = []
    pois: list[Poi] = []
    lights: list[TrafficLight] = []
    for i, feat in enumerate(doc.get("features", [])):
        where = f"{path}:feature[{i}]"
        props = feat.get("properties") or {}
        layer = props.get("layer")
        geom = feat.get("geometry") or {}
        elem_id = str(props.get("id") or "").strip()
        if not elem_id:
            raise ContextError(f"{where}: missing element id")
        try:
            if layer == ROAD_LAYER:
                if geom.get("type") != "LineString":
                    raise ContextError(f"{where}: road must be a LineString")
                pts = tuple((float(c[0]), float(c[1])) for c in geom.get("coordinates", []))
                roads.append(
                    RoadSegment(
                        road_id=elem_id,
                        road_class=str(props.get("class") or "unclassified"),
                        points=pts,
                        name=props.get("name"),
                    )
                )
            elif layer == POI_LAYER:
                if geom.get("type") != "Point":
                    raise ContextError(f"{where}: poi must be a Point")
                lon, lat = geom.get("coordinates", (None, None))[:2]
                pois.append(
                    Poi(
                        poi_id=elem_id,
                        category=str(props.get("category") or "unknown"),
                        lon=float(lon),
                        lat=float(lat),
                        name=props.get("name"),
                    )
                )
            elif layer == LIGHT_LAYER:
                if geom.get("type") != "Point":
                    raise ContextError(f"{where}: light must be a Point")
                lon, lat = geom.get("coordinates", (None, None))[:2]
                lights.append(TrafficLight(light_id=elem_id, lon=float(lon), lat=float(lat)))
            else:
                raise ContextError(f"{where}: unknown layer {layer!r}")
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ContextError):
                raise
            raise ContextError(f"{where}: {exc}") from exc
    return ContextDb(roads=tuple(roads), pois=tuple(pois), lights=tuple(lights), cell_m=cell_m)


def nearest_road(
    db: ContextDb, lon: float, lat: float, radius_m: float
) -> Optional[RoadSegment]:
    """Closest road within radius_m of the point, or None.

    Ties on distance break to the lexicographically smallest road id, so the
    result is deterministic for symmetric layouts.
    """
    cands = db.candidates(ROAD_LAYER, (lon, lat, lon, lat), pad_m=radius_m)
    best: Optional[tuple[float, str, RoadSegment]] = None
    for road in cands:
        d = point_to_polyline_m(lon, lat, road.points)
        if d <= radius_m:
            key = (d, road.road_id)
            if best is None or key < (best[0], best[1]):
                best = (d, road.road_id, road)
    return best[2] if best else None


def filter_context(
    db: ContextDb, view: Sequence, layer: str, policy: FilterPolicy
) -> list:
    """Elements of ``layer`` whose distance to the view polyline is <= theta.

    Uses the grid index for candidates, then the exact shared measure, so it
    returns exactly the brute-force set. Output is sorted by element id.
    """
    theta = policy.theta_for(layer)
    coords = _coords(view)
    bbox = _bbox(coords)
    hits = [
        e
        for e in db.candidates(layer, bbox, pad_m=theta)
        if element_view_distance_m(e, coords) <= theta
    ]
    return sorted(hits, key=element_id)
