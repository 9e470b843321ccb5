"""Tests for map context: distances, grid index, proximity filtering."""

import json
import math
import random

import pytest

from trajscope.context import (
    ContextDb,
    ContextError,
    FilterPolicy,
    GridIndex,
    Poi,
    RoadSegment,
    TrafficLight,
    element_id,
    element_view_distance_m,
    filter_context,
    load_context,
    nearest_road,
    point_to_polyline_m,
    point_to_segment_m,
    polyline_to_polyline_m,
)
from trajscope.core import haversine_m, offset_point


def brute_force_filter(db, view, layer, theta):
    """Oracle: full scan of every element with the shared distance measure."""
    hits = [e for e in db.elements(layer) if element_view_distance_m(e, view) <= theta]
    return sorted(hits, key=element_id)


def random_scene(rng, lon0=116.3, lat0=39.9, n_roads=6, n_pois=14, n_lights=5):
    """A small synthetic scene in a ~2 km box around (lon0, lat0)."""
    def jitter(scale_m):
        brg = rng.uniform(0, 360)
        dist = rng.uniform(0, scale_m)
        return offset_point(lon0, lat0, brg, dist)

    roads = []
    for i in range(n_roads):
        sx, sy = jitter(900)
        pts = [(sx, sy)]
        brg = rng.uniform(0, 360)
        for _ in range(rng.randint(1, 4)):
            brg += rng.uniform(-40, 40)
            nx, ny = offset_point(pts[-1][0], pts[-1][1], brg, rng.uniform(80, 400))
            pts.append((nx, ny))
        roads.append(RoadSegment(f"r{i:03d}", "residential", tuple(pts)))
    pois = [Poi(f"p{i:03d}", "shop", *jitter(1000)) for i in range(n_pois)]
    lights = [TrafficLight(f"l{i:03d}", *jitter(1000)) for i in range(n_lights)]
    return ContextDb(roads=tuple(roads), pois=tuple(pois), lights=tuple(lights))


def random_view(rng, lon0=116.3, lat0=39.9):
    n = rng.randint(2, 10)
    lon, lat = offset_point(lon0, lat0, rng.uniform(0, 360), rng.uniform(0, 600))
    pts = [(lon, lat)]
    for _ in range(n - 1):
        lon, lat = offset_point(lon, lat, rng.uniform(0, 360), rng.uniform(30, 250))
        pts.append((lon, lat))
    return pts


class TestPointDistances:
    def test_point_to_segment_sampling_oracle(self):
        # Oracle: densely sample the segment, take min haversine.
        a, b = (116.30, 39.90), (116.31, 39.905)
        p = offset_point(116.305, 39.9025, 37.0, 180.0)
        impl = point_to_segment_m(p[0], p[1], a, b)
        samples = min(
            haversine_m(p[0], p[1], a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t)
            for t in [i / 5000 for i in range(5001)]
        )
        assert impl == pytest.approx(samples, abs=0.05)

    def test_point_on_segment_is_zero(self):
        a, b = (116.30, 39.90), (116.31, 39.90)
        mid = ((a[0] + b[0]) / 2, a[1])
        assert point_to_segment_m(mid[0], mid[1], a, b) < 1e-6

    def test_beyond_endpoint_clamps(self):
        a, b = (116.30, 39.90), (116.31, 39.90)
        p = (116.32, 39.90)
        d = point_to_segment_m(p[0], p[1], a, b)
        assert d == pytest.approx(haversine_m(*p, *b), abs=0.01)

    def test_polyline_single_point(self):
        d = point_to_polyline_m(116.0, 40.0, [(116.001, 40.0)])
        assert d == pytest.approx(haversine_m(116.0, 40.0, 116.001, 40.0))


class TestPolylineDistances:
    def test_crossing_is_zero(self):
        a = [(116.30, 39.90), (116.31, 39.90)]
        b = [(116.305, 39.895), (116.305, 39.905)]
        assert polyline_to_polyline_m(a, b) == 0.0

    def test_parallel_offset(self):
        lat_off = 200.0 / (6_371_000.0 * math.pi / 180.0)
        a = [(116.30, 39.90), (116.31, 39.90)]
        b = [(116.30, 39.90 + lat_off), (116.31, 39.90 + lat_off)]
        assert polyline_to_polyline_m(a, b) == pytest.approx(200.0, rel=1e-3)

    def test_degenerate_single_points(self):
        d = polyline_to_polyline_m([(116.0, 40.0)], [(116.001, 40.0)])
        assert d == pytest.approx(haversine_m(116.0, 40.0, 116.001, 40.0), rel=1e-3)


class TestGridIndex:
    def test_self_retrieval(self):
        rng = random.Random(7)
        db = random_scene(rng)
        for layer in ("road", "poi", "light"):
            for i, elem in enumerate(db.elements(layer)):
                if layer == "road":
                    lons = [p[0] for p in elem.points]
                    lats = [p[1] for p in elem.points]
                    bbox = (min(lons), min(lats), max(lons), max(lats))
                else:
                    bbox = (elem.lon, elem.lat, elem.lon, elem.lat)
                assert (layer, i) in db.index.query(bbox)

    def test_bad_cell_size(self):
        with pytest.raises(ValueError):
            GridIndex(cell_m=0)


class TestFilterContext:
    def test_index_matches_brute_force(self):
        rng = random.Random(42)
        for scene_i in range(25):
            db = random_scene(rng)
            view = random_view(rng)
            theta = rng.choice([50.0, 100.0, 150.0, 300.0])
            policy = FilterPolicy(theta, theta, theta)
            for layer in ("road", "poi", "light"):
                got = filter_context(db, view, layer, policy)
                want = brute_force_filter(db, view, layer, theta)
                assert got == want, f"scene {scene_i} layer {layer} theta {theta}"

    def test_theta_monotonicity(self):
        rng = random.Random(11)
        db = random_scene(rng)
        view = random_view(rng)
        for layer in ("road", "poi", "light"):
            prev: set = set()
            for theta in (25.0, 50.0, 100.0, 200.0, 400.0):
                policy = FilterPolicy(theta, theta, theta)
                ids = {element_id(e) for e in filter_context(db, view, layer, policy)}
                assert prev <= ids
                prev = ids

    def test_boundary_distance_retained(self):
        # theta set to the exact measured distance: dis == theta must be kept.
        rng = random.Random(3)
        db = random_scene(rng)
        view = random_view(rng)
        poi = db.pois[0]
        d = element_view_distance_m(poi, view)
        policy = FilterPolicy(theta_poi_m=d)
        ids = {element_id(e) for e in filter_context(db, view, "poi", policy)}
        assert poi.poi_id in ids
        # and just below theta it drops out (no other poi exactly tied)
        policy2 = FilterPolicy(theta_poi_m=math.nextafter(d, 0.0))
        ids2 = {element_id(e) for e in filter_context(db, view, "poi", policy2)}
        assert poi.poi_id not in ids2

    def test_unknown_layer(self):
        db = random_scene(random.Random(1))
        with pytest.raises(ValueError):
            filter_context(db, [(116.3, 39.9)], "river", FilterPolicy())


class TestNearestRoad:
    def test_within_radius(self):
        road = RoadSegment("r1", "primary", ((116.30, 39.90), (116.31, 39.90)))
        db = ContextDb(roads=(road,))
        got = nearest_road(db, 116.305, 39.9005, radius_m=200.0)
        assert got is road

    def test_none_beyond_radius(self):
        road = RoadSegment("r1", "primary", ((116.30, 39.90), (116.31, 39.90)))
        db = ContextDb(roads=(road,))
        far = offset_point(116.305, 39.90, 0.0, 500.0)
        assert nearest_road(db, far[0], far[1], radius_m=200.0) is None

    def test_tie_breaks_to_smaller_id(self):
        # Two roads symmetric about the query point.
        lat_off = 100.0 / (6_371_000.0 * math.pi / 180.0)
        r_b = RoadSegment("b", "primary", ((116.30, 39.90 + lat_off), (116.31, 39.90 + lat_off)))
        r_a = RoadSegment("a", "primary", ((116.30, 39.90 - lat_off), (116.31, 39.90 - lat_off)))
        db = ContextDb(roads=(r_b, r_a))
        got = nearest_road(db, 116.305, 39.90, radius_m=300.0)
        assert got is r_a

    def test_picks_closest(self):
        rng = random.Random(9)
        db = random_scene(rng, n_roads=8)
        lon, lat = offset_point(116.3, 39.9, 45.0, 300.0)
        got = nearest_road(db, lon, lat, radius_m=2000.0)
        want = min(
            ((point_to_polyline_m(lon, lat, r.points), r.road_id) for r in db.roads),
        )
        assert got is not None and got.road_id == want[1]


class TestLoadContext:
    def _write(self, tmp_path, features):
        path = tmp_path / "ctx.geojson"
        path.write_text(json.dumps({"type": "FeatureCollection", "features": features}))
        return path

    def test_load_all_layers(self, tmp_path):
        feats = [
            {
                "type": "Feature",
                "properties": {"layer": "road", "id": "r1", "class": "motorway"},
                "geometry": {"type": "LineString", "coordinates": [[116.3, 39.9], [116.31, 39.9]]},
            },
            {
                "type": "Feature",
                "properties": {"layer": "poi", "id": "p1", "category": "food", "name": "cafe"},
                "geometry": {"type": "Point", "coordinates": [116.305, 39.901]},
            },
            {
                "type": "Feature",
                "properties": {"layer": "light", "id": "l1"},
                "geometry": {"type": "Point", "coordinates": [116.302, 39.899]},
            },
        ]
        db = load_context(self._write(tmp_path, feats))
        assert len(db.roads) == 1 and db.roads[0].road_class == "motorway"
        assert len(db.pois) == 1 and db.pois[0].name == "cafe"
        assert len(db.lights) == 1

    def test_unknown_layer_named(self, tmp_path):
        feats = [
            {
                "type": "Feature",
                "properties": {"layer": "river", "id": "x"},
                "geometry": {"type": "Point", "coordinates": [0, 0]},
            }
        ]
        with pytest.raises(ContextError, match=r"feature\[0\]"):
            load_context(self._write(tmp_path, feats))

    def test_road_needs_linestring(self, tmp_path):
        feats = [
            {
                "type": "Feature",
                "properties": {"layer": "road", "id": "r1"},
                "geometry": {"type": "Point", "coordinates": [0, 0]},
            }
        ]
        with pytest.raises(ContextError, match="LineString"):
            load_context(self._write(tmp_path, feats))

    def test_missing_id(self, tmp_path):
        feats = [
            {
                "type": "Feature",
                "properties": {"layer": "poi"},
                "geometry": {"type": "Point", "coordinates": [0, 0]},
            }
        ]
        with pytest.raises(ContextError, match="id"):
            load_context(self._write(tmp_path, feats))
