"""Trajectory primitives: points, trajectories, geodesy, kinematics, ingest.

Distances are meters, speeds meters/second, timestamps integer epoch
seconds (UTC). All containers are immutable; ingest helpers normalize
raw rows (sort by time, collapse exact duplicates) before constructing
validated objects.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

EARTH_RADIUS_M = 6_371_000.0

# Meters spanned by one degree of latitude on the sphere above.
METERS_PER_DEG_LAT = EARTH_RADIUS_M * math.pi / 180.0


class IngestError(ValueError):
    """Malformed input row or feature, with source location context."""


def haversine_m(lon1: float, lat1: float, lon2: float, lat2: float) -> float:
    """Great-circle distance in meters between two lon/lat points.

    Args:
        lon1: Longitude of the first point, degrees.
        lat1: Latitude of the first point, degrees.
        lon2: Longitude of the second point, degrees.
        lat2: Latitude of the second point, degrees.

    Returns:
        Distance in meters on a sphere of radius 6,371,000 m.
    """
    phi1 = math.radians(lat1)
    phi2 = math.radians(lat2)
    dphi = math.radians(lat2 - lat1)
    dlam = math.radians(lon2 - lon1)
    a = math.sin(dphi / 2.0) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(a)))


def offset_point(lon: float, lat: float, bearing_deg: float, distance_m: float) -> tuple[float, float]:
    """Move a point by ``distance_m`` along ``bearing_deg`` (0 = north).

    Uses a local equirectangular step sized at the point's own latitude,
    which keeps the realized haversine displacement within millimeters
    of the request for the sub-kilometer moves used here.
    """
    theta = math.radians(bearing_deg)
    dlat = distance_m * math.cos(theta) / METERS_PER_DEG_LAT
    mlon = METERS_PER_DEG_LAT * math.cos(math.radians(lat))
    dlon = distance_m * math.sin(theta) / mlon if mlon > 0 else 0.0
    return lon + dlon, lat + dlat


def bearing_deg(lon1: float, lat1: float, lon2: float, lat2: float) -> float:
    """Initial great-circle bearing from point 1 to point 2, degrees in [0, 360)."""
    phi1 = math.radians(lat1)
    phi2 = math.radians(lat2)
    dlam = math.radians(lon2 - lon1)
    y = math.sin(dlam) * math.cos(phi2)
    x = math.cos(phi1) * math.sin(phi2) - math.sin(phi1) * math.cos(phi2) * math.cos(dlam)
    return math.degrees(math.atan2(y, x)) % 360.0


def parse_timestamp(value: Union[str, int, float]) -> int:
    """Parse an epoch number or ISO-8601 string to integer epoch seconds (UTC).

    Naive ISO strings are taken as UTC. Raises ValueError on anything else.
    """
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return int(value)
    text = str(value).strip()
    if not text:
        raise ValueError("empty timestamp")
    try:
        return int(float(text))
    except ValueError:
        pass
    try:
        dt = datetime.fromisoformat(text)
    except ValueError as exc:
        raise ValueError(f"unparseable timestamp {text!r}") from exc
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def format_timestamp(t: int) -> str:
    """Render epoch seconds as ``YYYY-MM-DD HH:MM:SS`` (UTC)."""
    return datetime.fromtimestamp(int(t), tz=timezone.utc).strftime("%Y-%m-%d %H:%M:%S")


@dataclass(frozen=True, slots=True)
class TrajPoint:
    """One GPS fix: longitude/latitude degrees, epoch-second timestamp."""

    lon: float
    lat: float
    t: int

    def __post_init__(self) -> None:
        if not (-180.0 <= self.lon <= 180.0):
            raise ValueError(f"longitude out of range: {self.lon}")
        if not (-90.0 <= self.lat <= 90.0):
            raise ValueError(f"latitude out of range: {self.lat}")


@dataclass(frozen=True, slots=True)
class Trajectory:
    """An ordered, validated sequence of fixes for one moving object.

    Invariants: at least one point, timestamps non-decreasing, and no
    two consecutive points identical in (lon, lat, t).
    """

    traj_id: str
    points: tuple[TrajPoint, ...]
    label: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.traj_id:
            raise ValueError("trajectory id must be non-empty")
        if len(self.points) < 1:
            raise ValueError(f"trajectory {self.traj_id!r} has no points")
        prev = None
        for i, p in enumerate(self.points):
            if prev is not None:
                if p.t < prev.t:
                    raise ValueError(
                        f"trajectory {self.traj_id!r}: timestamp decreases at point {i}"
                    )
                if p.lon == prev.lon and p.lat == prev.lat and p.t == prev.t:
                    raise ValueError(
                        f"trajectory {self.traj_id!r}: consecutive duplicate point at {i}"
                    )
            prev = p

    def __len__(self) -> int:
        return len(self.points)

    @property
    def start(self) -> TrajPoint:
        return self.points[0]

    @property
    def end(self) -> TrajPoint:
        return self.points[-1]

    def slice(self, start: int, end: int) -> tuple[TrajPoint, ...]:
        """Points for the 1-based inclusive index range ``[start, end]``."""
        if not (1 <= start <= end <= len(self.points)):
            raise IndexError(f"bad range ({start}, {end}) for length {len(self.points)}")
        return self.points[start - 1 : end]


@dataclass(frozen=True, slots=True)
class Kinematics:
    """Per-step motion derived from a point sequence.

    step_speeds[i] pairs with the move from point i to i+1; time gaps are
    clamped to >= 1 s so zero-gap fixes cannot produce infinite speed.
    """

    step_distances_m: tuple[float, ...]
    step_speeds_ms: tuple[float, ...]
    total_distance_m: float
    duration_s: int

    @property
    def avg_speed_ms(self) -> Optional[float]:
        # Total distance over total duration; undefined for zero duration.
        if self.duration_s <= 0:
            return None
        return self.total_distance_m / self.duration_s

    @property
    def max_speed_ms(self) -> Optional[float]:
        return max(self.step_speeds_ms) if self.step_speeds_ms else None

    @property
    def min_speed_ms(self) -> Optional[float]:
        """Lowest non-zero step speed, or None when every step is zero."""
        nonzero = [s for s in self.step_speeds_ms if s > 0.0]
        return min(nonzero) if nonzero else None


def kinematics(points: Sequence[TrajPoint]) -> Kinematics:
    """Compute per-step distances/speeds and totals for a point sequence.

    A single point yields empty steps, zero distance, zero duration.
    """
    if len(points) == 0:
        raise ValueError("kinematics of an empty point sequence")
    dists: list[float] = []
    speeds: list[float] = []
    for a, b in zip(points, points[1:]):
        d = haversine_m(a.lon, a.lat, b.lon, b.lat)
        dt = max(b.t - a.t, 1)  # clamp: repeated timestamps must not explode speed
        dists.append(d)
        speeds.append(d / dt)
    total = math.fsum(dists)
    duration = points[-1].t - points[0].t
    return Kinematics(
        step_distances_m=tuple(dists),
        step_speeds_ms=tuple(speeds),
        total_distance_m=total,
        duration_s=int(duration),
    )


def _build_trajectory(
    traj_id: str,
    rows: list[tuple[float, float, int]],
    label: Optional[str],
    where: str,
) -> Trajectory:
    # Normalize: stable sort by time, then drop exact consecutive duplicates.
    rows = sorted(rows, key=lambda r: r[2])
    pts: list[TrajPoint] = []
    for lon, lat, t in rows:
        if pts and pts[-1].lon == lon and pts[-1].lat == lat and pts[-1].t == t:
            continue
        pts.append(TrajPoint(lon=lon, lat=lat, t=t))
    if not pts:
        raise IngestError(f"{where}: trajectory {traj_id!r} has no points")
    return Trajectory(traj_id=traj_id, points=tuple(pts), label=label)


def load_trajectories_csv(path: Union[str, Path]) -> list[Trajectory]:
    """Load trajectories from a CSV with header ``id,lon,lat,t[,label]``.

    Rows are grouped by id (first-appearance order), sorted by time within
    each group, and exact duplicate consecutive fixes are collapsed. Any
    malformed or out-of-range row raises IngestError naming the line.
    """
    path = Path(path)
    groups: dict[str, list[tuple[float, float, int]]] = {}
    labels: dict[str, Optional[str]] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        cols = [c.strip().lower() for c in header]
        required = ("id", "lon", "lat", "t")
        if tuple(cols[: len(required)]) != required:
            raise IngestError(f"{path}:1: expected header id,lon,lat,t[,label], got {header!r}")
        has_label = len(cols) > 4 and cols[4] == "label"
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 4:
                raise IngestError(f"{path}:{lineno}: expected at least 4 fields, got {len(row)}")
            traj_id = row[0].strip()
            if not traj_id:
                raise IngestError(f"{path}:{lineno}: empty trajectory id")
            try:
                lon = float(row[1])
                lat = float(row[2])
                t = parse_timestamp(row[3])
            except ValueError as exc:
                raise IngestError(f"{path}:{lineno}: {exc}") from exc
            if not (-180.0 <= lon <= 180.0) or not (-90.0 <= lat <= 90.0):
                raise IngestError(
                    f"{path}:{lineno}: coordinate out of range (lon={lon}, lat={lat})"
                )
            groups.setdefault(traj_id, []).append((lon, lat, t))
            if has_label and len(row) > 4 and row[4].strip():
                labels[traj_id] = row[4].strip()
    return [
        _build_trajectory(tid, rows, labels.get(tid), str(path)) for tid, rows in groups.items()
    ]


def load_trajectories_geojson(path: Union[str, Path]) -> list[Trajectory]:
    """Load trajectories from a GeoJSON FeatureCollection of LineStrings.

    Each feature needs ``properties.id``, a LineString geometry, and a
    ``properties.timestamps`` list matching the coordinate count. Errors
    name the offending feature index.
    """
    path = Path(path)
    with path.open() as fh:
        doc = json.load(fh)
    if doc.get("type") != "FeatureCollection":
        raise IngestError(f"{path}: expected a FeatureCollection")
    out: list[Trajectory] = []
    for i, feat in enumerate(doc.get("features", [])):
        where = f"{path}:feature[{i}]"
        props = feat.get("properties") or {}
        traj_id = str(props.get("id") or feat.get("id") or "").strip()
        if not traj_id:
            raise IngestError(f"{where}: missing trajectory id")
        geom = feat.get("geometry") or {}
        if geom.get("type") != "LineString":
            raise IngestError(f"{where}: geometry must be LineString, got {geom.get('type')!r}")
        coords = geom.get("coordinates") or []
        stamps = props.get("timestamps")
        if not isinstance(stamps, list) or len(stamps) != len(coords):
            raise IngestError(
                f"{where}: timestamps must be a list matching {len(coords)} coordinates"
            )
        rows: list[tuple[float, float, int]] = []
        for j, (coord, ts) in enumerate(zip(coords, stamps)):
            try:
                lon, lat = float(coord[0]), float(coord[1])
                t = parse_timestamp(ts)
            except (TypeError, ValueError, IndexError) as exc:
                raise IngestError(f"{where}: point {j}: {exc}") from exc
            if not (-180.0 <= lon <= 180.0) or not (-90.0 <= lat <= 90.0):
                raise IngestError(f"{where}: point {j}: coordinate out of range")
            rows.append((lon, lat, t))
        label = props.get("label")
        out.append(_build_trajectory(traj_id, rows, str(label) if label else None, where))
    return out


def write_trajectories_csv(trajectories: Iterable[Trajectory], path: Union[str, Path]) -> None:
    """Write the canonical CSV form: header ``id,lon,lat,t,label``, epoch times.

    Floats use repr (shortest round-trip), so load(write(x)) == x.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "lon", "lat", "t", "label"])
        for traj in trajectories:
            for p in traj.points:
                writer.writerow([traj.traj_id, repr(p.lon), repr(p.lat), p.t, traj.label or ""])
