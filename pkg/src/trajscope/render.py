"""Deterministic map rendering: mercator math, tiles, styled trajectory views.

Rendering never talks to a browser. Base imagery comes from a TileSource
(synthetic checkerboard, local directory, or HTTP with an atomic disk
cache), composited with Pillow. All drawing parameters live in a
StyleSheet, so the same inputs always produce identical PNG bytes under
a fixed Pillow build.

Web-Mercator pixel math uses the conventional 6378137 m radius; the
great-circle measure elsewhere in the package keeps its own constant.
"""

from __future__ import annotations

import base64
import io
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Sequence
import zlib

from PIL import Image, ImageDraw

from .context import (
    ContextDb,
    FilterPolicy,
    LIGHT_LAYER,
    POI_LAYER,
    ROAD_LAYER,
    filter_context,
)
from .core import METERS_PER_DEG_LAT

WEB_MERCATOR_RADIUS_M = 6_378_137.0
TILE_SIZE = 256
MAX_ZOOM = 18
_MAX_MERC_LAT = 85.05112878


def lonlat_to_world_px(lon: float, lat: float, zoom: int) -> tuple[float, float]:
    """Project lon/lat to global Web-Mercator pixel coordinates at a zoom."""
    world = TILE_SIZE * (1 << zoom)
    lat = max(-_MAX_MERC_LAT, min(_MAX_MERC_LAT, lat))
    x = (lon + 180.0) / 360.0 * world
    s = math.sin(math.radians(lat))
    y = (0.5 - math.log((1.0 + s) / (1.0 - s)) / (4.0 * math.pi)) * world
    return x, y


def meters_per_pixel(lat: float, zoom: int) -> float:
    """Ground resolution of one pixel at the given latitude and zoom."""
    return (
        math.cos(math.radians(lat))
        * 2.0
        * math.pi
        * WEB_MERCATOR_RADIUS_M
        / (TILE_SIZE * (1 << zoom))
    )


@dataclass(frozen=True, slots=True)
class ClipBox:
    """A lon/lat axis-aligned crop window."""

    min_lon: float
    min_lat: float
    max_lon: float
    max_lat: float

    def __post_init__(self) -> None:
        if self.min_lon > self.max_lon or self.min_lat > self.max_lat:
            raise ValueError("inverted clip box")

    @property
    def center(self) -> tuple[float, float]:
        return ((self.min_lon + self.max_lon) / 2.0, (self.min_lat + self.max_lat) / 2.0)

    def contains(self, lon: float, lat: float) -> bool:
        return self.min_lon <= lon <= self.max_lon and self.min_lat <= lat <= self.max_lat


def _coords(points: Sequence) -> list[tuple[float, float]]:
    out = []
    for p in points:
        if hasattr(p, "lon"):
            out.append((float(p.lon), float(p.lat)))
        else:
            out.append((float(p[0]), float(p[1])))
    if not out:
        raise ValueError("no points to clip")
    return out


def clip_box(points: Sequence, pad_ratio: float = 0.15, min_span_m: float = 100.0) -> ClipBox:
    """Padded bounding box of the points with a minimum physical span.

    Each side is padded by pad_ratio of that axis's raw span; afterwards any
    axis narrower than min_span_m is widened symmetrically about its center,
    so single-point views still produce a usable window.
    """
    pts = _coords(points)
    lons = [p[0] for p in pts]
    lats = [p[1] for p in pts]
    min_lon, max_lon = min(lons), max(lons)
    min_lat, max_lat = min(lats), max(lats)
    span_lon = max_lon - min_lon
    span_lat = max_lat - min_lat
    min_lon -= pad_ratio * span_lon
    max_lon += pad_ratio * span_lon
    min_lat -= pad_ratio * span_lat
    max_lat += pad_ratio * span_lat

    c_lat = (min_lat + max_lat) / 2.0
    m_per_deg_lon = METERS_PER_DEG_LAT * max(math.cos(math.radians(c_lat)), 0.01)
    if (max_lon - min_lon) * m_per_deg_lon < min_span_m:
        half = min_span_m / m_per_deg_lon / 2.0
        c = (min_lon + max_lon) / 2.0
        min_lon, max_lon = c - half, c + half
    if (max_lat - min_lat) * METERS_PER_DEG_LAT < min_span_m:
        half = min_span_m / METERS_PER_DEG_LAT / 2.0
        min_lat, max_lat = c_lat - half, c_lat + half
    return ClipBox(min_lon=min_lon, min_lat=min_lat, max_lon=max_lon, max_lat=max_lat)


def choose_zoom(clip: ClipBox, target_px: int, max_zoom: int = MAX_ZOOM) -> int:
    """Largest zoom <= max_zoom whose clip box fits target_px on both axes."""
    if target_px < 1:
        raise ValueError("target_px must be positive")
    for zoom in range(max_zoom, -1, -1):
        x0, y1 = lonlat_to_world_px(clip.min_lon, clip.min_lat, zoom)
        x1, y0 = lonlat_to_world_px(clip.max_lon, clip.max_lat, zoom)
        if (x1 - x0) <= target_px and (y1 - y0) <= target_px:
            return zoom
    return 0


@dataclass(frozen=True, slots=True)
class PixelFrame:
    """Integer pixel window of a clip box at a fixed zoom.

    Every lon/lat inside the clip projects into [0, width) x [0, height).
    """

    zoom: int
    origin_x: int
    origin_y: int
    width: int
    height: int


def pixel_frame(clip: ClipBox, zoom: int) -> PixelFrame:
    x0, y1 = lonlat_to_world_px(clip.min_lon, clip.min_lat, zoom)
    x1, y0 = lonlat_to_world_px(clip.max_lon, clip.max_lat, zoom)
    ox = math.floor(x0)
    oy = math.floor(y0)
    width = math.ceil(x1) - ox + 1
    height = math.ceil(y1) - oy + 1
    return PixelFrame(zoom=zoom, origin_x=ox, origin_y=oy, width=width, height=height)


def to_pixel(frame: PixelFrame, lon: float, lat: float) -> tuple[float, float]:
    x, y = lonlat_to_world_px(lon, lat, frame.zoom)
    return x - frame.origin_x, y - frame.origin_y


class TileSource(Protocol):
    """Supplies raster base tiles; returns None when a tile is unavailable."""

    def get_tile(self, zoom: int, x: int, y: int) -> Optional[bytes]: ...


class SyntheticTiles:
    """Deterministic offline checkerboard tiles, shaded per tile coordinate."""

    def get_tile(self, zoom: int, x: int, y: int) -> Optional[bytes]:
        seed = zlib.crc32(f"{zoom}/{x}/{y}".encode())
        base = 196 + (seed % 24)
        img = Image.new("RGB", (TILE_SIZE, TILE_SIZE), (base, base, base))
        draw = ImageDraw.Draw(img)
        step = 32
        for gy in range(0, TILE_SIZE, step):
            for gx in range(0, TILE_SIZE, step):
                if ((gx // step) + (gy // step) + x + y) % 2 == 0:
                    shade = base - 14
                    draw.rectangle(
                        [gx, gy, gx + step - 1, gy + step - 1],
                        fill=(shade, shade, shade + 4),
                    )
        buf = io.BytesIO()
        img.save(buf, format="PNG", optimize=False)
        return buf.getvalue()


class DirectoryTiles:
    """Tiles stored as {root}/{z}/{x}/{y}.png; missing files yield None."""

    def __init__(self, root) -> None:
        self.root = Path(root)

    def get_tile(self, zoom: int, x: int, y: int) -> Optional[bytes]:
        path = self.root / str(zoom) / str(x) / f"{y}.png"
        try:
            return path.read_bytes()
        except OSError:
            return None


class HttpTiles:
    """HTTP tile fetcher with an atomic on-disk cache.

    Downloads go to a temp file first and are renamed into place, so a
    crashed fetch never leaves a truncated tile behind. Any fetch problem
    degrades to None (missing tile) rather than raising.
    """

    def __init__(self, url_template: str, cache_dir, timeout_s: float = 10.0, client=None) -> None:
        self.url_template = url_template
        self.cache_dir = Path(cache_dir)
        self.timeout_s = timeout_s
        self._client = client

    def get_tile(self, zoom: int, x: int, y: int) -> Optional[bytes]:
        path = self.cache_dir / str(zoom) / str(x) / f"{y}.png"
        try:
            return path.read_bytes()
        except OSError:
            pass
        data = self._fetch(zoom, x, y)
        if data is None:
            return None
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(f".tmp-{os.getpid()}")
        tmp.write_bytes(data)
        os.replace(tmp, path)
        return data

    def _fetch(self, zoom: int, x: int, y: int) -> Optional[bytes]:
        import httpx

        url = self.url_template.format(z=zoom, x=x, y=y)
        try:
            client = self._client
            if client is not None:
                resp = client.get(url, timeout=self.timeout_s)
            else:
                resp = httpx.get(url, timeout=self.timeout_s)
        except Exception:
            return None
        if getattr(resp, "status_code", 0) != 200:
            return None
        return resp.content


@dataclass(frozen=True)
class StyleSheet:
    """Every visual constant for view rendering, in one immutable bundle."""

    target_px: int = 512
    pad_ratio: float = 0.15
    min_span_m: float = 100.0
    traj_width_px: int = 6
    # Trajectory stroke color per context layer.
    traj_colors: dict = field(
        default_factory=lambda: {
            POI_LAYER: "#E03030",
            ROAD_LAYER: "#2E8B57",
            LIGHT_LAYER: "#FF8C00",
        }
    )
    road_color: str = "#5A5A5A"
    road_width_px: int = 3
    poi_color: str = "#3060C8"
    poi_radius_px: int = 5
    light_color: str = "#C8A000"
    light_radius_px: int = 4
    start_color: str = "#1366D6"
    end_color: str = "#5B2C83"
    marker_radius_px: int = 8
    background: str = "#DCDCDC"
    placeholder: str = "#C8C8C8"

    def traj_color(self, layer: str) -> str:
        return self.traj_colors.get(layer, "#E03030")


@dataclass(frozen=True, slots=True)
class VisualToken:
    """One rendered view image plus its geometry and rendering diagnostics."""

    png: bytes
    width: int
    height: int
    zoom: int
    clip: ClipBox
    layer: str
    overlay_count: int
    missing_tiles: int
    warning: bool

    @property
    def b64(self) -> str:
        return base64.b64encode(self.png).decode("ascii")

    @property
    def data_url(self) -> str:
        return f"data:image/png;base64,{self.b64}"


def _circle(draw: ImageDraw.ImageDraw, x: float, y: float, r: float, color: str, outline=None):
    draw.ellipse([x - r, y - r, x + r, y + r], fill=color, outline=outline)


def _triangle(draw: ImageDraw.ImageDraw, x: float, y: float, r: float, color: str):
    h = r * 0.866
    draw.polygon([(x, y - r), (x - h, y + r / 2.0), (x + h, y + r / 2.0)], fill=color)


def render_view(
    points: Sequence,
    layer: str,
    db: Optional[ContextDb],
    policy: FilterPolicy,
    style: StyleSheet,
    tiles: Optional[TileSource],
    clip: Optional[ClipBox] = None,
) -> VisualToken:
    """Render one styled map view of a point sequence.

    The crop window defaults to clip_box(points) under the style's padding.
    Context overlays come from filter_context on the same inputs, so the
    reported overlay_count always equals that filter's cardinality. Missing
    base tiles become gray placeholders and set the warning flag.
    """
    coords = _coords(points)
    if clip is None:
        clip = clip_box(coords, style.pad_ratio, style.min_span_m)
    zoom = choose_zoom(clip, style.target_px)
    frame = pixel_frame(clip, zoom)
    img = Image.new("RGB", (frame.width, frame.height), style.background)
    draw = ImageDraw.Draw(img)

    missing = 0
    if tiles is not None:
        n_tiles = 1 << zoom
        tx0 = frame.origin_x // TILE_SIZE
        tx1 = (frame.origin_x + frame.width - 1) // TILE_SIZE
        ty0 = frame.origin_y // TILE_SIZE
        ty1 = (frame.origin_y + frame.height - 1) // TILE_SIZE
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                if not (0 <= tx < n_tiles and 0 <= ty < n_tiles):
                    continue  # outside the world: leave background
                px = tx * TILE_SIZE - frame.origin_x
                py = ty * TILE_SIZE - frame.origin_y
                data = tiles.get_tile(zoom, tx, ty)
                if data is None:
                    missing += 1
                    draw.rectangle(
                        [px, py, px + TILE_SIZE - 1, py + TILE_SIZE - 1],
                        fill=style.placeholder,
                    )
                    continue
                tile_img = Image.open(io.BytesIO(data)).convert("RGB")
                img.paste(tile_img, (px, py))
        draw = ImageDraw.Draw(img)

    overlays = filter_context(db, coords, layer, policy) if db is not None else []
    for elem in overlays:
        if layer == ROAD_LAYER:
            px_pts = [to_pixel(frame, lon, lat) for lon, lat in elem.points]
            draw.line(px_pts, fill=style.road_color, width=style.road_width_px, joint="curve")
        elif layer == POI_LAYER:
            x, y = to_pixel(frame, elem.lon, elem.lat)
            _circle(draw, x, y, style.poi_radius_px, style.poi_color, outline="#FFFFFF")
        else:
            x, y = to_pixel(frame, elem.lon, elem.lat)
            _circle(draw, x, y, style.light_radius_px, style.light_color, outline="#303030")

    px_pts = [to_pixel(frame, lon, lat) for lon, lat in coords]
    color = style.traj_color(layer)
    if len(px_pts) >= 2:
        draw.line(px_pts, fill=color, width=style.traj_width_px, joint="curve")
    _circle(draw, *px_pts[0], style.marker_radius_px, style.start_color, outline="#FFFFFF")
    _triangle(draw, *px_pts[-1], style.marker_radius_px, style.end_color)

    buf = io.BytesIO()
    img.save(buf, format="PNG", optimize=False)
    return VisualToken(
        png=buf.getvalue(),
        width=frame.width,
        height=frame.height,
        zoom=zoom,
        clip=clip,
        layer=layer,
        overlay_count=len(overlays),
        missing_tiles=missing,
        warning=missing > 0,
    )
