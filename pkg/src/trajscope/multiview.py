"""Multiview assembly: interleaved image/text pairs for one trajectory.

For a trajectory with N optimal sub-segments and Z context layers, the
assembled sequence holds (1 + N) * Z pairs: every layer of the global
view (the whole trajectory) followed by every layer of each local view
(one per sub-segment). Items are ordered by (view, partition, layer)
rank, where view rank is global < local, partitions ascend, and layer
rank is the position in the configured layer tuple.

Each pair carries an anchor line naming its view, layer, and segment and
ending in the literal ``<image>`` placeholder that precedes the image
content in gateway payloads.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from PIL import Image

from .context import ContextDb, FilterPolicy
from .core import Trajectory
from .render import ClipBox, StyleSheet, TileSource, VisualToken, clip_box, render_view
from .segmentation import Segmentation
from .tokens import TextFeatures, TextToken, render_description, text_token

GLOBAL_VIEW = "global"
LOCAL_VIEW = "local"
VIEW_ORDER = (GLOBAL_VIEW, LOCAL_VIEW)

_LAYER_DISPLAY = {"poi": "POI", "road": "road", "light": "traffic light"}

IMAGE_PLACEHOLDER = "<image>"


@dataclass(frozen=True, slots=True)
class SpatialView:
    """One spatial granularity: the partitions it renders (1-based ranges)."""

    kind: str
    partitions: tuple[tuple[int, int], ...]


def build_views(traj: Trajectory, seg: Segmentation) -> tuple[SpatialView, SpatialView]:
    """The two standard views: whole trajectory, then the optimal segments."""
    if seg.boundaries[0][0] != 1 or seg.boundaries[-1][1] != len(traj):
        raise ValueError("segmentation does not cover the trajectory")
    return (
        SpatialView(GLOBAL_VIEW, ((1, len(traj)),)),
        SpatialView(LOCAL_VIEW, seg.boundaries),
    )


def make_anchor(view: str, partition_index: int, layer: str) -> str:
    """Anchor line naming the pair and carrying the image placeholder."""
    display = _LAYER_DISPLAY.get(layer, layer)
    return f"{view.capitalize()} view, {display} image of segment {partition_index}: {IMAGE_PLACEHOLDER}"


@dataclass(frozen=True, slots=True)
class MultimodalPair:
    """One interleaved item: an anchored image plus its text description."""

    view: str
    partition_index: int
    layer: str
    anchor: str
    image: VisualToken
    text: TextToken


@dataclass(frozen=True, slots=True)
class InterleavedSequence:
    """The full multimodal token sequence for one trajectory."""

    trajectory_id: str
    layers: tuple[str, ...]
    n_segments: int
    items: tuple[MultimodalPair, ...]

    def expected_item_count(self) -> int:
        return (1 + self.n_segments) * len(self.layers)


def _placeholder_token(layer: str, points: Sequence, style: StyleSheet) -> VisualToken:
    # Render failed for this pair: emit a tiny flagged placeholder so the
    # sequence keeps its shape instead of aborting.
    img = Image.new("RGB", (8, 8), style.placeholder)
    buf = io.BytesIO()
    img.save(buf, format="PNG", optimize=False)
    clip = clip_box(points, style.pad_ratio, style.min_span_m)
    return VisualToken(
        png=buf.getvalue(),
        width=8,
        height=8,
        zoom=0,
        clip=clip,
        layer=layer,
        overlay_count=0,
        missing_tiles=0,
        warning=True,
    )


def assemble(
    traj: Trajectory,
    seg: Segmentation,
    db: Optional[ContextDb],
    policy: FilterPolicy,
    style: StyleSheet,
    tiles: Optional[TileSource],
    layers: Sequence[str] = ("poi", "road"),
    redaction: frozenset = frozenset(),
) -> InterleavedSequence:
    """Build the interleaved sequence for one trajectory.

    Pairs are generated view by view, partition by partition, layer by
    layer; render failures degrade to warning-flagged placeholder items.
    The redaction mask applies to every text description (task masking).
    """
    if not layers:
        raise ValueError("at least one context layer is required")
    views = build_views(traj, seg)
    items: list[MultimodalPair] = []
    for view in views:
        for p_idx, (a, b) in enumerate(view.partitions, start=1):
            points = traj.slice(a, b)
            text = text_token(points, redaction)
            for layer in layers:
                try:
                    image = render_view(points, layer, db, policy, style, tiles)
                except Exception:
                    image = _placeholder_token(layer, points, style)
                items.append(
                    MultimodalPair(
                        view=view.kind,
                        partition_index=p_idx,
                        layer=layer,
                        anchor=make_anchor(view.kind, p_idx, layer),
                        image=image,
                        text=text,
                    )
                )
    return InterleavedSequence(
        trajectory_id=traj.traj_id,
        layers=tuple(layers),
        n_segments=len(seg.boundaries),
        items=tuple(items),
    )


def item_rank(seq: InterleavedSequence, pair: MultimodalPair) -> tuple[int, int, int]:
    """(view, partition, layer) rank triple used for the canonical order."""
    return (
        VIEW_ORDER.index(pair.view),
        pair.partition_index,
        seq.layers.index(pair.layer),
    )


def _features_dict(f: TextFeatures) -> dict:
    return {
        "start_t": f.start_t,
        "end_t": f.end_t,
        "duration_s": f.duration_s,
        "distance_m": f.distance_m,
        "avg_speed_ms": f.avg_speed_ms,
        "max_speed_ms": f.max_speed_ms,
        "min_speed_ms": f.min_speed_ms,
    }


def _features_from_dict(d: dict) -> TextFeatures:
    return TextFeatures(
        start_t=d["start_t"],
        end_t=d["end_t"],
        duration_s=d["duration_s"],
        distance_m=d["distance_m"],
        avg_speed_ms=d["avg_speed_ms"],
        max_speed_ms=d["max_speed_ms"],
        min_speed_ms=d["min_speed_ms"],
    )


def serialize_sequence(seq: InterleavedSequence, out_dir) -> Path:
    """Write a sequence as PNG files plus pairs.jsonl and manifest.json.

    Deterministic: fixed file naming, sorted JSON keys, no timestamps.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pair_lines = []
    for ordinal, pair in enumerate(seq.items):
        image_file = f"{ordinal:03d}_{pair.view}_{pair.partition_index:02d}_{pair.layer}.png"
        (out / image_file).write_bytes(pair.image.png)
        pair_lines.append(
            {
                "ordinal": ordinal,
                "view": pair.view,
                "partition_index": pair.partition_index,
                "layer": pair.layer,
                "anchor": pair.anchor,
                "image_file": image_file,
                "zoom": pair.image.zoom,
                "width": pair.image.width,
                "height": pair.image.height,
                "clip": [
                    pair.image.clip.min_lon,
                    pair.image.clip.min_lat,
                    pair.image.clip.max_lon,
                    pair.image.clip.max_lat,
                ],
                "overlay_count": pair.image.overlay_count,
                "missing_tiles": pair.image.missing_tiles,
                "warning": pair.image.warning,
                "text_rendered": pair.text.rendered,
                "text_masked": sorted(pair.text.masked),
                "text_features": _features_dict(pair.text.features),
            }
        )
    with (out / "pairs.jsonl").open("w") as fh:
        for line in pair_lines:
            fh.write(json.dumps(line, sort_keys=True, separators=(",", ":")) + "\n")
    manifest = {
        "trajectory_id": seq.trajectory_id,
        "layers": list(seq.layers),
        "views": list(VIEW_ORDER),
        "n_segments": seq.n_segments,
        "item_count": len(seq.items),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return out


def deserialize_sequence(in_dir) -> InterleavedSequence:
    """Reload a serialized sequence; inverse of serialize_sequence."""
    src = Path(in_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    items: list[MultimodalPair] = []
    with (src / "pairs.jsonl").open() as fh:
        for raw in fh:
            doc = json.loads(raw)
            png = (src / doc["image_file"]).read_bytes()
            clip = ClipBox(*doc["clip"])
            image = VisualToken(
                png=png,
                width=doc["width"],
                height=doc["height"],
                zoom=doc["zoom"],
                clip=clip,
                layer=doc["layer"],
                overlay_count=doc["overlay_count"],
                missing_tiles=doc["missing_tiles"],
                warning=doc["warning"],
            )
            text = TextToken(
                features=_features_from_dict(doc["text_features"]),
                masked=frozenset(doc["text_masked"]),
                rendered=doc["text_rendered"],
            )
            items.append(
                MultimodalPair(
                    view=doc["view"],
                    partition_index=doc["partition_index"],
                    layer=doc["layer"],
                    anchor=doc["anchor"],
                    image=image,
                    text=text,
                )
            )
    return InterleavedSequence(
        trajectory_id=manifest["trajectory_id"],
        layers=tuple(manifest["layers"]),
        n_segments=manifest["n_segments"],
        items=tuple(items),
    )


def to_chat_parts(seq: InterleavedSequence) -> list:
    """Flatten a sequence into gateway content parts.

    Each pair contributes a text part (anchor line, then the description)
    followed by its image part, preserving sequence order so the
    ``<image>`` placeholder always directly precedes its image.
    """
    from .gateway import ImagePart, TextPart

    parts: list = []
    for pair in seq.items:
        parts.append(TextPart(text=f"{pair.anchor}\n{pair.text.rendered}"))
        parts.append(ImagePart(b64=pair.image.b64))
    return parts
