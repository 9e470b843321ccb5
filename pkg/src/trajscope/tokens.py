"""Textual tokens: fixed-template motion summaries for sub-trajectories.

The rendered block is byte-deterministic: field order, labels, rounding
(distance to 1 decimal, speeds to 2), and the 40-hyphen footer never
vary. Features store the display-rounded values, so parsing a rendered
block recovers the features exactly.

Masked fields render as the literal ``[withheld]``; fields with no
defined value (single-point segments) render as ``[n/a]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

from .core import TrajPoint, format_timestamp, kinematics, parse_timestamp

HEADER = "--- Sub-trajectory Segment Description ---"
FOOTER = "-" * 40
WITHHELD = "[withheld]"
NOT_AVAILABLE = "[n/a]"

FIELD_LABELS = {
    "start_time": "Start Time",
    "end_time": "End Time",
    "duration": "Duration (seconds)",
    "distance": "Total Distance (meters)",
    "avg_speed": "Average Speed (m/s)",
    "max_speed": "Maximum Speed (m/s)",
    "min_speed": "Minimum Speed (m/s)",
}
FIELD_ORDER = tuple(FIELD_LABELS)
_LABEL_TO_FIELD = {v: k for k, v in FIELD_LABELS.items()}


class TemplateError(ValueError):
    """A rendered description block that does not match the template."""


@dataclass(frozen=True, slots=True)
class TextFeatures:
    """Display-rounded motion summary of one sub-trajectory.

    None marks an undefined value (no steps, or all-zero speeds for the
    minimum). Timestamps are epoch seconds.
    """

    start_t: Optional[int]
    end_t: Optional[int]
    duration_s: Optional[int]
    distance_m: Optional[float]
    avg_speed_ms: Optional[float]
    max_speed_ms: Optional[float]
    min_speed_ms: Optional[float]

    @classmethod
    def from_points(cls, points: Sequence[TrajPoint]) -> "TextFeatures":
        k = kinematics(points)
        rnd2 = lambda v: None if v is None else round(v, 2)
        return cls(
            start_t=points[0].t,
            end_t=points[-1].t,
            duration_s=k.duration_s,
            distance_m=round(k.total_distance_m, 1),
            avg_speed_ms=rnd2(k.avg_speed_ms),
            max_speed_ms=rnd2(k.max_speed_ms),
            min_speed_ms=rnd2(k.min_speed_ms),
        )

    def value_of(self, field: str):
        return {
            "start_time": self.start_t,
            "end_time": self.end_t,
            "duration": self.duration_s,
            "distance": self.distance_m,
            "avg_speed": self.avg_speed_ms,
            "max_speed": self.max_speed_ms,
            "min_speed": self.min_speed_ms,
        }[field]


def _format_value(field: str, value) -> str:
    if value is None:
        return NOT_AVAILABLE
    if field in ("start_time", "end_time"):
        return format_timestamp(value)
    if field == "duration":
        return str(int(value))
    if field == "distance":
        return f"{value:.1f}"
    return f"{value:.2f}"


def render_description(features: TextFeatures, masked: frozenset = frozenset()) -> str:
    """Render the fixed template; masked fields become [withheld]."""
    unknown = set(masked) - set(FIELD_ORDER)
    if unknown:
        raise ValueError(f"unknown masked fields: {sorted(unknown)}")
    lines = [HEADER]
    for field in FIELD_ORDER:
        if field in masked:
            text = WITHHELD
        else:
            text = _format_value(field, features.value_of(field))
        lines.append(f"{FIELD_LABELS[field]}: {text}")
    lines.append(FOOTER)
    return "\n".join(lines)


@dataclass(frozen=True, slots=True)
class TextToken:
    """A rendered description plus the features and mask that produced it."""

    features: TextFeatures
    masked: frozenset
    rendered: str


def text_token(points: Sequence[TrajPoint], masked: frozenset = frozenset()) -> TextToken:
    feats = TextFeatures.from_points(points)
    return TextToken(features=feats, masked=frozenset(masked), rendered=render_description(feats, masked))


def parse_description(rendered: str) -> tuple[TextFeatures, frozenset]:
    """Invert render_description: recover features and the masked field set.

    Masked fields parse to None values but are reported in the mask, so
    (parse o render) is the identity on unmasked fields.
    """
    lines = rendered.strip("\n").split("\n")
    if len(lines) != 2 + len(FIELD_ORDER) or lines[0] != HEADER or lines[-1] != FOOTER:
        raise TemplateError("not a description block")
    values: dict = {}
    masked: set = set()
    for line, expect_field in zip(lines[1:-1], FIELD_ORDER):
        label, sep, raw = line.partition(": ")
        if not sep or _LABEL_TO_FIELD.get(label) != expect_field:
            raise TemplateError(f"unexpected line {line!r}")
        raw = raw.strip()
        if raw == WITHHELD:
            masked.add(expect_field)
            values[expect_field] = None
        elif raw == NOT_AVAILABLE:
            values[expect_field] = None
        elif expect_field in ("start_time", "end_time"):
            values[expect_field] = parse_timestamp(raw)
        elif expect_field == "duration":
            values[expect_field] = int(raw)
        else:
            values[expect_field] = float(raw)
    feats = TextFeatures(
        start_t=values["start_time"],
        end_t=values["end_time"],
        duration_s=values["duration"],
        distance_m=values["distance"],
        avg_speed_ms=values["avg_speed"],
        max_speed_ms=values["max_speed"],
        min_speed_ms=values["min_speed"],
    )
    return feats, frozenset(masked)
