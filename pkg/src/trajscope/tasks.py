"""Task definitions: masking, anomaly synthesis, answer grammars, metrics.

Four downstream tasks share the pipeline: travel-time estimation (tte),
anomaly detection (ad), destination region prediction (mp), and travel
mode identification (tmi). This module owns what each task hides from
the model, how synthetic anomalies are made, how raw model replies parse
into predictions, and how predictions score against truth.

Parse failures are never silently dropped: a failed tte parse scores as
a zero-second prediction (maximal error) and a failed classification
parse becomes the reserved label "__invalid__", which can never equal a
truth label. Failure counts are reported alongside the metrics.
"""

from __future__ import annotations

import math
import random
import re
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .core import Trajectory, bearing_deg, haversine_m, offset_point, parse_timestamp
from .prompting import RoundEval, SeedCase

INVALID_LABEL = "__invalid__"

TMI_MODES = ("walk", "bike", "bus", "car", "train")

# Travel-time estimation hides everything that would reveal the answer;
# the start time stays visible so arrival-time answers can be grounded.
TTE_MASK = frozenset({"end_time", "duration", "avg_speed", "max_speed", "min_speed"})


@dataclass(frozen=True, slots=True)
class TaskSpec:
    name: str
    redaction: frozenset
    truth_kind: str  # duration | label | region | mode


TASKS = {
    "tte": TaskSpec("tte", TTE_MASK, "duration"),
    "ad": TaskSpec("ad", frozenset(), "label"),
    "mp": TaskSpec("mp", frozenset(), "region"),
    "tmi": TaskSpec("tmi", frozenset(), "mode"),
}


def truncate_for_prediction(traj: Trajectory, fraction: float = 0.2) -> Trajectory:
    """Drop the final fraction of points (the part the model must predict).

    Keeps ceil((1 - fraction) * L) points, at least one. Applied before
    segmentation and assembly so nothing about the hidden suffix leaks
    into any rendered view or description.
    """
    if not (0.0 < fraction < 1.0):
        raise ValueError("fraction must be in (0, 1)")
    keep = max(1, math.ceil((1.0 - fraction) * len(traj)))
    return replace(traj, points=traj.points[:keep])


@dataclass(frozen=True, slots=True)
class RegionGrid:
    """Uniform rows x cols grid over a bounding box, labeled RrrCcc.

    Row 0 is the northernmost band, column 0 the westernmost; points
    outside the box clamp to the nearest edge cell.
    """

    min_lon: float
    min_lat: float
    max_lon: float
    max_lat: float
    rows: int = 32
    cols: int = 32

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid must have at least one row and column")
        if self.min_lon >= self.max_lon or self.min_lat >= self.max_lat:
            raise ValueError("degenerate region grid bbox")

    @classmethod
    def from_trajectories(cls, trajs: Sequence[Trajectory], rows: int = 32, cols: int = 32) -> "RegionGrid":
        lons = [p.lon for t in trajs for p in t.points]
        lats = [p.lat for t in trajs for p in t.points]
        if not lons:
            raise ValueError("no points to build a region grid from")
        pad = 1e-6  # keep max-edge points strictly inside
        return cls(
            min_lon=min(lons) - pad,
            min_lat=min(lats) - pad,
            max_lon=max(lons) + pad,
            max_lat=max(lats) + pad,
            rows=rows,
            cols=cols,
        )

    def region_id(self, lon: float, lat: float) -> str:
        col = int((lon - self.min_lon) / (self.max_lon - self.min_lon) * self.cols)
        row_from_south = int((lat - self.min_lat) / (self.max_lat - self.min_lat) * self.rows)
        col = min(max(col, 0), self.cols - 1)
        row_from_south = min(max(row_from_south, 0), self.rows - 1)
        row = self.rows - 1 - row_from_south
        return f"R{row:02d}C{col:02d}"

    def vocabulary(self) -> list[str]:
        return [f"R{r:02d}C{c:02d}" for r in range(self.rows) for c in range(self.cols)]


# ---------------------------------------------------------------------------
# Anomaly synthesis


@dataclass(frozen=True, slots=True)
class DetourParams:
    """Contiguous perpendicular displacement: size alpha, distance d cells.

    Common presets: low (0.05, 2), medium (0.1, 3), high (0.2, 5).
    """

    alpha: float = 0.1
    displacement_cells: float = 3.0
    grid_cell_m: float = 50.0


@dataclass(frozen=True, slots=True)
class SwitchParams:
    """Route switch onto a donor trajectory after the first mu of points."""

    mu: float = 0.3
    endpoint_tolerance_m: float = 1000.0


def inject_detour(
    traj: Trajectory, params: DetourParams, rng: random.Random
) -> tuple[Trajectory, dict]:
    """Displace a contiguous interior run of ceil(alpha * L) points sideways.

    Each run point moves displacement_cells * grid_cell_m meters along the
    bearing perpendicular to the run's own heading (side chosen by rng).
    Endpoints are never displaced; undisturbed points are untouched, and
    timestamps keep their original values.
    """
    L = len(traj)
    if L < 5:
        raise ValueError(f"trajectory {traj.traj_id!r} too short for a detour (L={L})")
    if not (0.0 < params.alpha <= 1.0):
        raise ValueError("alpha must be in (0, 1]")
    n = math.ceil(params.alpha * L)
    if n > L - 2:
        raise ValueError(f"detour of {n} points does not fit interior of L={L}")
    start = rng.randint(1, L - 1 - n)  # 0-based; run = [start, start + n - 1]
    run = traj.points[start : start + n]
    a, b = run[0], run[-1]
    if (a.lon, a.lat) != (b.lon, b.lat):
        heading = bearing_deg(a.lon, a.lat, b.lon, b.lat)
    else:
        prev_p = traj.points[start - 1]
        next_p = traj.points[min(start + n, L - 1)]
        heading = bearing_deg(prev_p.lon, prev_p.lat, next_p.lon, next_p.lat)
    side = rng.choice((90.0, -90.0))
    bearing = (heading + side) % 360.0
    dist = params.displacement_cells * params.grid_cell_m

    pts = list(traj.points)
    for i in range(start, start + n):
        p = pts[i]
        lon, lat = offset_point(p.lon, p.lat, bearing, dist)
        pts[i] = replace(p, lon=lon, lat=lat)
    out = replace(traj, points=tuple(pts), label="anomaly")
    manifest = {
        "kind": "detour",
        "trajectory_id": traj.traj_id,
        "start_index": start,
        "point_count": n,
        "bearing_deg": bearing,
        "displacement_m": dist,
    }
    return out, manifest


def donor_compatible(traj: Trajectory, donor: Trajectory, tolerance_m: float) -> bool:
    """Endpoints of both trips lie within tolerance of each other."""
    return (
        haversine_m(traj.start.lon, traj.start.lat, donor.start.lon, donor.start.lat)
        <= tolerance_m
        and haversine_m(traj.end.lon, traj.end.lat, donor.end.lon, donor.end.lat)
        <= tolerance_m
    )


def inject_switch(
    traj: Trajectory, donor: Trajectory, params: SwitchParams, rng: random.Random
) -> tuple[Trajectory, dict]:
    """Keep the first ceil(mu * L) points, then continue along the donor.

    The donor is entered at its point nearest to the last kept fix; donor
    timestamps are rebased to continue monotonically from the kept prefix.
    """
    L = len(traj)
    if L < 5 or len(donor) < 5:
        raise ValueError("both trajectories need at least 5 points for a switch")
    if not (0.0 < params.mu < 1.0):
        raise ValueError("mu must be in (0, 1)")
    if not donor_compatible(traj, donor, params.endpoint_tolerance_m):
        raise ValueError(
            f"donor {donor.traj_id!r} endpoints too far from {traj.traj_id!r}"
        )
    k = math.ceil(params.mu * L)
    kept = traj.points[:k]
    last = kept[-1]
    join = min(
        range(len(donor.points)),
        key=lambda j: (haversine_m(last.lon, last.lat, donor.points[j].lon, donor.points[j].lat), j),
    )
    suffix = donor.points[join:]
    if k < L:
        gap = max(traj.points[k].t - last.t, 1)
    else:
        gaps = [b.t - a.t for a, b in zip(traj.points, traj.points[1:])] or [1]
        gap = max(int(np.median(gaps)), 1)
    offset = last.t + gap - suffix[0].t
    rebased = tuple(replace(p, t=p.t + offset) for p in suffix)
    out = replace(traj, points=kept + rebased, label="anomaly")
    manifest = {
        "kind": "switch",
        "trajectory_id": traj.traj_id,
        "kept_points": k,
        "donor_id": donor.traj_id,
        "donor_join_index": join,
        "suffix_points": len(rebased),
    }
    return out, manifest


@dataclass(frozen=True, slots=True)
class BenchmarkParams:
    inject_ratio: float = 0.05
    min_pool: int = 40
    detour: DetourParams = DetourParams()
    switch: SwitchParams = SwitchParams()


def build_anomaly_benchmark(
    pool: Sequence[Trajectory], params: BenchmarkParams, seed: int
) -> tuple[list[Trajectory], dict]:
    """Label a pool for anomaly detection, injecting synthetic anomalies.

    ceil(inject_ratio * |pool|) members are replaced: the first
    ceil(n / 2) (in index order) get detours, the rest get switches whose
    donors are drawn from compatible other pool members. Everything is
    driven by one seeded RNG, so the same seed reproduces the benchmark
    byte for byte.
    """
    if len(pool) < params.min_pool:
        raise ValueError(f"pool of {len(pool)} is below the minimum {params.min_pool}")
    rng = random.Random(seed)
    n = math.ceil(params.inject_ratio * len(pool))
    chosen = sorted(rng.sample(range(len(pool)), n))
    n_detours = math.ceil(n / 2)
    detour_set = set(chosen[:n_detours])
    switch_set = set(chosen[n_detours:])

    out: list[Trajectory] = []
    records: list[dict] = []
    for i, traj in enumerate(pool):
        if i in detour_set:
            new, rec = inject_detour(traj, params.detour, rng)
            out.append(new)
            records.append(rec)
        elif i in switch_set:
            candidates = [
                d
                for j, d in enumerate(pool)
                if j != i
                and len(d) >= 5
                and donor_compatible(traj, d, params.switch.endpoint_tolerance_m)
            ]
            if not candidates:
                raise ValueError(f"no compatible donor for {traj.traj_id!r}")
            donor = rng.choice(candidates)
            new, rec = inject_switch(traj, donor, params.switch, rng)
            out.append(new)
            records.append(rec)
        else:
            out.append(replace(traj, label="normal"))
    manifest = {
        "pool_size": len(pool),
        "n_anomalies": n,
        "n_detours": n_detours,
        "n_switches": n - n_detours,
        "seed": seed,
        "anomalies": records,
    }
    return out, manifest


# ---------------------------------------------------------------------------
# Answer grammars


@dataclass(frozen=True, slots=True)
class ParsedAnswer:
    ok: bool
    task: str
    value: object = None
    error: Optional[str] = None


_ARRIVAL_RE = re.compile(r"Estimated Arrival Time:\s*(.+?)\s*$", re.IGNORECASE)
_DURATION_RE = re.compile(r"Estimated Duration Seconds:\s*([0-9]+(?:\.[0-9]+)?)\s*$", re.IGNORECASE)
_JUDGMENT_RE = re.compile(r"Final Judgment:\s*(Anomaly|Normal)\s*\.?\s*$", re.IGNORECASE)
_CONFIDENCE_RE = re.compile(r"Confidence:\s*([0-9]*\.?[0-9]+)\s*$", re.IGNORECASE)
_REGION_LINE_RE = re.compile(r"^\s*(?:\d+[.)]\s*)?(R\d{2}C\d{2})\s*\.?\s*$")


def parse_answer(task: str, text: str, *, start_t: Optional[int] = None) -> ParsedAnswer:
    """Parse a model reply under the task's answer grammar.

    tte yields a duration in seconds (arrival-time answers are normalized
    against start_t), ad yields (label, confidence), mp an ordered region
    list (up to 5), tmi a mode name.
    """
    if task == "tte":
        return _parse_tte(text, start_t)
    if task == "ad":
        return _parse_ad(text)
    if task == "mp":
        return _parse_mp(text)
    if task == "tmi":
        return _parse_tmi(text)
    raise ValueError(f"unknown task {task!r}")


def _parse_tte(text: str, start_t: Optional[int]) -> ParsedAnswer:
    for line in reversed(text.splitlines()):
        m = _DURATION_RE.search(line)
        if m:
            return ParsedAnswer(True, "tte", float(m.group(1)))
        m = _ARRIVAL_RE.search(line)
        if m:
            if start_t is None:
                return ParsedAnswer(False, "tte", error="arrival answer without a start time")
            try:
                arrival = parse_timestamp(m.group(1))
            except ValueError as exc:
                return ParsedAnswer(False, "tte", error=f"bad arrival time: {exc}")
            duration = arrival - start_t
            if duration < 0:
                return ParsedAnswer(False, "tte", error="arrival before start")
            return ParsedAnswer(True, "tte", float(duration))
    return ParsedAnswer(False, "tte", error="no answer line found")


def _parse_ad(text: str) -> ParsedAnswer:
    label = None
    confidence = 0.5
    for line in reversed(text.splitlines()):
        if label is None:
            m = _JUDGMENT_RE.search(line)
            if m:
                label = m.group(1).lower()
                continue
        m = _CONFIDENCE_RE.search(line)
        if m and label is None:
            # confidence line may trail the judgment line
            confidence = min(max(float(m.group(1)), 0.0), 1.0)
    if label is None:
        return ParsedAnswer(False, "ad", error="no final judgment line")
    return ParsedAnswer(True, "ad", (label, confidence))


def _parse_mp(text: str) -> ParsedAnswer:
    regions: list[str] = []
    for line in text.splitlines():
        m = _REGION_LINE_RE.match(line)
        if m and m.group(1) not in regions:
            regions.append(m.group(1))
    if not regions:
        return ParsedAnswer(False, "mp", error="no region lines found")
    return ParsedAnswer(True, "mp", tuple(regions[:5]))


def _parse_tmi(text: str) -> ParsedAnswer:
    for line in reversed(text.splitlines()):
        stripped = line.strip().rstrip(".").strip().lower()
        if not stripped:
            continue
        if stripped in TMI_MODES:
            return ParsedAnswer(True, "tmi", stripped)
        return ParsedAnswer(False, "tmi", error=f"final line is not a bare mode name: {line.strip()!r}")
    return ParsedAnswer(False, "tmi", error="empty reply")


# ---------------------------------------------------------------------------
# Metrics


def regression_metrics(truths: Sequence[float], preds: Sequence[float]) -> dict:
    """MAE, RMSE, and MAPE (percent) over paired prediction vectors."""
    t = np.asarray(truths, dtype=np.float64)
    p = np.asarray(preds, dtype=np.float64)
    if t.shape != p.shape or t.size == 0:
        raise ValueError("regression metrics need matching non-empty vectors")
    err = np.abs(p - t)
    out = {
        "mae": float(err.mean()),
        "rmse": float(np.sqrt((err**2).mean())),
    }
    nz = t != 0
    out["mape_pct"] = float((err[nz] / t[nz]).mean() * 100.0) if nz.any() else None
    return out


def pr_auc(labels: Sequence[int], scores: Sequence[float]) -> Optional[float]:
    """Area under the precision-recall curve.

    Cases are ranked by score descending (stable: original order breaks
    ties), the precision/recall point after every prefix is collected,
    a (recall 0, precision 1) anchor is prepended, and the area comes
    from the trapezoid rule over recall. None when there are no
    positive labels.
    """
    y = list(labels)
    s = list(scores)
    if len(y) != len(s) or not y:
        raise ValueError("pr_auc needs matching non-empty vectors")
    n_pos = sum(1 for v in y if v == 1)
    if n_pos == 0:
        return None
    order = sorted(range(len(s)), key=lambda i: (-s[i], i))
    tp = 0
    fp = 0
    points: list[tuple[float, float]] = [(0.0, 1.0)]
    for i in order:
        if y[i] == 1:
            tp += 1
        else:
            fp += 1
        points.append((tp / n_pos, tp / (tp + fp)))
    area = 0.0
    for (r1, p1), (r2, p2) in zip(points, points[1:]):
        area += (r2 - r1) * (p1 + p2) / 2.0
    return area


def classification_metrics(truths: Sequence[str], preds: Sequence[str]) -> dict:
    """Accuracy plus per-class precision/recall/F1 with macro and weighted averages.

    The class set is the union of truth labels and valid predicted labels;
    the reserved invalid label never forms a class but its predictions
    still count against their truth class's recall.
    """
    if len(truths) != len(preds) or not truths:
        raise ValueError("classification metrics need matching non-empty vectors")
    classes = sorted(set(truths) | {p for p in preds if p != INVALID_LABEL})
    per_class: dict[str, dict] = {}
    f1s: list[float] = []
    weights: list[int] = []
    for c in classes:
        tp = sum(1 for t, p in zip(truths, preds) if t == c and p == c)
        fp = sum(1 for t, p in zip(truths, preds) if t != c and p == c)
        fn = sum(1 for t, p in zip(truths, preds) if t == c and p != c)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        support = sum(1 for t in truths if t == c)
        per_class[c] = {
            "precision": precision,
            "recall": recall,
            "f1": f1,
            "support": support,
        }
        f1s.append(f1)
        weights.append(support)
    total = sum(weights)
    macro = sum(f1s) / len(f1s) if f1s else 0.0
    weighted = sum(f * w for f, w in zip(f1s, weights)) / total if total else 0.0
    accuracy = sum(1 for t, p in zip(truths, preds) if t == p) / len(truths)
    return {
        "accuracy": accuracy,
        "macro_f1": macro,
        "weighted_f1": weighted,
        "per_class": per_class,
    }


def topk_accuracy(truths: Sequence[str], ranked: Sequence[Sequence[str]], k: int) -> float:
    if len(truths) != len(ranked) or not truths:
        raise ValueError("topk needs matching non-empty vectors")
    hit = sum(1 for t, r in zip(truths, ranked) if t in list(r)[:k])
    return hit / len(truths)


# ---------------------------------------------------------------------------
# Scoring model outputs end to end


@dataclass(frozen=True, slots=True)
class ResultRow:
    """One raw model result as persisted by the run stage."""

    case_id: str
    truth: str
    response: str
    start_t: Optional[int] = None


@dataclass(frozen=True, slots=True)
class MetricsReport:
    task: str
    n_cases: int
    n_parsed: int
    n_parse_failures: int
    metrics: dict
    undefined: tuple[str, ...] = ()

    def to_json_dict(self) -> dict:
        return {
            "task": self.task,
            "n_cases": self.n_cases,
            "n_parsed": self.n_parsed,
            "n_parse_failures": self.n_parse_failures,
            "metrics": self.metrics,
            "undefined": list(self.undefined),
        }

    def to_text(self) -> str:
        lines = [
            f"task: {self.task}",
            f"cases: {self.n_cases} (parsed {self.n_parsed}, parse failures {self.n_parse_failures})",
        ]
        for key, value in self.metrics.items():
            if key == "per_class":
                for c, row in value.items():
                    lines.append(
                        f"  class {c}: precision {row['precision']:.4f} "
                        f"recall {row['recall']:.4f} f1 {row['f1']:.4f} support {row['support']}"
                    )
            elif isinstance(value, float):
                lines.append(f"{key}: {value:.6f}")
            else:
                lines.append(f"{key}: {value}")
        if self.undefined:
            lines.append(f"undefined: {', '.join(self.undefined)}")
        return "\n".join(lines)


def score_results(task: str, rows: Sequence[ResultRow]) -> MetricsReport:
    """Parse raw responses and compute the task's metric suite."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    if not rows:
        raise ValueError("no results to score")
    parsed = [parse_answer(task, r.response, start_t=r.start_t) for r in rows]
    n_fail = sum(1 for p in parsed if not p.ok)
    undefined: list[str] = []

    if task == "tte":
        truths = [float(r.truth) for r in rows]
        preds = [float(p.value) if p.ok else 0.0 for p in parsed]
        metrics = regression_metrics(truths, preds)
        if metrics["mape_pct"] is None:
            undefined.append("mape_pct")
            metrics.pop("mape_pct")
    elif task == "ad":
        truths = [r.truth for r in rows]
        labels = [p.value[0] if p.ok else INVALID_LABEL for p in parsed]
        scores = [
            (p.value[1] if p.value[0] == "anomaly" else 1.0 - p.value[1]) if p.ok else 0.0
            for p in parsed
        ]
        y = [1 if t == "anomaly" else 0 for t in truths]
        metrics = classification_metrics(truths, labels)
        auc = pr_auc(y, scores)
        if auc is None:
            undefined.append("pr_auc")
        else:
            metrics["pr_auc"] = auc
    elif task == "mp":
        truths = [r.truth for r in rows]
        ranked = [list(p.value) if p.ok else [] for p in parsed]
        metrics = {
            "acc_at_1": topk_accuracy(truths, ranked, 1),
            "acc_at_5": topk_accuracy(truths, ranked, 5),
        }
    else:  # tmi
        truths = [r.truth for r in rows]
        labels = [p.value if p.ok else INVALID_LABEL for p in parsed]
        metrics = classification_metrics(truths, labels)

    return MetricsReport(
        task=task,
        n_cases=len(rows),
        n_parsed=len(rows) - n_fail,
        n_parse_failures=n_fail,
        metrics=metrics,
        undefined=tuple(undefined),
    )


def make_seed_scorer(task: str):
    """Scorer for the optimization loop: score in [0, 1] plus agreements.

    tte scores 1 - MAPE/100 (clamped at 0) with agreement at relative
    error <= 20%; classification tasks score accuracy with agreement on
    top answer equality.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")

    def scorer(seeds: Sequence[SeedCase], outputs: Sequence[str]) -> RoundEval:
        agreements: list[bool] = []
        if task == "tte":
            errors: list[float] = []
            for case, out in zip(seeds, outputs):
                truth = float(case.truth)
                p = parse_answer("tte", out, start_t=case.start_t)
                pred = float(p.value) if p.ok else 0.0
                rel = abs(pred - truth) / truth if truth > 0 else 1.0
                errors.append(rel)
                agreements.append(p.ok and rel <= 0.2)
            mape = sum(errors) / len(errors) * 100.0
            score = max(0.0, 1.0 - mape / 100.0)
            return RoundEval(score=score, agreements=tuple(agreements))
        for case, out in zip(seeds, outputs):
            p = parse_answer(task, out, start_t=case.start_t)
            if not p.ok:
                agreements.append(False)
                continue
            if task == "ad":
                agreements.append(p.value[0] == case.truth)
            elif task == "mp":
                agreements.append(bool(p.value) and p.value[0] == case.truth)
            else:
                agreements.append(p.value == case.truth)
        score = sum(agreements) / len(agreements)
        return RoundEval(score=score, agreements=tuple(agreements))

    return scorer


def write_metrics_csv(rows: Sequence[dict], path) -> None:
    """Append-style flat CSV for parameter sweeps (one dict per row)."""
    import csv
    from pathlib import Path

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        return
    keys = sorted({k for row in rows for k in row})
    exists = path.exists()
    with path.open("a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        if not exists:
            writer.writeheader()
        for row in rows:
            writer.writerow(row)
