"""Semantic trajectory segmentation by dynamic programming.

A trajectory of L points is partitioned into contiguous segments that
minimize a summed per-segment cost. Each candidate segment [a, b]
(1-based, inclusive) is scored by three factors:

  * speed dispersion: population variance of the per-step speeds inside
    the segment (0 when the segment has fewer than two points),
  * road churn: count of nearest-road transitions between consecutive
    points (None stands for "off the known network" and acts as one
    shared pseudo-road, so None -> None is not a transition),
  * brevity penalty: 1 / (b - a + 1), discouraging micro-segments.

Each factor is divided by its maximum over all allowed segments of this
trajectory (zero maxima guarded to 1), weighted, and summed. The optimal
split is found with an exact O(L * cap) dynamic program; cost-equal
alternatives resolve toward the smallest split index, so results are
fully deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .context import ContextDb, nearest_road
from .core import Trajectory, kinematics


@dataclass(frozen=True, slots=True)
class CostWeights:
    """Weights for the three segment-cost factors plus the length cap.

    max_seg_points bounds how many points one segment may contain;
    None removes the bound. Factor maxima for normalization are taken
    over the same capped candidate set the optimizer may use.
    """

    w_speed: float = 1.0
    w_road: float = 1.0
    w_len: float = 1.0
    max_seg_points: Optional[int] = 256

    def __post_init__(self) -> None:
        if self.max_seg_points is not None and self.max_seg_points < 1:
            raise ValueError("max_seg_points must be >= 1 or None")


def road_id_sequence(
    traj: Trajectory, db: Optional[ContextDb], radius_m: float
) -> tuple[Optional[str], ...]:
    """Nearest-road id per point (None when no road lies within radius_m)."""
    if db is None:
        return tuple(None for _ in traj.points)
    out = []
    for p in traj.points:
        road = nearest_road(db, p.lon, p.lat, radius_m)
        out.append(road.road_id if road else None)
    return tuple(out)


class CostTable:
    """Precomputed per-trajectory factor state with O(1) segment costs.

    Raw factors are exposed for auditing (f_speed / f_road / f_len);
    cost() applies per-trajectory max normalization and the weights.
    Prefix sums are mean-shifted so the variance stays well conditioned.
    """

    def __init__(
        self,
        traj: Trajectory,
        weights: CostWeights,
        road_ids: Sequence[Optional[str]],
    ) -> None:
        L = len(traj)
        if len(road_ids) != L:
            raise ValueError("road id sequence length mismatch")
        self.trajectory = traj
        self.weights = weights
        self.length = L
        self.cap = min(weights.max_seg_points or L, L)

        speeds = np.asarray(kinematics(traj.points).step_speeds_ms, dtype=np.float64)
        shift = float(speeds.mean()) if speeds.size else 0.0
        shifted = speeds - shift
        self._s1 = np.concatenate(([0.0], np.cumsum(shifted)))
        self._s2 = np.concatenate(([0.0], np.cumsum(shifted * shifted)))

        transitions = np.fromiter(
            (1 if road_ids[i] != road_ids[i + 1] else 0 for i in range(L - 1)),
            dtype=np.int64,
            count=max(L - 1, 0),
        )
        self._tp = np.concatenate(([0], np.cumsum(transitions)))

        self.max_speed = self._max_speed_factor()
        # Road churn is monotone under window growth, so its maximum sits on
        # windows of the largest allowed length.
        n = self.cap - 1
        if L > 1 and n > 0:
            windows = self._tp[n:] - self._tp[: L - n]
            self.max_road = float(windows.max())
        else:
            self.max_road = 0.0
        self.max_len = 1.0  # single-point windows are always allowed

        self._norm_speed = self.max_speed if self.max_speed > 0.0 else 1.0
        self._norm_road = self.max_road if self.max_road > 0.0 else 1.0
        self._norm_len = self.max_len

    def _max_speed_factor(self) -> float:
        best = 0.0
        n_steps_max = min(self.cap - 1, self.length - 1)
        for n in range(1, n_steps_max + 1):
            sums = self._s1[n:] - self._s1[: self._s1.size - n]
            sqs = self._s2[n:] - self._s2[: self._s2.size - n]
            var = sqs / n - (sums / n) ** 2
            m = float(var.max()) if var.size else 0.0
            if m > best:
                best = m
        return best

    def _check(self, a: int, b: int) -> None:
        if not (1 <= a <= b <= self.length):
            raise IndexError(f"bad segment ({a}, {b}) for length {self.length}")

    def f_speed(self, a: int, b: int) -> float:
        """Population variance of step speeds inside [a, b]."""
        self._check(a, b)
        n = b - a
        if n <= 0:
            return 0.0
        s = float(self._s1[b - 1] - self._s1[a - 1])
        q = float(self._s2[b - 1] - self._s2[a - 1])
        var = q / n - (s / n) ** 2
        return var if var > 0.0 else 0.0

    def f_road(self, a: int, b: int) -> float:
        """Nearest-road transition count inside [a, b]."""
        self._check(a, b)
        return float(self._tp[b - 1] - self._tp[a - 1])

    def f_len(self, a: int, b: int) -> float:
        """Brevity penalty 1 / segment point count."""
        self._check(a, b)
        return 1.0 / (b - a + 1)

    def cost(self, a: int, b: int) -> float:
        """Weighted sum of max-normalized factors for segment [a, b]."""
        w = self.weights
        return (
            w.w_speed * (self.f_speed(a, b) / self._norm_speed)
            + w.w_road * (self.f_road(a, b) / self._norm_road)
            + w.w_len * (self.f_len(a, b) / self._norm_len)
        )


def build_cost_table(
    traj: Trajectory,
    db: Optional[ContextDb] = None,
    weights: CostWeights = CostWeights(),
    road_radius_m: float = 200.0,
) -> CostTable:
    """Assemble the cost table, resolving nearest roads once per point."""
    return CostTable(traj, weights, road_id_sequence(traj, db, road_radius_m))


@dataclass(frozen=True, slots=True)
class Segmentation:
    """An optimal split: 1-based inclusive boundary pairs covering 1..L."""

    trajectory_id: str
    boundaries: tuple[tuple[int, int], ...]
    segment_costs: tuple[float, ...]
    total_cost: float

    @property
    def n_segments(self) -> int:
        return len(self.boundaries)

    def to_json_dict(self) -> dict:
        return {
            "trajectory_id": self.trajectory_id,
            "boundaries": [list(b) for b in self.boundaries],
            "segment_costs": list(self.segment_costs),
            "total_cost": self.total_cost,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "Segmentation":
        return cls(
            trajectory_id=doc["trajectory_id"],
            boundaries=tuple((int(s), int(e)) for s, e in doc["boundaries"]),
            segment_costs=tuple(float(c) for c in doc["segment_costs"]),
            total_cost=float(doc["total_cost"]),
        )


def dp_segment(table) -> Segmentation:
    """Exact DP over split positions; ties keep the smallest split index.

    Accepts any object exposing length, cap, cost(a, b), and trajectory.
    The minimum accumulates costs left to right, so the reported total is
    bit-identical to summing the segment costs in order.
    """
    L = table.length
    cap = table.cap
    best = [math.inf] * (L + 1)
    back = [0] * (L + 1)
    best[0] = 0.0
    for h in range(1, L + 1):
        lo = max(0, h - cap)
        for d in range(lo, h):
            cand = best[d] + table.cost(d + 1, h)
            if cand < best[h]:
                best[h] = cand
                back[h] = d
    bounds: list[tuple[int, int]] = []
    h = L
    while h > 0:
        d = back[h]
        bounds.append((d + 1, h))
        h = d
    bounds.reverse()
    costs = tuple(table.cost(a, b) for a, b in bounds)
    total = 0.0
    for c in costs:
        total = total + c
    return Segmentation(
        trajectory_id=table.trajectory.traj_id,
        boundaries=tuple(bounds),
        segment_costs=costs,
        total_cost=total,
    )


def segment_trajectory(
    traj: Trajectory,
    db: Optional[ContextDb] = None,
    weights: CostWeights = CostWeights(),
    road_radius_m: float = 200.0,
) -> Segmentation:
    """Segment one trajectory: build the cost table, run the DP."""
    return dp_segment(build_cost_table(traj, db, weights, road_radius_m))
