"""Sliding-window grasp aggregation with per-axis outlier rejection.

Grasp poses from consecutive frames fill a fixed-capacity window. Once full,
entries deviating more than the limit from the component-wise mean on ANY
axis are discarded; if enough survive, their mean becomes the frozen handover
grasp and stays fixed until the handover completes or aborts. Too few
survivors restart the window from scratch.

All sums run over per-axis sorted values so that the survivor set and the
frozen point are exactly invariant under permutation of the window entries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from handover_sim.grasping import GraspPose


class NonMonotonicTimeError(Exception):
    """Pushed timestamps must be nondecreasing."""


@dataclass(frozen=True)
class Pending:
    """Window not yet full."""


@dataclass(frozen=True)
class Frozen:
    """Aggregated grasp pose, fixed for the rest of the handover."""

    pose: GraspPose
    initiation_span: float
    survivor_count: int


@dataclass(frozen=True)
class Restarted:
    """Too many outliers; the window was cleared."""


PushResult = Pending | Frozen | Restarted


def _sorted_mean(values) -> float:
    total = 0.0
    for v in sorted(values):
        total += v
    return total / len(values)


@dataclass
class GraspWindow:
    capacity: int = 5
    deviation_limit: float = 0.07
    min_inliers: int = 3
    entries: list[tuple[GraspPose, float]] = field(default_factory=list)

    def __post_init__(self):
        if not 0 < self.min_inliers <= self.capacity:
            raise ValueError("require 0 < min_inliers <= capacity")
        if self.deviation_limit <= 0:
            raise ValueError("deviation limit must be positive")

    def reset(self) -> None:
        self.entries.clear()

    def push(self, pose: GraspPose, t: float) -> PushResult:
        """Add one frame's grasp; evaluate when the window reaches capacity."""
        if self.entries and t < self.entries[-1][1]:
            raise NonMonotonicTimeError(f"timestamp {t} precedes {self.entries[-1][1]}")
        self.entries.append((pose, t))
        if len(self.entries) < self.capacity:
            return Pending()

        points = [p.point_base for p, _ in self.entries]
        mean = [_sorted_mean([pt[axis] for pt in points]) for axis in range(3)]
        survivors = [
            (p, t_i)
            for (p, t_i), pt in zip(self.entries, points)
            if all(abs(pt[axis] - mean[axis]) <= self.deviation_limit for axis in range(3))
        ]
        t_first = self.entries[0][1]
        t_last = self.entries[-1][1]
        self.entries.clear()
        if len(survivors) < self.min_inliers:
            return Restarted()

        frozen_point = np.array(
            [_sorted_mean([p.point_base[axis] for p, _ in survivors]) for axis in range(3)]
        )
        # Yaw/width/approach come from one representative frame: angles in
        # [0, pi) do not average safely across the wrap.
        best, _ = min(
            survivors,
            key=lambda item: (-item[0].quality, item[1], tuple(item[0].point_base)),
        )
        frozen = GraspPose(
            point_base=frozen_point,
            yaw=best.yaw,
            approach_axis=best.approach_axis,
            width=best.width,
            quality=best.quality,
            source_pixel=best.source_pixel,
        )
        return Frozen(pose=frozen, initiation_span=t_last - t_first, survivor_count=len(survivors))
