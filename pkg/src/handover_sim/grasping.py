"""Grasp synthesis on depth images for a 7 cm parallel-jaw gripper.

Stages, in pipeline order:

1. ``insert_plane`` replaces everything behind the target object (and any
   invalid pixel) with a constant-depth plane, mimicking tabletop scenes.
2. ``grasp_map`` computes a per-pixel grasp quality / closing angle / jaw
   width field from run lengths of the object region along 16 directions.
   It is a deterministic geometric stand-in honoring the usual pixelwise
   grasp-net output contract, so a learned model can replace it.
3. ``filter_human`` zeroes quality within a Chebyshev pixel margin of any
   hand or body pixel (erosion of the allowed region by a square kernel).
4. ``select_best`` picks the argmax-quality pixel and lifts it to a 3D grasp
   pose in the robot base frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from handover_sim.geometry import (
    CameraIntrinsics,
    DepthImage,
    Pose,
    deproject,
    yaw_of_direction,
)
from handover_sim.perception import BoundingBox, SegMask

GRIPPER_MAX_WIDTH = 0.07
PLANE_OFFSET_DEFAULT = 0.15
OBJECT_DEPTH_MARGIN = 0.005  # below-plane slack separating object from plane
NUM_ANGLES = 16
WIDTH_PADDING = 0.01  # jaw opening margin added to the measured object width
MAX_PENETRATION = 0.01  # grasp-point sink past the surface, capped at pad depth
QUALITY_MIN_DEFAULT = 0.1

# One shared direction table: both the production map and any re-implementation
# must march with bit-identical steps.
ANGLES = [k * math.pi / NUM_ANGLES for k in range(NUM_ANGLES)]
ANGLE_STEPS = [(math.cos(t), math.sin(t)) for t in ANGLES]


class GraspError(Exception):
    pass


class EmptyTargetError(GraspError):
    """Target box holds no valid depth pixel."""


class DimensionMismatchError(GraspError):
    pass


class NoValidGraspError(GraspError):
    """No pixel reaches the minimum quality after filtering."""


@dataclass
class GraspMap:
    """Per-pixel grasp quality in [0,1], closing angle in [0,pi), jaw width."""

    width: int
    height: int
    quality: np.ndarray
    angle: np.ndarray
    grip_width: np.ndarray

    def __post_init__(self):
        shape = (self.height, self.width)
        for arr in (self.quality, self.angle, self.grip_width):
            if arr.shape != shape:
                raise DimensionMismatchError("grasp map arrays must share dimensions")


@dataclass(frozen=True)
class GraspPose:
    """A 3D pinch grasp in the robot base frame."""

    point_base: np.ndarray
    yaw: float
    approach_axis: np.ndarray
    width: float
    quality: float
    source_pixel: tuple[int, int]

    def __post_init__(self):
        object.__setattr__(self, "point_base", np.asarray(self.point_base, dtype=float).reshape(3))
        object.__setattr__(
            self, "approach_axis", np.asarray(self.approach_axis, dtype=float).reshape(3)
        )
        if not 0.0 < self.width <= GRIPPER_MAX_WIDTH:
            raise ValueError("grasp width outside (0, 0.07]")
        if not 0.0 < self.quality <= 1.0:
            raise ValueError("grasp quality outside (0, 1]")


def insert_plane(
    depth: DepthImage, target: BoundingBox, offset: float = PLANE_OFFSET_DEFAULT
) -> tuple[DepthImage, float]:
    """Fill everything behind the target object with a constant-depth plane.

    The plane sits ``offset`` behind the 5th percentile of valid depths inside
    the target box (the box contains background pixels, so its maximum would
    push the plane behind the human). Invalid pixels are filled too; the
    output image has no invalid pixels left.
    """
    patch = depth.data[target.v_min : target.v_max + 1, target.u_min : target.u_max + 1]
    vals = np.sort(patch[patch > 0.0].ravel())
    if vals.size == 0:
        raise EmptyTargetError("no valid depth inside target box")
    d_near = float(vals[(5 * (vals.size - 1)) // 100])
    plane_depth = d_near + offset
    out = depth.data.copy()
    out[(out > plane_depth) | (out == 0.0)] = plane_depth
    return DepthImage(depth.width, depth.height, out), plane_depth


def step_offsets(du: float, dv: float, sign: float, max_steps: int):
    """Integer pixel displacements for marching steps 1..max_steps.

    Step m lands on pixel + (floor(sign*m*du + 0.5), floor(sign*m*dv + 0.5)),
    the same displacement for every pixel, so the marching pattern is
    translation invariant."""
    m = np.arange(1, max_steps + 1, dtype=float)
    off_u = np.floor((sign * m) * du + 0.5).astype(np.int32)
    off_v = np.floor((sign * m) * dv + 0.5).astype(np.int32)
    return off_u, off_v


def _march_runs(
    obj: np.ndarray, us: np.ndarray, vs: np.ndarray, du: float, dv: float, max_steps: int
):
    """Per-pixel in-region step counts along +/-(du, dv) plus border flags.

    Returns (steps_pos, steps_neg, open_pos, open_neg); an "open" side ran off
    the image while still inside the region, so no jaw can be placed there.

    ``max_steps`` must be large enough that any truncated run already exceeds
    the gripper stroke; truncated sides report open=True, which is equivalent
    since an over-wide width disqualifies the direction anyway.
    """
    h, w = obj.shape
    n = us.size
    idx = np.arange(n)
    obj_flat = obj.ravel()
    us32 = us.astype(np.int32)
    vs32 = vs.astype(np.int32)
    out = []
    for sign in (1.0, -1.0):
        off_u, off_v = step_offsets(du, dv, sign, max_steps)
        uu = us32[:, None] + off_u
        vv = vs32[:, None] + off_v
        inside = (uu >= 0) & (uu < w) & (vv >= 0) & (vv < h)
        flat = vv * w + uu
        np.clip(flat, 0, h * w - 1, out=flat)
        in_obj = obj_flat[flat] & inside
        run = np.logical_and.accumulate(in_obj, axis=1)
        s = run.sum(axis=1)
        truncated = s >= max_steps
        exit_idx = np.minimum(s, max_steps - 1)
        open_side = np.where(truncated, True, ~inside[idx, exit_idx])
        out.append((s, open_side))
    return out[0][0], out[1][0], out[0][1], out[1][1]


def grasp_map(
    depth: DepthImage, plane_depth: float, intr: CameraIntrinsics
) -> GraspMap:
    """Quality/angle/width for every pixel of a preprocessed depth image.

    A pixel belongs to the object region when it sits clearly in front of the
    inserted plane. For each of 16 closing directions the object's run length
    through the pixel converts to a metric width at that depth; the direction
    with the narrowest admissible width wins. Directions whose run leaves the
    image are unusable, as are widths beyond the gripper stroke.
    """
    h, w = depth.height, depth.width
    quality = np.zeros((h, w))
    angle = np.zeros((h, w))
    grip = np.zeros((h, w))
    obj = depth.data < (plane_depth - OBJECT_DEPTH_MARGIN)
    if not np.any(obj):
        return GraspMap(w, h, quality, angle, grip)

    vs0, us0 = np.nonzero(obj)
    d_px = depth.data[vs0, us0]
    # Runs longer than this exceed the gripper stroke at every pixel, so the
    # march can truncate there; a second bound covers leaving the image.
    d_min = float(d_px.min())
    max_steps = int(1.5 * max(w, h)) + 3
    if d_min > 0:
        max_steps = min(max_steps, int(GRIPPER_MAX_WIDTH * intr.fx / d_min) + 2)
    best_q = np.full(us0.size, -1.0)
    best_k = np.zeros(us0.size, dtype=np.int64)
    best_w = np.zeros(us0.size)
    for k, (du, dv) in enumerate(ANGLE_STEPS):
        sp, sn, op, on = _march_runs(obj, us0, vs0, du, dv, max_steps)
        run = sp + sn + 1  # object extent in pixels through each pixel
        width_m = run * d_px / intr.fx
        valid = ~op & ~on & (width_m <= GRIPPER_MAX_WIDTH)
        q = np.where(valid, 1.0 - width_m / GRIPPER_MAX_WIDTH, -1.0)
        better = q > best_q
        best_q = np.where(better, q, best_q)
        best_k = np.where(better, k, best_k)
        best_w = np.where(better, width_m, best_w)

    found = best_q >= 0.0
    quality[vs0[found], us0[found]] = best_q[found]
    angle[vs0[found], us0[found]] = np.array(ANGLES)[best_k[found]]
    grip[vs0[found], us0[found]] = np.minimum(best_w[found] + WIDTH_PADDING, GRIPPER_MAX_WIDTH)
    return GraspMap(w, h, quality, angle, grip)


def dilate_chebyshev(mask: np.ndarray, margin_px: int) -> np.ndarray:
    """Grow a boolean mask to Chebyshev distance ``margin_px`` (square kernel,
    separable into row and column sweeps)."""
    out = mask.copy()
    for axis in (0, 1):
        grown = out.copy()
        for shift in range(1, margin_px + 1):
            grown |= _pad_shift(out, shift, axis)
            grown |= _pad_shift(out, -shift, axis)
        out = grown
    return out


def _pad_shift(mask: np.ndarray, shift: int, axis: int) -> np.ndarray:
    res = np.zeros_like(mask)
    if shift > 0:
        if axis == 0:
            res[shift:, :] = mask[:-shift, :]
        else:
            res[:, shift:] = mask[:, :-shift]
    else:
        if axis == 0:
            res[:shift, :] = mask[-shift:, :]
        else:
            res[:, :shift] = mask[:, -shift:]
    return res


def filter_human(
    gmap: GraspMap, hand: SegMask, body: SegMask, margin_px: int = 5
) -> GraspMap:
    """Zero grasp quality at and around every human pixel.

    Equivalent to eroding the allowed region with a (2*margin+1)^2 structuring
    element: any pixel within Chebyshev distance ``margin_px`` of a hand or
    body bit is disqualified. Angle and width stay untouched.
    """
    if margin_px < 0:
        raise ValueError("margin must be nonnegative")
    if (hand.height, hand.width) != (gmap.height, gmap.width) or (
        body.height,
        body.width,
    ) != (gmap.height, gmap.width):
        raise DimensionMismatchError("mask dimensions must match the grasp map")
    blocked = dilate_chebyshev(hand.bits | body.bits, margin_px)
    quality = gmap.quality.copy()
    quality[blocked] = 0.0
    return GraspMap(gmap.width, gmap.height, quality, gmap.angle, gmap.grip_width)


def select_best(
    gmap: GraspMap,
    depth: DepthImage,
    intr: CameraIntrinsics,
    cam_to_base: Pose,
    q_min: float = QUALITY_MIN_DEFAULT,
) -> GraspPose:
    """Lift the argmax-quality pixel to a base-frame grasp pose.

    Ties resolve to the smallest row-major index. The approach axis is the
    camera's optical axis at selection time; the in-image closing angle maps
    to a yaw about that axis via the shared perpendicular-frame convention.

    The depth image gives the object's front surface; the jaws must wrap
    around it, so the grasp point sinks past the surface toward the closing
    midline, at most one pad depth (thin parts would be overshot otherwise).
    """
    flat = int(np.argmax(gmap.quality))
    v, u = divmod(flat, gmap.width)
    q = float(gmap.quality[v, u])
    if q < q_min:
        raise NoValidGraspError(f"best quality {q:.3f} below minimum {q_min}")
    measured_w = (1.0 - q) * GRIPPER_MAX_WIDTH
    d = float(depth.data[v, u]) + min(measured_w / 2.0, MAX_PENETRATION)
    point_cam = deproject((u, v), d, intr)
    point_base = cam_to_base.transform(point_cam)
    theta = float(gmap.angle[v, u])
    closing_cam = np.array([math.cos(theta), math.sin(theta), 0.0])
    closing_base = cam_to_base.rotate(closing_cam)
    approach = cam_to_base.rotate(np.array([0.0, 0.0, 1.0]))
    return GraspPose(
        point_base=point_base,
        yaw=yaw_of_direction(closing_base, approach),
        approach_axis=approach,
        width=float(gmap.grip_width[v, u]),
        quality=q,
        source_pixel=(u, v),
    )
