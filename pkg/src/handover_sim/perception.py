"""Ground-truth perception providers with configurable, seeded noise.

Detections and masks are derived from rendered class labels instead of neural
networks, behind small provider hooks so learned models could be slotted in.
Noise streams are keyed by (seed, frame index, provider id), which makes every
provider independently deterministic no matter which thread runs it.

Safety rule: human pixels inside the depth blind spot (labeled but depth 0)
are always present in the masks and never noise-flipped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from handover_sim.geometry import CameraIntrinsics, DepthImage, Pose, deproject
from handover_sim.scene import BODY, HAND, OBJECT, RenderOutput

PERSON_LABEL = "Person"

# Provider ids for noise-stream derivation.
_STAGE_DETECT = 1
_STAGE_HAND = 2
_STAGE_BODY = 3

_CONN8 = np.ones((3, 3), dtype=int)


@dataclass(frozen=True)
class PerceptionNoise:
    """Imperfect-network model: frame misses, box jitter, pixel flips."""

    miss_prob: float = 0.0
    bbox_jitter_px: int = 0
    mask_flip_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.miss_prob <= 1.0 and 0.0 <= self.mask_flip_prob <= 1.0):
            raise ValueError("probabilities must lie in [0, 1]")
        if self.bbox_jitter_px < 0:
            raise ValueError("bbox jitter must be nonnegative")


def stream(seed: int, frame_index: int, stage: int) -> np.random.Generator:
    """Deterministic generator for one (seed, frame, provider) triple."""
    key = np.array(
        [np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64((stage << 32) | (frame_index & 0xFFFFFFFF))],
        dtype=np.uint64,
    )
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class BoundingBox:
    """Pixel-inclusive detection rectangle."""

    u_min: int
    v_min: int
    u_max: int
    v_max: int
    label: str
    confidence: float

    def __post_init__(self):
        if self.u_min > self.u_max or self.v_min > self.v_max:
            raise ValueError("degenerate bounding box")

    @property
    def center(self) -> tuple[float, float]:
        return (self.u_min + self.u_max) / 2.0, (self.v_min + self.v_max) / 2.0


@dataclass
class SegMask:
    width: int
    height: int
    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool).reshape(self.height, self.width)

    @staticmethod
    def empty(width: int, height: int) -> "SegMask":
        return SegMask(width, height, np.zeros((height, width), dtype=bool))

    def count(self) -> int:
        return int(self.bits.sum())


def _jitter_box(u0, v0, u1, v1, rng, jitter, width, height):
    if jitter > 0:
        j = rng.integers(-jitter, jitter + 1, size=4)
        u0, v0, u1, v1 = u0 + int(j[0]), v0 + int(j[1]), u1 + int(j[2]), v1 + int(j[3])
    u0 = min(max(u0, 0), width - 1)
    u1 = min(max(u1, 0), width - 1)
    v0 = min(max(v0, 0), height - 1)
    v1 = min(max(v1, 0), height - 1)
    return min(u0, u1), min(v0, v1), max(u0, u1), max(v0, v1)


def detect_objects(
    render: RenderOutput, noise: PerceptionNoise, frame_index: int
) -> list[BoundingBox]:
    """Tight boxes around 8-connected components of each object id, plus one
    "Person" box over all human pixels. A whole frame can be missed."""
    rng = stream(noise.seed, frame_index, _STAGE_DETECT)
    if rng.random() < noise.miss_prob:
        return []

    h, w = render.class_image.shape
    boxes: list[BoundingBox] = []
    raw: list[tuple[int, int, int, int, str]] = []
    obj_mask = render.class_image == OBJECT
    if np.any(obj_mask):
        for oid in np.unique(render.object_ids[obj_mask]):
            labeled, count = ndimage.label(render.object_ids == oid, structure=_CONN8)
            order = []
            for comp in range(1, count + 1):
                vs, us = np.nonzero(labeled == comp)
                order.append((int(vs[0]) * w + int(us[0]), us, vs))
            # Components sorted by first raster pixel for a stable draw order.
            for _, us, vs in sorted(order, key=lambda t: t[0]):
                raw.append(
                    (int(us.min()), int(vs.min()), int(us.max()), int(vs.max()), f"object_{oid}")
                )
    human = (render.class_image == HAND) | (render.class_image == BODY)
    if np.any(human):
        vs, us = np.nonzero(human)
        raw.append((int(us.min()), int(vs.min()), int(us.max()), int(vs.max()), PERSON_LABEL))

    for u0, v0, u1, v1, label in raw:
        u0, v0, u1, v1 = _jitter_box(u0, v0, u1, v1, rng, noise.bbox_jitter_px, w, h)
        conf = 0.5 + 0.5 * float(rng.random())
        boxes.append(BoundingBox(u0, v0, u1, v1, label, conf))
    return boxes


def select_target(
    boxes: list[BoundingBox],
    depth: DepthImage,
    cam_to_base: Pose,
    reach: float = 0.855,
    intr: CameraIntrinsics | None = None,
) -> tuple[BoundingBox, float] | None:
    """Pick the foremost reachable non-person detection.

    Candidates are ranked by the mean of valid depths inside the box; the box
    center deprojected at that depth must fall inside the robot's reach sphere.
    Ties on mean depth break toward the smaller u_min, then v_min.
    """
    if reach <= 0:
        raise ValueError("reach must be positive")
    if intr is None:
        raise ValueError("camera intrinsics required to deproject box centers")
    best: tuple[float, int, int, BoundingBox] | None = None
    for box in boxes:
        if box.label == PERSON_LABEL:
            continue
        patch = depth.data[box.v_min : box.v_max + 1, box.u_min : box.u_max + 1]
        valid = patch > 0.0
        if not np.any(valid):
            continue
        mean_depth = float(patch[valid].mean())
        cu, cv = box.center
        if not (intr.min_depth <= mean_depth <= intr.max_depth):
            continue
        point_cam = deproject((cu, cv), mean_depth, intr)
        point_base = cam_to_base.transform(point_cam)
        if float(np.linalg.norm(point_base)) > reach:
            continue
        key = (mean_depth, box.u_min, box.v_min, box)
        if best is None or key[:3] < best[:3]:
            best = key
    if best is None:
        return None
    return best[3], best[0]


def _segment(render: RenderOutput, noise: PerceptionNoise, frame_index: int, stage: int, codes) -> SegMask:
    gt = np.isin(render.class_image, codes)
    bits = gt.copy()
    if noise.mask_flip_prob > 0.0:
        rng = stream(noise.seed, frame_index, stage)
        flips = rng.random(bits.shape) < noise.mask_flip_prob
        bits ^= flips
    # Blind-spot human pixels are safety-critical ground truth: always set.
    blind_human = gt & (render.depth.data == 0.0)
    bits |= blind_human
    return SegMask(render.width, render.height, bits)


def segment_hand(render: RenderOutput, noise: PerceptionNoise, frame_index: int) -> SegMask:
    """Binary hand/finger mask with per-pixel flip noise."""
    return _segment(render, noise, frame_index, _STAGE_HAND, (HAND,))


def segment_body(render: RenderOutput, noise: PerceptionNoise, frame_index: int) -> SegMask:
    """Body-part mask; the body net's classes include the forearm and hand."""
    return _segment(render, noise, frame_index, _STAGE_BODY, (HAND, BODY))
