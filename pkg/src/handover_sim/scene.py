"""Labeled-primitive world model, depth/class rendering and grasp scoring.

The world is a list of geometric primitives (spheres, capsules, boxes), each
carrying a semantic label (object with id, hand, body). Primitives move along
keyframed trajectories: positions are lerped, orientations slerped. Rendering
casts one pinhole ray per pixel and keeps the nearest analytic intersection,
so ground truth stays brute-force verifiable.

Blind-spot rule: a hit closer than the sensor's minimum depth produces an
invalid depth reading (0) but keeps the primitive's label in the class image.
Safety logic downstream must be able to see the human even when the depth
sensor cannot.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from handover_sim.geometry import CameraIntrinsics, DepthImage, Pose

# Class-image label codes (also the 8-bit PGM dump values).
BACKGROUND = 0
OBJECT = 1
HAND = 2
BODY = 3

HUMAN_CODES = (HAND, BODY)

# Finger pad thickness used when sweeping the closing segment for pinch checks.
JAW_SWEEP_RADIUS = 0.01
GRIPPER_MAX_WIDTH = 0.07

_EPS = 1e-12


class SceneError(Exception):
    pass


class InvalidWidthError(SceneError):
    """Jaw width outside the gripper's physical (0, 0.07] m range."""


@dataclass(frozen=True)
class SphereShape:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        if self.radius <= 0:
            raise ValueError("sphere radius must be positive")


@dataclass(frozen=True)
class CapsuleShape:
    point_a: np.ndarray
    point_b: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "point_a", np.asarray(self.point_a, dtype=float).reshape(3))
        object.__setattr__(self, "point_b", np.asarray(self.point_b, dtype=float).reshape(3))
        if self.radius <= 0:
            raise ValueError("capsule radius must be positive")


@dataclass(frozen=True)
class BoxShape:
    center: np.ndarray
    half_extents: np.ndarray
    orientation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        object.__setattr__(
            self, "half_extents", np.asarray(self.half_extents, dtype=float).reshape(3)
        )
        object.__setattr__(self, "orientation", np.asarray(self.orientation, dtype=float))
        if np.any(self.half_extents <= 0):
            raise ValueError("box half extents must be positive")


Shape = SphereShape | CapsuleShape | BoxShape


@dataclass(frozen=True)
class Primitive:
    """A labeled shape. Geometry is expressed in the primitive's local frame
    and carried to world coordinates by its (possibly keyframed) pose."""

    shape: Shape
    label: int
    object_id: int = -1
    name: str = ""

    def __post_init__(self):
        if self.label not in (OBJECT, HAND, BODY):
            raise ValueError("primitive label must be OBJECT, HAND or BODY")
        if self.label == OBJECT and self.object_id < 0:
            raise ValueError("object primitives need a nonnegative object_id")

    def posed(self, pose: Pose) -> "Primitive":
        """World-frame copy of this primitive under ``pose``."""
        s = self.shape
        if isinstance(s, SphereShape):
            shape = SphereShape(pose.transform(s.center), s.radius)
        elif isinstance(s, CapsuleShape):
            shape = CapsuleShape(pose.transform(s.point_a), pose.transform(s.point_b), s.radius)
        else:
            shape = BoxShape(
                pose.transform(s.center),
                s.half_extents,
                Pose(orientation=pose.orientation).compose(Pose(orientation=s.orientation)).orientation,
            )
        return Primitive(shape, self.label, self.object_id, self.name)


@dataclass
class SceneModel:
    """Primitives plus optional per-primitive keyframed trajectories."""

    primitives: list[Primitive]
    trajectories: dict[int, list[tuple[float, Pose]]] = field(default_factory=dict)
    robot_base: Pose = field(default_factory=Pose.identity)

    def __post_init__(self):
        for idx, keys in self.trajectories.items():
            if not 0 <= idx < len(self.primitives):
                raise ValueError(f"trajectory index {idx} out of range")
            times = [t for t, _ in keys]
            if any(b <= a for a, b in zip(times, times[1:])):
                raise ValueError("keyframe times must be strictly increasing")


@dataclass(frozen=True)
class SceneSnapshot:
    """World-frame primitives at one instant."""

    primitives: tuple[Primitive, ...]
    robot_base: Pose


def _interp_pose(keys: list[tuple[float, Pose]], t: float) -> Pose:
    if t <= keys[0][0]:
        return keys[0][1]
    if t >= keys[-1][0]:
        return keys[-1][1]
    for (t0, p0), (t1, p1) in zip(keys, keys[1:]):
        if t0 <= t <= t1:
            alpha = (t - t0) / (t1 - t0)
            from handover_sim.geometry import quat_slerp

            return Pose(
                position=(1 - alpha) * p0.position + alpha * p1.position,
                orientation=quat_slerp(p0.orientation, p1.orientation, alpha),
            )
    return keys[-1][1]


def scene_at(scene: SceneModel, t: float) -> SceneSnapshot:
    """Snapshot with every primitive pose interpolated at time ``t`` (clamped)."""
    if t < 0:
        raise ValueError("time must be nonnegative")
    posed = []
    for i, prim in enumerate(scene.primitives):
        keys = scene.trajectories.get(i)
        posed.append(prim.posed(_interp_pose(keys, t)) if keys else prim)
    return SceneSnapshot(tuple(posed), scene.robot_base)


# ---------------------------------------------------------------------------
# Ray intersections. Rays are o + s*d with unnormalized d whose camera-frame
# z component is 1, so the parameter s equals the camera z-depth directly.
# All functions return per-ray s arrays with +inf for misses; only the first
# positive surface crossing counts.
# ---------------------------------------------------------------------------


def _ray_sphere(o: np.ndarray, d: np.ndarray, c: np.ndarray, r: float) -> np.ndarray:
    oc = o - c
    a = np.einsum("ij,ij->i", d, d)
    b = 2.0 * (d @ oc)
    cq = float(oc @ oc) - r * r
    disc = b * b - 4.0 * a * cq
    s = np.full(d.shape[0], np.inf)
    hit = disc >= 0.0
    if not np.any(hit):
        return s
    sq = np.sqrt(np.where(hit, disc, 0.0))
    s0 = (-b - sq) / (2.0 * a)
    s1 = (-b + sq) / (2.0 * a)
    near = np.where(s0 > _EPS, s0, np.where(s1 > _EPS, s1, np.inf))
    s[hit] = near[hit]
    return s


def _ray_box(o: np.ndarray, d: np.ndarray, box: BoxShape) -> np.ndarray:
    rot = Pose(orientation=box.orientation).rotation_matrix()
    ol = (o - box.center) @ rot  # == rot.T @ (o - center)
    dl = d @ rot
    h = box.half_extents
    tmin = np.full(d.shape[0], -np.inf)
    tmax = np.full(d.shape[0], np.inf)
    ok = np.ones(d.shape[0], dtype=bool)
    for i in range(3):
        di = dl[:, i]
        oi = ol[i]
        par = np.abs(di) < _EPS
        ok &= ~par | (np.abs(oi) <= h[i])
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-h[i] - oi) / di
            t2 = (h[i] - oi) / di
        lo = np.minimum(t1, t2)
        hi = np.maximum(t1, t2)
        tmin = np.where(par, tmin, np.maximum(tmin, lo))
        tmax = np.where(par, tmax, np.minimum(tmax, hi))
    ok &= tmax >= tmin
    s = np.where(ok & (tmin > _EPS), tmin, np.where(ok & (tmax > _EPS), tmax, np.inf))
    return s


def _ray_capsule(o: np.ndarray, d: np.ndarray, cap: CapsuleShape) -> np.ndarray:
    # Convex body: the first positive crossing among the cylindrical side
    # (axis fraction in [0, 1]) and the two cap spheres is the entry/exit.
    a_pt, b_pt, r = cap.point_a, cap.point_b, cap.radius
    m = b_pt - a_pt
    mm = float(m @ m)
    n = d.shape[0]
    best = np.full(n, np.inf)

    if mm > _EPS:
        oa = o - a_pt
        d_perp = d - (d @ m)[:, None] * m / mm
        o_perp = oa - (float(oa @ m) / mm) * m
        aq = np.einsum("ij,ij->i", d_perp, d_perp)
        bq = 2.0 * (d_perp @ o_perp)
        cq = float(o_perp @ o_perp) - r * r
        disc = bq * bq - 4.0 * aq * cq
        valid = (disc >= 0.0) & (aq > _EPS)
        sq = np.sqrt(np.where(valid, disc, 0.0))
        for sign in (-1.0, 1.0):
            with np.errstate(divide="ignore", invalid="ignore"):
                s = (-bq + sign * sq) / (2.0 * aq)
                sigma = ((o - a_pt) @ m + s * (d @ m)) / mm
                good = valid & (s > _EPS) & (sigma >= 0.0) & (sigma <= 1.0)
            best = np.where(good & (s < best), s, best)

    for cpt, lo_side in ((a_pt, True), (b_pt, False)):
        s_sph = _ray_sphere_all_roots(o, d, cpt, r)
        for s in s_sph:
            with np.errstate(invalid="ignore"):
                if mm > _EPS:
                    sigma = ((o - a_pt) @ m + s * (d @ m)) / mm
                    good = (
                        np.isfinite(s)
                        & (s > _EPS)
                        & ((sigma <= 0.0) if lo_side else (sigma >= 1.0))
                    )
                else:
                    good = np.isfinite(s) & (s > _EPS)
            best = np.where(good & (s < best), s, best)
    return best


def _ray_sphere_all_roots(o, d, c, r):
    oc = o - c
    a = np.einsum("ij,ij->i", d, d)
    b = 2.0 * (d @ oc)
    cq = float(oc @ oc) - r * r
    disc = b * b - 4.0 * a * cq
    hit = disc >= 0.0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    s0 = np.where(hit, (-b - sq) / (2.0 * a), np.inf)
    s1 = np.where(hit, (-b + sq) / (2.0 * a), np.inf)
    return s0, s1


def _intersect(o: np.ndarray, d: np.ndarray, shape: Shape) -> np.ndarray:
    if isinstance(shape, SphereShape):
        return _ray_sphere(o, d, shape.center, shape.radius)
    if isinstance(shape, BoxShape):
        return _ray_box(o, d, shape)
    return _ray_capsule(o, d, shape)


@dataclass
class RenderOutput:
    """Depth plus per-pixel semantic labels from one camera render."""

    depth: DepthImage
    class_image: np.ndarray  # uint8 label codes, shape (height, width)
    object_ids: np.ndarray  # int32 object id where class==OBJECT, else -1

    @property
    def width(self) -> int:
        return self.depth.width

    @property
    def height(self) -> int:
        return self.depth.height


def render(
    snapshot: SceneSnapshot,
    camera_pose: Pose,
    intr: CameraIntrinsics,
    window: tuple[int, int, int, int] | None = None,
) -> RenderOutput:
    """Raycast every pixel; nearest hit wins, blind-spot hits keep their label.

    ``window`` = (u0, v0, width, height) restricts rendering to a sub-image;
    each pixel's result is identical to the corresponding full-frame pixel.
    """
    if window is None:
        u0, v0, w, h = 0, 0, intr.width, intr.height
    else:
        u0, v0, w, h = window
    us, vs = np.meshgrid(
        np.arange(u0, u0 + w, dtype=float), np.arange(v0, v0 + h, dtype=float)
    )
    dirs_cam = np.stack(
        [(us - intr.cx) / intr.fx, (vs - intr.cy) / intr.fy, np.ones_like(us)], axis=-1
    ).reshape(-1, 3)
    rot = camera_pose.rotation_matrix()
    dirs = dirs_cam @ rot.T
    origin = camera_pose.position

    best_s = np.full(h * w, np.inf)
    best_idx = np.full(h * w, -1, dtype=np.int32)
    for i, prim in enumerate(snapshot.primitives):
        s = _intersect(origin, dirs, prim.shape)
        closer = s < best_s
        best_s = np.where(closer, s, best_s)
        best_idx = np.where(closer, np.int32(i), best_idx)

    depth = np.zeros(h * w)
    classes = np.zeros(h * w, dtype=np.uint8)
    object_ids = np.full(h * w, -1, dtype=np.int32)

    hit = np.isfinite(best_s) & (best_s <= intr.max_depth)
    in_range = hit & (best_s >= intr.min_depth)
    depth[in_range] = best_s[in_range]
    if np.any(hit):
        prim_labels = np.array([p.label for p in snapshot.primitives], dtype=np.uint8)
        prim_ids = np.array([p.object_id for p in snapshot.primitives], dtype=np.int32)
        idx = best_idx[hit]
        classes[hit] = prim_labels[idx]
        obj = prim_labels[idx] == OBJECT
        tmp = np.full(idx.shape, -1, dtype=np.int32)
        tmp[obj] = prim_ids[idx][obj]
        object_ids[hit] = tmp

    return RenderOutput(
        depth=DepthImage(w, h, depth.reshape(h, w)),
        class_image=classes.reshape(h, w),
        object_ids=object_ids.reshape(h, w),
    )


# ---------------------------------------------------------------------------
# Distance and chord queries used for grasp scoring and the safety observer.
# ---------------------------------------------------------------------------


def _dist_point_segment(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    ab = b - a
    denom = float(ab @ ab)
    if denom < _EPS:
        return float(np.linalg.norm(p - a))
    t = float((p - a) @ ab) / denom
    t = min(1.0, max(0.0, t))
    return float(np.linalg.norm(p - (a + t * ab)))


def _dist_segment_segment(p1, q1, p2, q2) -> float:
    # Ericson, Real-Time Collision Detection, closest point of two segments.
    d1 = q1 - p1
    d2 = q2 - p2
    r = p1 - p2
    a = float(d1 @ d1)
    e = float(d2 @ d2)
    f = float(d2 @ r)
    if a < _EPS and e < _EPS:
        return float(np.linalg.norm(r))
    if a < _EPS:
        s = 0.0
        t = min(1.0, max(0.0, f / e))
    else:
        c = float(d1 @ r)
        if e < _EPS:
            t = 0.0
            s = min(1.0, max(0.0, -c / a))
        else:
            b = float(d1 @ d2)
            denom = a * e - b * b
            s = min(1.0, max(0.0, (b * f - c * e) / denom)) if denom > _EPS else 0.0
            t = (b * s + f) / e
            if t < 0.0:
                t = 0.0
                s = min(1.0, max(0.0, -c / a))
            elif t > 1.0:
                t = 1.0
                s = min(1.0, max(0.0, (b - c) / a))
    c1 = p1 + s * d1
    c2 = p2 + t * d2
    return float(np.linalg.norm(c1 - c2))


def _dist_point_box(p: np.ndarray, box: BoxShape) -> float:
    rot = Pose(orientation=box.orientation).rotation_matrix()
    pl = rot.T @ (p - box.center)
    clamped = np.clip(pl, -box.half_extents, box.half_extents)
    return float(np.linalg.norm(pl - clamped))


def _dist_segment_box(a: np.ndarray, b: np.ndarray, box: BoxShape) -> float:
    # Point-to-convex-set distance is convex along the segment: golden section
    # in the box's local frame (40 iterations shrink the bracket below 1e-8).
    rot = Pose(orientation=box.orientation).rotation_matrix()
    al = rot.T @ (a - box.center)
    bl = rot.T @ (b - box.center)
    h = box.half_extents
    seg = bl - al

    def f(t: float) -> float:
        p = al + t * seg
        d = p - np.clip(p, -h, h)
        return float(d @ d)

    lo, hi = 0.0, 1.0
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    x1 = hi - inv_phi * (hi - lo)
    x2 = lo + inv_phi * (hi - lo)
    f1, f2 = f(x1), f(x2)
    for _ in range(40):
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - inv_phi * (hi - lo)
            f1 = f(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + inv_phi * (hi - lo)
            f2 = f(x2)
    return math.sqrt(min(f1, f2))


def distance_segment_shape(a: np.ndarray, b: np.ndarray, shape: Shape) -> float:
    """Distance from segment [a, b] to the shape's surface (negative never)."""
    if isinstance(shape, SphereShape):
        return max(0.0, _dist_point_segment(shape.center, a, b) - shape.radius)
    if isinstance(shape, CapsuleShape):
        return max(0.0, _dist_segment_segment(a, b, shape.point_a, shape.point_b) - shape.radius)
    return _dist_segment_box(a, b, shape)


def _line_interval(o: np.ndarray, d: np.ndarray, shape: Shape):
    """Parameter interval [t0, t1] where o + t*d is inside the shape, or None.

    ``d`` must be a unit vector so the interval length is metric."""
    if isinstance(shape, SphereShape):
        oc = o - shape.center
        b = 2.0 * float(d @ oc)
        cq = float(oc @ oc) - shape.radius**2
        disc = b * b - 4.0 * cq
        if disc < 0:
            return None
        sq = math.sqrt(disc)
        return ((-b - sq) / 2.0, (-b + sq) / 2.0)
    if isinstance(shape, BoxShape):
        rot = Pose(orientation=shape.orientation).rotation_matrix()
        ol = rot.T @ (o - shape.center)
        dl = rot.T @ d
        tmin, tmax = -math.inf, math.inf
        for i in range(3):
            if abs(dl[i]) < _EPS:
                if abs(ol[i]) > shape.half_extents[i]:
                    return None
                continue
            t1 = (-shape.half_extents[i] - ol[i]) / dl[i]
            t2 = (shape.half_extents[i] - ol[i]) / dl[i]
            tmin = max(tmin, min(t1, t2))
            tmax = min(tmax, max(t1, t2))
        if tmax < tmin:
            return None
        return (tmin, tmax)
    # Capsule: convex, so the inside interval is the hull of the piecewise
    # crossings (cylindrical side clipped to the axis span, plus cap spheres).
    a_pt, b_pt, r = shape.point_a, shape.point_b, shape.radius
    m = b_pt - a_pt
    mm = float(m @ m)
    ts: list[float] = []
    if mm > _EPS:
        oa = o - a_pt
        dm = float(d @ m)
        om = float(oa @ m)
        d_perp = d - (dm / mm) * m
        o_perp = oa - (om / mm) * m
        aq = float(d_perp @ d_perp)
        bq = 2.0 * float(d_perp @ o_perp)
        cq = float(o_perp @ o_perp) - r * r
        if aq > _EPS:
            disc = bq * bq - 4.0 * aq * cq
            if disc >= 0:
                sq = math.sqrt(disc)
                for t in ((-bq - sq) / (2 * aq), (-bq + sq) / (2 * aq)):
                    sigma = (om + t * dm) / mm
                    if 0.0 <= sigma <= 1.0:
                        ts.append(t)
        elif cq <= 0 and abs(dm) > _EPS:
            # Line parallel to the axis and inside the cylinder radius: the
            # slab faces bound the cylindrical section.
            for sigma in (0.0, 1.0):
                ts.append((sigma * mm - om) / dm)
    for cpt, lo_side in ((a_pt, True), (b_pt, False)):
        oc = o - cpt
        b2 = 2.0 * float(d @ oc)
        c2 = float(oc @ oc) - r * r
        disc = b2 * b2 - 4.0 * c2
        if disc < 0:
            continue
        sq = math.sqrt(disc)
        for t in ((-b2 - sq) / 2.0, (-b2 + sq) / 2.0):
            if mm > _EPS:
                sigma = (float((o - a_pt) @ m) + t * float(d @ m)) / mm
                if (sigma <= 0.0) if lo_side else (sigma >= 1.0):
                    ts.append(t)
            else:
                ts.append(t)
    if not ts:
        return None
    return (min(ts), max(ts))


@dataclass(frozen=True)
class GraspOutcome:
    """Result of closing the jaws at a world-frame grasp point."""

    kind: str  # object_secured | empty_close | human_pinch | object_too_wide
    object_id: int = -1

    OBJECT_SECURED = "object_secured"
    EMPTY_CLOSE = "empty_close"
    HUMAN_PINCH = "human_pinch"
    OBJECT_TOO_WIDE = "object_too_wide"


def grasp_outcome(
    snapshot: SceneSnapshot,
    grasp_point: np.ndarray,
    closing_dir: np.ndarray,
    jaw_width: float,
) -> GraspOutcome:
    """Score a jaw close: human safety first, then object capture.

    The jaws are a segment of length ``jaw_width`` centered at the grasp point
    along ``closing_dir``, swept as a capsule of radius ``JAW_SWEEP_RADIUS``
    for the pinch test. An object is secured when it crosses the inner segment
    and its chord along the closing line fits the gripper stroke.
    """
    if not 0.0 < jaw_width <= GRIPPER_MAX_WIDTH:
        raise InvalidWidthError(f"jaw width {jaw_width} not in (0, {GRIPPER_MAX_WIDTH}]")
    p = np.asarray(grasp_point, dtype=float)
    d = np.asarray(closing_dir, dtype=float)
    d = d / np.linalg.norm(d)
    half = jaw_width / 2.0
    a = p - half * d
    b = p + half * d

    for prim in snapshot.primitives:
        if prim.label in HUMAN_CODES:
            if distance_segment_shape(a, b, prim.shape) <= JAW_SWEEP_RADIUS:
                return GraspOutcome(GraspOutcome.HUMAN_PINCH)

    best_chord = -1.0
    best_id = -1
    too_wide = False
    for prim in snapshot.primitives:
        if prim.label != OBJECT:
            continue
        # Contact = the closing pads touch the solid. The pads have the same
        # thickness as the pinch sweep, which also keeps exact-tangency
        # grasps (grasp point on a rendered surface) deterministic.
        if distance_segment_shape(a, b, prim.shape) > JAW_SWEEP_RADIUS:
            continue
        interval = _line_interval(p, d, prim.shape)
        chord = 0.0
        if interval is not None:
            t0, t1 = interval
            if t0 > half + JAW_SWEEP_RADIUS or t1 < -half - JAW_SWEEP_RADIUS:
                continue  # the line meets the solid beyond even the pad tips
            chord = t1 - t0
        if chord > GRIPPER_MAX_WIDTH:
            too_wide = True
        if chord > best_chord or (chord == best_chord and prim.object_id < best_id):
            best_chord = chord
            best_id = prim.object_id
    if best_id < 0:
        return GraspOutcome(GraspOutcome.EMPTY_CLOSE)
    if too_wide:
        return GraspOutcome(GraspOutcome.OBJECT_TOO_WIDE)
    return GraspOutcome(GraspOutcome.OBJECT_SECURED, object_id=best_id)


def min_human_distance(snapshot: SceneSnapshot, a: np.ndarray, b: np.ndarray) -> float:
    """Distance from segment [a, b] to the nearest hand/body surface."""
    dists = [
        distance_segment_shape(a, b, prim.shape)
        for prim in snapshot.primitives
        if prim.label in HUMAN_CODES
    ]
    return min(dists) if dists else math.inf
