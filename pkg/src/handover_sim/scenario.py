"""Scenario files: strict JSON with units in every field name.

Unknown fields are errors, not warnings; a typo like ``radius_mm`` must not
silently fall back to a default. Parse errors carry the JSON path of the
offending field. Latencies and rates are kept as exact rationals so the
virtual clock never accumulates binary rounding.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from handover_sim.control import ControllerConfig, TargetPose
from handover_sim.geometry import CameraIntrinsics, Pose
from handover_sim.perception import PerceptionNoise
from handover_sim.scene import (
    BODY,
    BoxShape,
    CapsuleShape,
    HAND,
    OBJECT,
    Primitive,
    SceneModel,
    SphereShape,
)


class ParseError(Exception):
    """Scenario file rejected; message carries the offending path."""


class IoError(Exception):
    """Scenario or output file could not be read/written."""


STAGE_NAMES = ("camera", "detector", "hand_seg", "body_seg", "grasp_select", "aggregate", "control")

_DEFAULT_LATENCIES = {
    "camera": Fraction(0),
    "detector": Fraction(33, 1000),
    "hand_seg": Fraction(33, 1000),
    "body_seg": Fraction(33, 1000),
    "grasp_select": Fraction(125, 10000),
    "aggregate": Fraction(17, 1000),
    "control": Fraction(0),
}


@dataclass(frozen=True)
class StageSpec:
    """One pipeline stage: processing latency, rate cap, keep-newest buffer."""

    name: str
    latency: Fraction
    max_rate: Fraction = Fraction(30)
    buffer_capacity: int = 1

    def __post_init__(self):
        if self.latency < 0:
            raise ValueError("stage latency must be nonnegative")
        if not (24 <= self.max_rate <= 30):
            from handover_sim.pipeline import InvalidRateError

            raise InvalidRateError(f"stage {self.name}: rate {self.max_rate} outside [24, 30]")
        if self.buffer_capacity < 1:
            raise ValueError("buffer capacity must be at least 1")


def default_stages() -> list[StageSpec]:
    return [StageSpec(name, _DEFAULT_LATENCIES[name]) for name in STAGE_NAMES]


@dataclass(frozen=True)
class CameraConfig:
    intrinsics: CameraIntrinsics
    fps: Fraction = Fraction(30)
    mount_offset: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -0.08]))

    def mount_pose(self) -> Pose:
        return Pose(position=self.mount_offset)


@dataclass(frozen=True)
class RobotConfig:
    reach: float = 0.855
    home: TargetPose = field(default_factory=lambda: TargetPose(np.array([0.25, 0.0, 0.45])))
    drop: TargetPose = field(default_factory=lambda: TargetPose(np.array([0.25, -0.35, 0.30])))
    camera_axis: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))


@dataclass(frozen=True)
class GraspConfig:
    plane_offset: float = 0.15
    q_min: float = 0.1
    filter_margin_px: int = 5


@dataclass(frozen=True)
class WindowConfig:
    capacity: int = 5
    deviation_limit: float = 0.07
    min_inliers: int = 3


@dataclass(frozen=True)
class Scenario:
    name: str
    scene: SceneModel
    camera: CameraConfig
    robot: RobotConfig = field(default_factory=RobotConfig)
    noise: PerceptionNoise = field(default_factory=PerceptionNoise)
    stages: tuple[StageSpec, ...] = field(default_factory=lambda: tuple(default_stages()))
    grasp: GraspConfig = field(default_factory=GraspConfig)
    window: WindowConfig = field(default_factory=WindowConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    collision_events: tuple[Fraction, ...] = ()
    trials: int = 10
    observer_margin: float = 0.02
    max_trial_time: Fraction = Fraction(120)

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if self.observer_margin <= 0:
            raise ValueError("observer margin must be positive")


# ---------------------------------------------------------------------------
# JSON loading
# ---------------------------------------------------------------------------


class _Node:
    """A JSON object wrapper that tracks which keys were consumed."""

    def __init__(self, data, path: str):
        if not isinstance(data, dict):
            raise ParseError(f"{path}: expected an object")
        self.data = data
        self.path = path
        self.seen: set[str] = set()

    def take(self, key: str, required: bool = False, default=None):
        self.seen.add(key)
        if key not in self.data:
            if required:
                raise ParseError(f"{self.path}.{key}: required field missing")
            return default
        return self.data[key]

    def child(self, key: str, required: bool = False) -> "_Node | None":
        raw = self.take(key, required=required)
        if raw is None:
            return None
        return _Node(raw, f"{self.path}.{key}")

    def finish(self) -> None:
        unknown = set(self.data) - self.seen
        if unknown:
            raise ParseError(f"{self.path}: unknown field(s) {sorted(unknown)}")


def _number(node: _Node, key: str, default=None, required: bool = False) -> float | None:
    raw = node.take(key, required=required)
    if raw is None:
        return default
    if isinstance(raw, bool) or not isinstance(raw, (int, float)):
        raise ParseError(f"{node.path}.{key}: expected a number")
    return float(raw)


def _fraction(node: _Node, key: str, default: Fraction | None = None, required=False) -> Fraction | None:
    raw = node.take(key, required=required)
    if raw is None:
        return default
    if isinstance(raw, bool) or not isinstance(raw, (int, float)):
        raise ParseError(f"{node.path}.{key}: expected a number")
    return Fraction(str(raw))


def _integer(node: _Node, key: str, default=None, required: bool = False) -> int | None:
    raw = node.take(key, required=required)
    if raw is None:
        return default
    if isinstance(raw, bool) or not isinstance(raw, int):
        raise ParseError(f"{node.path}.{key}: expected an integer")
    return raw


def _vector(node: _Node, key: str, default=None, required: bool = False) -> np.ndarray | None:
    raw = node.take(key, required=required)
    if raw is None:
        return None if default is None else np.asarray(default, dtype=float)
    if not isinstance(raw, list) or len(raw) != 3 or any(isinstance(x, bool) or not isinstance(x, (int, float)) for x in raw):
        raise ParseError(f"{node.path}.{key}: expected a 3-number array")
    return np.array(raw, dtype=float)


def _quaternion(node: _Node, key: str) -> np.ndarray | None:
    raw = node.take(key)
    if raw is None:
        return None
    if not isinstance(raw, list) or len(raw) != 4:
        raise ParseError(f"{node.path}.{key}: expected a 4-number array (w, x, y, z)")
    return np.array(raw, dtype=float)


_LABELS = {"object": OBJECT, "hand": HAND, "body": BODY}


def _parse_primitive(node: _Node) -> tuple[Primitive, list[tuple[float, Pose]] | None]:
    shape_kind = node.take("shape", required=True)
    label_name = node.take("label", required=True)
    if label_name not in _LABELS:
        raise ParseError(f"{node.path}.label: expected one of {sorted(_LABELS)}")
    label = _LABELS[label_name]
    object_id = _integer(node, "object_id", default=-1)
    name = node.take("name", default="")

    if shape_kind == "sphere":
        shape = SphereShape(_vector(node, "center_m", required=True), _number(node, "radius_m", required=True))
    elif shape_kind == "capsule":
        shape = CapsuleShape(
            _vector(node, "point_a_m", required=True),
            _vector(node, "point_b_m", required=True),
            _number(node, "radius_m", required=True),
        )
    elif shape_kind == "box":
        quat = _quaternion(node, "quaternion_wxyz")
        shape = BoxShape(
            _vector(node, "center_m", required=True),
            _vector(node, "half_extents_m", required=True),
            quat if quat is not None else np.array([1.0, 0.0, 0.0, 0.0]),
        )
    else:
        raise ParseError(f"{node.path}.shape: unknown shape '{shape_kind}'")

    keyframes = None
    raw_keys = node.take("keyframes")
    if raw_keys is not None:
        if not isinstance(raw_keys, list) or not raw_keys:
            raise ParseError(f"{node.path}.keyframes: expected a nonempty array")
        keyframes = []
        for i, rk in enumerate(raw_keys):
            kn = _Node(rk, f"{node.path}.keyframes[{i}]")
            t = _number(kn, "t_s", required=True)
            pos = _vector(kn, "position_m", required=True)
            quat = _quaternion(kn, "quaternion_wxyz")
            kn.finish()
            keyframes.append(
                (t, Pose(position=pos, orientation=quat if quat is not None else [1, 0, 0, 0]))
            )
    node.finish()
    try:
        prim = Primitive(shape, label, object_id if object_id is not None else -1, name)
    except ValueError as exc:
        raise ParseError(f"{node.path}: {exc}") from exc
    return prim, keyframes


def _parse_scene(node: _Node) -> SceneModel:
    raw_prims = node.take("primitives", required=True)
    if not isinstance(raw_prims, list):
        raise ParseError(f"{node.path}.primitives: expected an array")
    prims: list[Primitive] = []
    trajectories: dict[int, list[tuple[float, Pose]]] = {}
    for i, rp in enumerate(raw_prims):
        prim, keys = _parse_primitive(_Node(rp, f"{node.path}.primitives[{i}]"))
        if keys is not None:
            trajectories[len(prims)] = keys
        prims.append(prim)
    node.finish()
    try:
        return SceneModel(prims, trajectories)
    except ValueError as exc:
        raise ParseError(f"{node.path}: {exc}") from exc


def _parse_camera(node: _Node) -> CameraConfig:
    try:
        intr = CameraIntrinsics(
            fx=_number(node, "fx", required=True),
            fy=_number(node, "fy", required=True),
            cx=_number(node, "cx", required=True),
            cy=_number(node, "cy", required=True),
            width=_integer(node, "width_px", required=True),
            height=_integer(node, "height_px", required=True),
            min_depth=_number(node, "min_depth_m", default=0.105),
            max_depth=_number(node, "max_depth_m", default=4.0),
        )
    except ValueError as exc:
        raise ParseError(f"{node.path}: {exc}") from exc
    fps = _fraction(node, "fps", default=Fraction(30))
    mount = _vector(node, "mount_offset_m", default=[0.0, 0.0, -0.08])
    node.finish()
    return CameraConfig(intrinsics=intr, fps=fps, mount_offset=mount)


def _parse_robot(node: _Node | None) -> RobotConfig:
    if node is None:
        return RobotConfig()
    base = RobotConfig()
    home = TargetPose(
        _vector(node, "home_position_m", default=base.home.position),
        _number(node, "home_yaw_rad", default=base.home.yaw),
    )
    drop = TargetPose(
        _vector(node, "drop_position_m", default=base.drop.position),
        _number(node, "drop_yaw_rad", default=base.drop.yaw),
    )
    axis = _vector(node, "camera_axis", default=base.camera_axis)
    reach = _number(node, "reach_m", default=base.reach)
    node.finish()
    if reach <= 0:
        raise ParseError(f"{node.path}.reach_m: must be positive")
    return RobotConfig(reach=reach, home=home, drop=drop, camera_axis=axis)


def _parse_noise(node: _Node | None) -> PerceptionNoise:
    if node is None:
        return PerceptionNoise()
    try:
        noise = PerceptionNoise(
            miss_prob=_number(node, "miss_prob", default=0.0),
            bbox_jitter_px=_integer(node, "bbox_jitter_px", default=0),
            mask_flip_prob=_number(node, "mask_flip_prob", default=0.0),
        )
    except ValueError as exc:
        raise ParseError(f"{node.path}: {exc}") from exc
    node.finish()
    return noise


def _parse_stages(node: _Node | None) -> tuple[StageSpec, ...]:
    if node is None:
        return tuple(default_stages())
    raw = node.take("stages", required=True)
    if not isinstance(raw, list):
        raise ParseError(f"{node.path}.stages: expected an array")
    by_name = {s.name: s for s in default_stages()}
    for i, rs in enumerate(raw):
        sn = _Node(rs, f"{node.path}.stages[{i}]")
        name = sn.take("name", required=True)
        if name not in by_name:
            raise ParseError(f"{sn.path}.name: unknown stage '{name}'")
        latency = _fraction(sn, "latency_s", default=by_name[name].latency)
        rate = _fraction(sn, "max_rate_fps", default=by_name[name].max_rate)
        buf = _integer(sn, "buffer", default=by_name[name].buffer_capacity)
        sn.finish()
        try:
            by_name[name] = StageSpec(name, latency, rate, buf)
        except ValueError as exc:
            raise ParseError(f"{sn.path}: {exc}") from exc
    node.finish()
    return tuple(by_name[name] for name in STAGE_NAMES)


def _parse_grasp(node: _Node | None) -> GraspConfig:
    if node is None:
        return GraspConfig()
    cfg = GraspConfig(
        plane_offset=_number(node, "plane_offset_m", default=0.15),
        q_min=_number(node, "q_min", default=0.1),
        filter_margin_px=_integer(node, "filter_margin_px", default=5),
    )
    node.finish()
    if cfg.plane_offset <= 0 or not (0 < cfg.q_min < 1) or cfg.filter_margin_px < 0:
        raise ParseError(f"{node.path}: invalid grasp parameters")
    return cfg


def _parse_window(node: _Node | None) -> WindowConfig:
    if node is None:
        return WindowConfig()
    cfg = WindowConfig(
        capacity=_integer(node, "capacity", default=5),
        deviation_limit=_number(node, "deviation_limit_m", default=0.07),
        min_inliers=_integer(node, "min_inliers", default=3),
    )
    node.finish()
    if not (0 < cfg.min_inliers <= cfg.capacity) or cfg.deviation_limit <= 0:
        raise ParseError(f"{node.path}: invalid window parameters")
    return cfg


_CONTROLLER_FIELDS = {
    "lambda_gain": "lambda_gain",
    "v_max_mps": "v_max",
    "slow_zone_m": "slow_zone",
    "slow_factor": "slow_factor",
    "arrive_tol_m": "arrive_tol",
    "yaw_tol_rad": "yaw_tol",
    "yaw_rate_max_rps": "yaw_rate_max",
    "depth_error_margin_m": "depth_error_margin",
    "human_abort_margin_px": "human_abort_margin_px",
    "detection_timeout_s": "detection_timeout",
    "recovery_wait_s": "recovery_wait",
    "max_aborts": "max_aborts",
}


def _parse_controller(node: _Node | None) -> ControllerConfig:
    cfg = ControllerConfig()
    if node is None:
        return cfg
    overrides = {}
    for json_name, attr in _CONTROLLER_FIELDS.items():
        if attr in ("human_abort_margin_px", "max_aborts"):
            val = _integer(node, json_name)
        else:
            val = _number(node, json_name)
        if val is not None:
            overrides[attr] = val
    monitoring = node.take("abort_monitoring")
    if monitoring is not None:
        if not isinstance(monitoring, bool):
            raise ParseError(f"{node.path}.abort_monitoring: expected a boolean")
        overrides["abort_monitoring"] = monitoring
    node.finish()
    try:
        return replace(cfg, **overrides)
    except ValueError as exc:
        raise ParseError(f"{node.path}: {exc}") from exc


def parse_scenario(data: dict, source: str = "<scenario>") -> Scenario:
    root = _Node(data, source)
    name = root.take("name", required=True)
    if not isinstance(name, str) or not name:
        raise ParseError(f"{source}.name: expected a nonempty string")
    scene = _parse_scene(root.child("scene", required=True))
    camera = _parse_camera(root.child("camera", required=True))
    robot = _parse_robot(root.child("robot"))
    noise = _parse_noise(root.child("noise"))
    stages = _parse_stages(root.child("pipeline"))
    grasp = _parse_grasp(root.child("grasp"))
    window = _parse_window(root.child("window"))
    controller = _parse_controller(root.child("controller"))

    raw_coll = root.take("collision_events_s", default=[])
    if not isinstance(raw_coll, list) or any(
        isinstance(x, bool) or not isinstance(x, (int, float)) for x in raw_coll
    ):
        raise ParseError(f"{source}.collision_events_s: expected an array of times")
    collisions = tuple(Fraction(str(x)) for x in raw_coll)

    trials = _integer(root, "trials", default=10)
    margin = _number(root, "observer_margin_m", default=0.02)
    max_t = _fraction(root, "max_trial_time_s", default=Fraction(120))
    root.finish()
    try:
        return Scenario(
            name=name,
            scene=scene,
            camera=camera,
            robot=robot,
            noise=noise,
            stages=stages,
            grasp=grasp,
            window=window,
            controller=controller,
            collision_events=collisions,
            trials=trials,
            observer_margin=margin,
            max_trial_time=max_t,
        )
    except ValueError as exc:
        raise ParseError(f"{source}: {exc}") from exc


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise IoError(f"cannot read scenario file {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return parse_scenario(data, source=str(path))


def scenario_to_dict(scn: Scenario) -> dict:
    """Serializable form embedded in trial logs so replays are self-contained."""
    prims = []
    for i, prim in enumerate(scn.scene.primitives):
        s = prim.shape
        entry: dict = {"label": {OBJECT: "object", HAND: "hand", BODY: "body"}[prim.label]}
        if prim.label == OBJECT:
            entry["object_id"] = prim.object_id
        if prim.name:
            entry["name"] = prim.name
        if isinstance(s, SphereShape):
            entry |= {"shape": "sphere", "center_m": list(s.center), "radius_m": s.radius}
        elif isinstance(s, CapsuleShape):
            entry |= {
                "shape": "capsule",
                "point_a_m": list(s.point_a),
                "point_b_m": list(s.point_b),
                "radius_m": s.radius,
            }
        else:
            entry |= {
                "shape": "box",
                "center_m": list(s.center),
                "half_extents_m": list(s.half_extents),
                "quaternion_wxyz": list(s.orientation),
            }
        keys = scn.scene.trajectories.get(i)
        if keys:
            entry["keyframes"] = [
                {
                    "t_s": t,
                    "position_m": list(p.position),
                    "quaternion_wxyz": list(p.orientation),
                }
                for t, p in keys
            ]
        prims.append(entry)

    intr = scn.camera.intrinsics
    return {
        "name": scn.name,
        "scene": {"primitives": prims},
        "camera": {
            "fx": intr.fx,
            "fy": intr.fy,
            "cx": intr.cx,
            "cy": intr.cy,
            "width_px": intr.width,
            "height_px": intr.height,
            "min_depth_m": intr.min_depth,
            "max_depth_m": intr.max_depth,
            "fps": float(scn.camera.fps),
            "mount_offset_m": list(scn.camera.mount_offset),
        },
        "robot": {
            "reach_m": scn.robot.reach,
            "home_position_m": list(scn.robot.home.position),
            "home_yaw_rad": scn.robot.home.yaw,
            "drop_position_m": list(scn.robot.drop.position),
            "drop_yaw_rad": scn.robot.drop.yaw,
            "camera_axis": list(scn.robot.camera_axis),
        },
        "noise": {
            "miss_prob": scn.noise.miss_prob,
            "bbox_jitter_px": scn.noise.bbox_jitter_px,
            "mask_flip_prob": scn.noise.mask_flip_prob,
        },
        "pipeline": {
            "stages": [
                {
                    "name": s.name,
                    "latency_s": float(s.latency),
                    "max_rate_fps": float(s.max_rate),
                    "buffer": s.buffer_capacity,
                }
                for s in scn.stages
            ]
        },
        "grasp": {
            "plane_offset_m": scn.grasp.plane_offset,
            "q_min": scn.grasp.q_min,
            "filter_margin_px": scn.grasp.filter_margin_px,
        },
        "window": {
            "capacity": scn.window.capacity,
            "deviation_limit_m": scn.window.deviation_limit,
            "min_inliers": scn.window.min_inliers,
        },
        "controller": {
            "lambda_gain": scn.controller.lambda_gain,
            "v_max_mps": scn.controller.v_max,
            "slow_zone_m": scn.controller.slow_zone,
            "slow_factor": scn.controller.slow_factor,
            "arrive_tol_m": scn.controller.arrive_tol,
            "yaw_tol_rad": scn.controller.yaw_tol,
            "yaw_rate_max_rps": scn.controller.yaw_rate_max,
            "depth_error_margin_m": scn.controller.depth_error_margin,
            "human_abort_margin_px": scn.controller.human_abort_margin_px,
            "detection_timeout_s": scn.controller.detection_timeout,
            "recovery_wait_s": scn.controller.recovery_wait,
            "max_aborts": scn.controller.max_aborts,
            "abort_monitoring": scn.controller.abort_monitoring,
        },
        "collision_events_s": [float(t) for t in scn.collision_events],
        "trials": scn.trials,
        "observer_margin_m": scn.observer_margin,
        "max_trial_time_s": float(scn.max_trial_time),
    }
