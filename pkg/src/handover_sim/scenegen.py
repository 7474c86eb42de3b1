"""Seeded random handover scenes and scenarios for batch experiments.

All generators are pure functions of a seed, built for desk-scale runs:
small eye-in-hand images keep whole batches fast while preserving every
pipeline behavior. Geometry is sampled so that nominal objects are graspable
(lateral width under the 7 cm stroke) and, for nominal scenes, the hand
stays clear of the grasp region.
"""

from __future__ import annotations

import numpy as np

from handover_sim.control import TargetPose
from handover_sim.geometry import CameraIntrinsics, Pose
from handover_sim.scenario import CameraConfig, RobotConfig, Scenario
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

SMALL_CAMERA = CameraConfig(
    intrinsics=CameraIntrinsics(fx=55.0, fy=55.0, cx=32.0, cy=24.0, width=64, height=48),
)

# Trial batches need enough pixels on the object that the 5 px human margin
# leaves grasp candidates; 80x60 keeps full runs fast.
TRIAL_CAMERA = CameraConfig(
    intrinsics=CameraIntrinsics(fx=70.0, fy=70.0, cx=40.0, cy=30.0, width=80, height=60),
)

ROBOT = RobotConfig(
    home=TargetPose(np.array([0.25, 0.0, 0.40])),
    drop=TargetPose(np.array([0.12, -0.30, 0.30])),
)


def _random_object(rng, center) -> tuple[Primitive, float]:
    """Random graspable primitive plus its radial extent from the center."""
    kind = rng.integers(0, 3)
    if kind == 0:
        r = rng.uniform(0.015, 0.028)
        return Primitive(SphereShape(center, r), OBJECT, 1, "sphere"), r
    if kind == 1:
        axis = rng.normal(size=3)
        axis = axis / np.linalg.norm(axis) * rng.uniform(0.02, 0.045)
        r = rng.uniform(0.012, 0.022)
        prim = Primitive(CapsuleShape(center - axis, center + axis, r), OBJECT, 1, "capsule")
        return prim, float(np.linalg.norm(axis)) + r
    q = rng.normal(size=4)
    half = rng.uniform(0.012, 0.025, size=3)
    prim = Primitive(BoxShape(center, half, q / np.linalg.norm(q)), OBJECT, 1, "box")
    return prim, float(np.linalg.norm(half))


def _hand(point_a, point_b, radius) -> Primitive:
    return Primitive(CapsuleShape(point_a, point_b, radius), HAND)


def _body(rng) -> Primitive:
    center = np.array(
        [rng.uniform(0.85, 1.05), rng.uniform(-0.1, 0.1), rng.uniform(0.25, 0.45)]
    )
    half = np.array([rng.uniform(0.06, 0.12), rng.uniform(0.15, 0.25), rng.uniform(0.25, 0.4)])
    return Primitive(BoxShape(center, half), BODY)


def _peripheral_body(rng) -> Primitive:
    """Torso low in the frame, as when the camera zooms on the held object.

    A body filling the view right behind a small object would leave no pixel
    outside the 5 px filter margin at desk-scale resolutions."""
    center = np.array(
        [rng.uniform(0.9, 1.05), rng.uniform(-0.08, 0.08), rng.uniform(-0.25, -0.1)]
    )
    half = np.array([rng.uniform(0.06, 0.12), rng.uniform(0.15, 0.25), rng.uniform(0.3, 0.45)])
    return Primitive(BoxShape(center, half), BODY)


def _object_center(rng) -> np.ndarray:
    return np.array(
        [rng.uniform(0.50, 0.60), rng.uniform(-0.05, 0.05), rng.uniform(0.36, 0.44)]
    )


def safety_frame_scene(seed: int) -> SceneModel:
    """One random scene with the hand overlapping, occluding, adjacent to or
    holding the object; ground truth for single-frame safety checks.

    Hand gaps sweep from interpenetration to comfortably clear so the filter
    boundary gets probed from both sides; half the scenes keep the torso out
    of the central view so grasp selection actually fires."""
    rng = np.random.default_rng(seed)
    center = _object_center(rng)
    obj, extent = _random_object(rng, center)
    arrangement = rng.integers(0, 4)
    r_hand = rng.uniform(0.018, 0.032)
    if arrangement == 0:  # overlapping the object
        anchor = center + rng.uniform(-0.02, 0.02, size=3)
    elif arrangement == 1:  # occluding: between camera and object
        anchor = center + np.array(
            [-rng.uniform(0.06, 0.10), rng.uniform(-0.02, 0.02), rng.uniform(-0.02, 0.02)]
        )
    elif arrangement == 2:  # beside the object, touching to barely clear
        direction = rng.normal(size=3)
        direction[0] = 0.0
        n = np.linalg.norm(direction)
        direction = direction / n if n > 1e-9 else np.array([0.0, 1.0, 0.0])
        anchor = center + direction * (extent + r_hand + rng.uniform(0.0, 0.05))
    else:  # holding from below with a gap sweeping the filter boundary
        gap = rng.uniform(0.005, 0.10)
        anchor = center + np.array(
            [0.0, rng.uniform(-0.02, 0.02), -(extent + r_hand + gap)]
        )
    sweep = rng.normal(size=3)
    sweep = sweep / np.linalg.norm(sweep) * rng.uniform(0.03, 0.06)
    body = _body(rng) if rng.random() < 0.5 else _peripheral_body(rng)
    prims = [obj, _hand(anchor - sweep, anchor + sweep, r_hand), body]
    return SceneModel(list(prims))


def _hand_below(rng, center, obj_extent, gap):
    """Hand capsule whose top surface sits ``gap`` below the object surface.

    The 5 px human filter at this resolution spans roughly 3 cm at arm's
    length, so nominal gaps must exceed that for any grasp to survive."""
    r_hand = rng.uniform(0.02, 0.03)
    tilt = np.array([0.0, rng.uniform(0.02, 0.05), -rng.uniform(0.005, 0.02)])
    top_reach = r_hand + abs(tilt[2])
    anchor = center + np.array(
        [rng.uniform(-0.01, 0.01), rng.uniform(-0.02, 0.02), -(obj_extent + gap + top_reach)]
    )
    return _hand(anchor - tilt, anchor + tilt, r_hand), anchor, tilt, r_hand


def nominal_scenario(seed: int, name: str = "gen_nominal") -> Scenario:
    """Static graspable object held clear of the hand; zero noise."""
    rng = np.random.default_rng(seed)
    center = _object_center(rng)
    obj, extent = _random_object(rng, center)
    hand, _, _, _ = _hand_below(rng, center, extent, gap=rng.uniform(0.08, 0.11))
    prims = [obj, hand, _peripheral_body(rng)]
    return Scenario(
        name=name,
        scene=SceneModel(prims),
        camera=TRIAL_CAMERA,
        robot=ROBOT,
    )


def moving_hand_scenario(seed: int, name: str = "gen_moving_hand") -> Scenario:
    """The hand rises toward the grasp zone mid-approach and retreats; the
    abort monitor must keep the jaws away until the hand clears."""
    rng = np.random.default_rng(seed)
    center = _object_center(rng)
    obj, extent = _random_object(rng, center)
    gap = rng.uniform(0.08, 0.11)
    _, anchor, tilt, r_hand = _hand_below(rng, center, extent, gap=gap)
    # local-frame hand: keyframes carry the capsule around
    hand_local = _hand(-tilt, tilt, r_hand)
    rest = anchor
    rise = gap + extent + rng.uniform(0.0, 0.02)  # up to (slightly past) the object
    t_start = rng.uniform(0.8, 2.2)
    speed = rng.uniform(0.05, 0.11)
    t_up = t_start + rise / speed
    hover = rng.uniform(0.6, 2.0)
    t_down = t_up + hover + rise / speed
    keys = [
        (0.0, Pose(position=rest)),
        (t_start, Pose(position=rest)),
        (t_up, Pose(position=rest + np.array([0.0, 0.0, rise]))),
        (t_up + hover, Pose(position=rest + np.array([0.0, 0.0, rise]))),
        (t_down, Pose(position=rest)),
        (60.0, Pose(position=rest)),
    ]
    prims = [obj, hand_local, _peripheral_body(rng)]
    return Scenario(
        name=name,
        scene=SceneModel(prims, trajectories={1: keys}),
        camera=TRIAL_CAMERA,
        robot=ROBOT,
    )


def moving_object_scenario(seed: int, name: str = "gen_moving_object") -> Scenario:
    """Hand and object drift away together mid-handover (depth deviation
    abort), then settle at a new reachable spot."""
    rng = np.random.default_rng(seed)
    center = _object_center(rng)
    obj_local, extent = _random_object(rng, np.zeros(3))
    gap = rng.uniform(0.08, 0.11)
    r_hand = rng.uniform(0.02, 0.03)
    tilt = np.array([0.0, rng.uniform(0.02, 0.05), -rng.uniform(0.005, 0.02)])
    hand_rest = np.array([0.0, 0.0, -(extent + gap + r_hand + abs(tilt[2]))])
    hand = _hand(hand_rest - tilt, hand_rest + tilt, r_hand)
    drift = np.array(
        [rng.uniform(-0.10, -0.02), rng.uniform(-0.04, 0.04), rng.uniform(-0.03, 0.03)]
    )
    t_start = rng.uniform(1.0, 2.4)
    speed = rng.uniform(0.05, 0.11)
    t_end = t_start + float(np.linalg.norm(drift)) / speed
    keys_obj = [
        (0.0, Pose(position=center)),
        (t_start, Pose(position=center)),
        (t_end, Pose(position=center + drift)),
        (60.0, Pose(position=center + drift)),
    ]
    keys_hand = [(t, Pose(position=p.position)) for t, p in keys_obj]
    prims = [obj_local, hand, _peripheral_body(rng)]
    return Scenario(
        name=name,
        scene=SceneModel(prims, trajectories={0: keys_obj, 1: keys_hand}),
        camera=TRIAL_CAMERA,
        robot=ROBOT,
    )


def mixed_trial_scenario(seed: int) -> Scenario:
    """Weighted mix of the three trial families, seeded deterministically."""
    rng = np.random.default_rng(seed ^ 0x5EED)
    pick = rng.random()
    if pick < 0.4:
        return nominal_scenario(seed, name="gen_mixed")
    if pick < 0.75:
        return moving_hand_scenario(seed, name="gen_mixed")
    return moving_object_scenario(seed, name="gen_mixed")
