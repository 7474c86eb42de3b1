"""Visual-servoing handover controller with abort monitoring and recovery.

The arm is a free-flying end effector: position integrates the commanded
velocity, orientation is a yaw about a fixed approach axis (the camera's
optical axis). Position-based servoing drives toward the frozen grasp point
with a hard speed cap that drops to a crawl inside the final slow zone.

Every tick the controller cross-checks the frozen grasp against the current
frame: if a human pixel appears near the reprojected grasp pixel, or the
measured depth there deviates too far from the expected depth, the approach
aborts, the arm returns home and the handover restarts. A sensed collision
triggers the recovery behavior instead: stop, open the gripper, wait, home.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from handover_sim.geometry import Pose, direction_of_yaw, quat_from_matrix, yaw_error
from handover_sim.grasping import GraspPose
from handover_sim.aggregation import Frozen, PushResult
from handover_sim.scene import GraspOutcome


class IllegalTransitionError(Exception):
    """Guard against programming errors in the state machine."""


class HandoverState(Enum):
    HOME = "home"
    WAITING_FOR_OBJECT = "waiting_for_object"
    AGGREGATING = "aggregating"
    APPROACHING = "approaching"
    SLOW_APPROACH = "slow_approach"
    GRASPING = "grasping"
    TRANSPORTING = "transporting"
    DROPPING = "dropping"
    RECOVERING = "recovering"
    DONE = "done"


class TrialOutcome(str, Enum):
    SUCCESS = "success"
    GRASP_FAIL = "grasp_fail"
    SAFETY_VIOLATION = "safety_violation"
    DETECTION_FAIL = "detection_fail"


MOVING_STATES = (
    HandoverState.HOME,
    HandoverState.APPROACHING,
    HandoverState.SLOW_APPROACH,
    HandoverState.TRANSPORTING,
)


@dataclass(frozen=True)
class ControllerConfig:
    lambda_gain: float = 1.5  # 1/s proportional gain
    v_max: float = 0.25  # m/s hard speed cap
    slow_zone: float = 0.07  # m, final-approach crawl zone
    slow_factor: float = 0.15  # crawl cap as fraction of v_max
    arrive_tol: float = 0.005  # m positional arrival tolerance
    yaw_tol: float = 0.02  # rad yaw arrival tolerance
    yaw_rate_max: float = 1.0  # rad/s
    depth_error_margin: float = 0.05  # m allowed grasp-depth deviation
    human_abort_margin_px: int = 5
    detection_timeout: float = 30.0  # s
    recovery_wait: float = 3.0  # s
    max_aborts: int = 3
    abort_monitoring: bool = True  # per-tick approach abort checks

    def __post_init__(self):
        positive = (
            self.lambda_gain,
            self.v_max,
            self.slow_zone,
            self.slow_factor,
            self.arrive_tol,
            self.yaw_tol,
            self.yaw_rate_max,
            self.depth_error_margin,
            self.detection_timeout,
            self.recovery_wait,
        )
        if any(v <= 0 for v in positive) or self.max_aborts <= 0 or self.human_abort_margin_px < 0:
            raise ValueError("controller config values must be positive")
        if not 0 < self.slow_factor <= 1:
            raise ValueError("slow_factor must lie in (0, 1]")


def ee_orientation(yaw: float, axis: np.ndarray) -> np.ndarray:
    """Quaternion whose z-axis is the approach axis and x-axis the jaw
    closing direction at the given yaw."""
    x = direction_of_yaw(yaw, axis)
    z = np.asarray(axis, dtype=float)
    z = z / np.linalg.norm(z)
    y = np.cross(z, x)
    return quat_from_matrix(np.column_stack([x, y, z]))


def pbvs_velocity(current: np.ndarray, goal: np.ndarray, cfg: ControllerConfig) -> np.ndarray:
    """Proportional velocity toward the goal, capped, zero inside arrival."""
    e = np.asarray(goal, dtype=float) - np.asarray(current, dtype=float)
    dist = float(np.linalg.norm(e))
    if dist <= cfg.arrive_tol:
        return np.zeros(3)
    cap = cfg.v_max if dist > cfg.slow_zone else cfg.slow_factor * cfg.v_max
    v = cfg.lambda_gain * e
    speed = float(np.linalg.norm(v))
    if speed > cap:
        v = v * (cap / speed)
    return v


@dataclass(frozen=True)
class TargetPose:
    """Position plus jaw yaw; the approach axis is fixed per trial."""

    position: np.ndarray
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))


@dataclass
class ArmState:
    """Kinematic end effector: straight-line velocity integration.

    ``yaw`` is the wrist roll about the approach axis on the full circle;
    grasp angles are antipodal (period pi) and compare via ``yaw_error``, but
    the roll itself must stay continuous or the eye-in-hand camera frame
    would flip mid-flight."""

    position: np.ndarray
    yaw: float
    approach_axis: np.ndarray
    gripper_width: float = 0.07
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    yaw_rate: float = 0.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.approach_axis = np.asarray(self.approach_axis, dtype=float).reshape(3)
        self.approach_axis = self.approach_axis / np.linalg.norm(self.approach_axis)

    def advance(self, dt: float) -> None:
        self.position = self.position + self.velocity * dt
        self.yaw = (self.yaw + self.yaw_rate * dt) % (2 * math.pi)

    def ee_pose(self) -> Pose:
        return Pose(position=self.position, orientation=ee_orientation(self.yaw, self.approach_axis))

    def jaw_segment(self) -> tuple[np.ndarray, np.ndarray]:
        """Endpoints of the jaw closing segment at the current pose."""
        d = direction_of_yaw(self.yaw, self.approach_axis)
        half = self.gripper_width / 2.0
        return self.position - half * d, self.position + half * d


@dataclass
class ControlSignals:
    """Per-frame inputs distilled from the perception pipeline."""

    target_present: bool = False
    window_result: PushResult | None = None
    expected_depth: float | None = None  # None suspends the depth check (blind zone)
    depth_at_grasp_pixel: float | None = None  # None: grasp pixel left the image
    human_near_grasp: bool = False
    collision: bool = False
    grasp_close_outcome: GraspOutcome | None = None


class HandoverController:
    """Single-owner state machine advanced by the pipeline clock."""

    def __init__(
        self,
        cfg: ControllerConfig,
        home: TargetPose,
        drop: TargetPose,
        approach_axis: np.ndarray,
        log=None,
    ):
        self.cfg = cfg
        self.home = home
        self.drop = drop
        self.arm = ArmState(
            position=home.position.copy(), yaw=home.yaw, approach_axis=approach_axis
        )
        self.state = HandoverState.HOME
        self.outcome: TrialOutcome | None = None
        self.frozen: GraspPose | None = None
        self.abort_count = 0
        self.recovery_cycles = 0
        self.ever_detected = False
        self._recover_until: float | None = None
        self._held_object: int | None = None
        self._log = log or (lambda record: None)
        self._last_t: float | None = None

    # ------------------------------------------------------------------
    # Transitions
    # ------------------------------------------------------------------

    def _goto(self, t: float, new_state: HandoverState, reason: str) -> None:
        if self.state == HandoverState.DONE:
            raise IllegalTransitionError("trial already finished")
        goal = self._goal_position()
        self._log(
            {
                "type": "transition",
                "t": float(t),
                "state_from": self.state.value,
                "state_to": new_state.value,
                "reason": reason,
                "ee": [float(x) for x in self.arm.position],
                "distance_to_goal": (
                    float(np.linalg.norm(goal - self.arm.position)) if goal is not None else None
                ),
            }
        )
        self.state = new_state

    def _finish(self, t: float, outcome: TrialOutcome, reason: str) -> None:
        self.outcome = outcome
        self.arm.velocity = np.zeros(3)
        self.arm.yaw_rate = 0.0
        self._goto(t, HandoverState.DONE, reason)
        self._log({"type": "done", "t": float(t), "outcome": outcome.value})

    def _goal_position(self) -> np.ndarray | None:
        if self.state in (HandoverState.APPROACHING, HandoverState.SLOW_APPROACH):
            return self.frozen.point_base if self.frozen else None
        if self.state == HandoverState.TRANSPORTING:
            return self.drop.position
        if self.state in (HandoverState.HOME, HandoverState.RECOVERING):
            return self.home.position
        return None

    # ------------------------------------------------------------------
    # Event entry points
    # ------------------------------------------------------------------

    def halt(self, t: float, reason: str) -> None:
        """External safety stop (the simulated experiment observer)."""
        if self.state != HandoverState.DONE:
            self._finish(t, TrialOutcome.SAFETY_VIOLATION, reason)

    def on_timer(self, t: float, kind: str) -> None:
        """Scheduled timers: detection timeout, recovery wait, watchdog."""
        if self.state == HandoverState.DONE:
            return
        if kind == "detection_timeout":
            if not self.ever_detected and self.state in (
                HandoverState.HOME,
                HandoverState.WAITING_FOR_OBJECT,
            ):
                self._finish(t, TrialOutcome.DETECTION_FAIL, "no target within timeout")
        elif kind == "recovery_done":
            if self.state == HandoverState.RECOVERING and self._recover_until is not None:
                if t >= self._recover_until - 1e-9:
                    self._recover_until = None
                    self._goto(t, HandoverState.HOME, "recovery wait elapsed, homing")
        elif kind == "watchdog":
            self._finish(t, TrialOutcome.GRASP_FAIL, "trial watchdog expired")
        else:
            raise ValueError(f"unknown timer {kind}")

    def arm_state_at(self, t: float) -> tuple[np.ndarray, float]:
        """Extrapolated (position, yaw) under the current command, no mutation.

        Used for camera captures that fall between control ticks; consistent
        with the straight-line integration the next tick will perform."""
        dt = 0.0 if self._last_t is None else t - self._last_t
        pos = self.arm.position + self.arm.velocity * dt
        yaw = (self.arm.yaw + self.arm.yaw_rate * dt) % (2 * math.pi)
        return pos, yaw

    def step(self, t: float, signals: ControlSignals) -> None:
        """Advance one control tick with fresh frame-derived signals."""
        if self.state == HandoverState.DONE:
            return
        dt = 0.0 if self._last_t is None else t - self._last_t
        self._last_t = t
        self.arm.advance(dt)

        if signals.collision:
            self._trigger_recovery(t)
            return
        if self.state == HandoverState.RECOVERING:
            return  # holding still until the recovery timer fires

        handlers = {
            HandoverState.HOME: self._step_home,
            HandoverState.WAITING_FOR_OBJECT: self._step_waiting,
            HandoverState.AGGREGATING: self._step_aggregating,
            HandoverState.APPROACHING: self._step_approach,
            HandoverState.SLOW_APPROACH: self._step_approach,
            HandoverState.GRASPING: self._step_grasping,
            HandoverState.TRANSPORTING: self._step_transporting,
            HandoverState.DROPPING: self._step_dropping,
        }
        # A tick may legitimately cross home arrival -> waiting -> aggregating
        # with one fresh frame; chain those transitions instead of wasting it.
        for _ in range(3):
            prev = self.state
            handlers[self.state](t, signals)
            if self.state == prev or self.state not in (
                HandoverState.WAITING_FOR_OBJECT,
                HandoverState.AGGREGATING,
            ):
                break
        self._apply_motion()

    # ------------------------------------------------------------------
    # Per-state behavior
    # ------------------------------------------------------------------

    def _step_home(self, t: float, signals: ControlSignals) -> None:
        if self._arrived(self.home):
            self.arm.position = self.home.position.copy()
            self.arm.yaw = self.home.yaw
            self._goto(t, HandoverState.WAITING_FOR_OBJECT, "at home pose")

    def _step_waiting(self, t: float, signals: ControlSignals) -> None:
        if signals.target_present:
            self.ever_detected = True
            self._goto(t, HandoverState.AGGREGATING, "target detected in workspace")

    def _step_aggregating(self, t: float, signals: ControlSignals) -> None:
        if isinstance(signals.window_result, Frozen):
            self.frozen = signals.window_result.pose
            self.arm.gripper_width = self.frozen.width
            self._goto(t, HandoverState.APPROACHING, "grasp pose frozen")

    def _step_approach(self, t: float, signals: ControlSignals) -> None:
        if self._abort_check(t, signals):
            return
        assert self.frozen is not None
        dist = float(np.linalg.norm(self.frozen.point_base - self.arm.position))
        if self.state == HandoverState.APPROACHING and dist <= self.cfg.slow_zone:
            self._goto(t, HandoverState.SLOW_APPROACH, "entered slow zone")
        if (
            self.state == HandoverState.SLOW_APPROACH
            and dist <= self.cfg.arrive_tol
            and abs(yaw_error(self.frozen.yaw, self.arm.yaw)) <= self.cfg.yaw_tol
        ):
            self._goto(t, HandoverState.GRASPING, "reached grasp pose")

    def _step_grasping(self, t: float, signals: ControlSignals) -> None:
        # The gripper never closes while a human pixel sits near the grasp.
        if self._abort_check(t, signals):
            return
        outcome = signals.grasp_close_outcome
        if outcome is None:
            return  # waiting for the close result
        self._log({"type": "gripper_close", "t": float(t), "outcome": outcome.kind})
        if outcome.kind == GraspOutcome.HUMAN_PINCH:
            self._finish(t, TrialOutcome.SAFETY_VIOLATION, "pinch detected at close")
        elif outcome.kind == GraspOutcome.OBJECT_SECURED:
            self._held_object = outcome.object_id
            self._goto(t, HandoverState.TRANSPORTING, f"object {outcome.object_id} secured")
        else:
            self._finish(t, TrialOutcome.GRASP_FAIL, f"close result: {outcome.kind}")

    def _step_transporting(self, t: float, signals: ControlSignals) -> None:
        if self._arrived(self.drop):
            self.arm.gripper_width = 0.07
            self._log({"type": "gripper_open", "t": float(t), "released": self._held_object})
            self._held_object = None
            self._goto(t, HandoverState.DROPPING, "over the drop bin")

    def _step_dropping(self, t: float, signals: ControlSignals) -> None:
        self._finish(t, TrialOutcome.SUCCESS, "object dropped in bin")

    # ------------------------------------------------------------------
    # Shared behavior
    # ------------------------------------------------------------------

    def _abort_check(self, t: float, signals: ControlSignals) -> bool:
        if not self.cfg.abort_monitoring:
            return False
        reason = None
        if signals.human_near_grasp:
            reason = "human pixels near grasp point"
        elif signals.expected_depth is not None:
            if signals.depth_at_grasp_pixel is None:
                reason = "grasp pixel left the image"
            elif abs(signals.depth_at_grasp_pixel - signals.expected_depth) > self.cfg.depth_error_margin:
                reason = "grasp depth deviation exceeded margin"
        if reason is None:
            return False
        self.abort_count += 1
        self.frozen = None
        if self.abort_count > self.cfg.max_aborts:
            self._finish(t, TrialOutcome.GRASP_FAIL, f"abort limit reached: {reason}")
        else:
            self._goto(t, HandoverState.HOME, f"abort: {reason}")
        return True

    def _trigger_recovery(self, t: float) -> None:
        """Stop, open the gripper now; homing starts after the recovery wait."""
        self.arm.velocity = np.zeros(3)
        self.arm.yaw_rate = 0.0
        self._log({"type": "gripper_open", "t": float(t), "released": self._held_object})
        self._held_object = None
        self.arm.gripper_width = 0.07
        self.frozen = None
        self.recovery_cycles += 1
        self._recover_until = t + self.cfg.recovery_wait
        self._goto(t, HandoverState.RECOVERING, "collision sensed, recovering")

    def _arrived(self, target: TargetPose) -> bool:
        return (
            float(np.linalg.norm(target.position - self.arm.position)) <= self.cfg.arrive_tol
            and abs(yaw_error(target.yaw, self.arm.yaw)) <= self.cfg.yaw_tol
        )

    def _apply_motion(self) -> None:
        goal_yaw = None
        if self.state in (HandoverState.APPROACHING, HandoverState.SLOW_APPROACH):
            goal, goal_yaw = self.frozen.point_base, self.frozen.yaw
        elif self.state == HandoverState.TRANSPORTING:
            goal, goal_yaw = self.drop.position, self.drop.yaw
        elif self.state == HandoverState.HOME:
            goal, goal_yaw = self.home.position, self.home.yaw
        else:
            self.arm.velocity = np.zeros(3)
            self.arm.yaw_rate = 0.0
            return
        v = pbvs_velocity(self.arm.position, goal, self.cfg)
        # Safety cap: crawl whenever the jaws are near the frozen grasp point,
        # regardless of where the current goal is.
        if self.frozen is not None:
            near = float(np.linalg.norm(self.frozen.point_base - self.arm.position))
            if near <= self.cfg.slow_zone:
                cap = self.cfg.slow_factor * self.cfg.v_max
                speed = float(np.linalg.norm(v))
                if speed > cap:
                    v = v * (cap / speed)
        self.arm.velocity = v
        err = yaw_error(goal_yaw, self.arm.yaw)
        rate = self.cfg.lambda_gain * err
        self.arm.yaw_rate = max(-self.cfg.yaw_rate_max, min(self.cfg.yaw_rate_max, rate))
        if abs(err) <= self.cfg.yaw_tol:
            self.arm.yaw_rate = 0.0
