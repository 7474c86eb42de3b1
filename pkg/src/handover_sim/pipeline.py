"""Deterministic discrete-event execution of the staged handover pipeline.

Topology (fixed, validated acyclic):

    camera -> {detector, hand_seg, body_seg} -> grasp_select -> aggregate -> control

The virtual clock is exact: event times are rationals (``fractions.Fraction``),
so a 30 fps camera fires at k/30 and latency sums like 0.033 + 0.0125 + 0.017
come out as exactly 1/16 s. Floats only appear at the edges (logs, controller
arithmetic). Events execute in a total order on (time, stage priority,
schedule sequence), which makes runs byte-reproducible regardless of host.

Each stage is event driven: it begins processing the newest buffered input the
moment it is idle (subject to its rate cap) and emits the result one latency
later. Keep-newest buffers drop the oldest entry on overflow, and a stage
never processes a frame older than one it has already finished.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from handover_sim import grasping, perception
from handover_sim.aggregation import Frozen, GraspWindow, Pending, Restarted
from handover_sim.control import (
    ControlSignals,
    HandoverController,
    HandoverState,
    ee_orientation,
)
from handover_sim.geometry import Pose, direction_of_yaw
from handover_sim.grasping import NoValidGraspError
from handover_sim.scenario import Scenario, StageSpec
from handover_sim.scene import grasp_outcome, min_human_distance, render, scene_at


class PipelineError(Exception):
    pass


class CyclicGraphError(PipelineError):
    pass


class InvalidRateError(PipelineError):
    pass


class NoFreezeEventError(PipelineError):
    """The trial log holds no frozen-grasp event."""


_TIMER_PRIORITY = 900


@dataclass(frozen=True)
class FrameStamp:
    sequence: int
    capture_time: float
    stage_times: dict[str, float] = field(default_factory=dict)


def stage_order(stages: list[StageSpec], edges: list[tuple[str, str]]) -> dict[str, int]:
    """Topological priority per stage; raises on cycles or unknown names."""
    names = [s.name for s in stages]
    if len(set(names)) != len(names):
        raise ValueError("duplicate stage names")
    known = set(names)
    for a, b in edges:
        if a not in known or b not in known:
            raise ValueError(f"edge ({a}, {b}) references unknown stage")
    incoming = {n: 0 for n in names}
    for _, b in edges:
        incoming[b] += 1
    order: list[str] = []
    ready = [n for n in names if incoming[n] == 0]
    while ready:
        n = ready.pop(0)
        order.append(n)
        for a, b in edges:
            if a == n:
                incoming[b] -= 1
                if incoming[b] == 0:
                    ready.append(b)
    if len(order) != len(names):
        raise CyclicGraphError("pipeline graph contains a cycle")
    return {n: i for i, n in enumerate(order)}


PIPELINE_EDGES = [
    ("camera", "detector"),
    ("camera", "hand_seg"),
    ("camera", "body_seg"),
    ("detector", "grasp_select"),
    ("hand_seg", "grasp_select"),
    ("body_seg", "grasp_select"),
    ("grasp_select", "aggregate"),
    ("aggregate", "control"),
]


class _Scheduler:
    def __init__(self):
        self._heap: list = []
        self._seq = 0

    def at(self, t: Fraction, priority: int, fn) -> None:
        heapq.heappush(self._heap, (t, priority, self._seq, fn))
        self._seq += 1

    def pop(self):
        return heapq.heappop(self._heap) if self._heap else None


class _Stage:
    """Runtime state of one pipeline stage."""

    def __init__(self, spec: StageSpec, priority: int, process, emit):
        self.spec = spec
        self.priority = priority
        self.process = process  # (payload, t: Fraction) -> output payload | None
        self.emit = emit  # (output, t: Fraction) -> None
        self.period = Fraction(1) / spec.max_rate
        self.buffer: list = []
        self.busy = False
        self.last_start: Fraction | None = None
        self.last_seq = -1

    def deliver(self, sched: _Scheduler, item, t: Fraction) -> None:
        self.buffer.append(item)
        if len(self.buffer) > self.spec.buffer_capacity:
            self.buffer.pop(0)  # keep-newest: overflow drops the oldest entry
        assert len(self.buffer) <= self.spec.buffer_capacity
        self.try_start(sched, t)

    def try_start(self, sched: _Scheduler, t: Fraction) -> None:
        if self.busy or not self.buffer:
            return
        earliest = t
        if self.last_start is not None:
            earliest = max(earliest, self.last_start + self.period)
        if earliest > t:
            sched.at(earliest, self.priority, lambda tt: self.try_start(sched, tt))
            return
        item = self.buffer[-1]  # newest wins; anything older is stale
        self.buffer.clear()
        seq = item.stamp.sequence
        assert seq > self.last_seq, "stage consumed an out-of-order frame"
        self.last_seq = seq
        self.busy = True
        self.last_start = t
        out = self.process(item, t)
        finish_t = t + self.spec.latency
        sched.at(finish_t, self.priority, lambda tt: self._finish(sched, out, tt))

    def _finish(self, sched: _Scheduler, out, t: Fraction) -> None:
        self.busy = False
        if out is not None:
            times = out.stamp.stage_times
            assert all(float(t) >= prev for prev in times.values()), (
                "stage completion times must be nondecreasing along the dataflow"
            )
            times[self.spec.name] = float(t)
            self.emit(out, t)
        self.try_start(sched, t)


# ---------------------------------------------------------------------------
# Payloads flowing between stages
# ---------------------------------------------------------------------------


@dataclass
class _FramePacket:
    stamp: FrameStamp
    capture_t: Fraction
    cam_pose: Pose  # world_from_camera at capture time
    render_out: object
    roi_origin: tuple[int, int] | None = None  # set when only a window around
    # the frozen grasp pixel was rendered (post-freeze fast path)


@dataclass
class _BranchOut:
    stamp: FrameStamp
    kind: str
    frame: _FramePacket
    payload: object


@dataclass
class _GraspOut:
    stamp: FrameStamp
    frame: _FramePacket
    target_present: bool
    grasp: object  # GraspPose | None
    hand: object
    body: object
    boxes: list = field(default_factory=list)


@dataclass
class _ControlPacket:
    stamp: FrameStamp
    frame: _FramePacket
    target_present: bool
    window_result: object
    hand: object
    body: object


class _Join:
    """Assembles per-frame branch outputs; completes when all three arrive."""

    def __init__(self, downstream: _Stage):
        self.parts: dict[int, dict[str, _BranchOut]] = {}
        self.downstream = downstream

    def deliver(self, sched: _Scheduler, out: _BranchOut, t: Fraction) -> None:
        seq = out.stamp.sequence
        bucket = self.parts.setdefault(seq, {})
        bucket[out.kind] = out
        if len(bucket) == 3:
            item = _GraspOut(
                stamp=out.frame.stamp,
                frame=out.frame,
                target_present=False,
                grasp=None,
                hand=bucket["hand"].payload,
                body=bucket["body"].payload,
                boxes=bucket["detector"].payload,
            )
            for k in [k for k in self.parts if k <= seq]:
                del self.parts[k]
            self.downstream.deliver(sched, item, t)


def run(
    scenario: Scenario,
    seed: int,
    until: Fraction | None = None,
    edges: list[tuple[str, str]] | None = None,
):
    """Execute one closed-loop trial; returns (event log, summary dict).

    The event log is a list of JSON-serializable records: one ``tick`` per
    control frame, one ``transition`` per state change, plus gripper,
    collision and done markers. The summary carries the outcome, timing and
    abort counters used by the batch harness.
    """
    runner = _TrialRunner(scenario, seed, edges=edges)
    return runner.run(until if until is not None else scenario.max_trial_time)


class _TrialRunner:
    def __init__(self, scenario: Scenario, seed: int, edges=None):
        self.scn = scenario
        self.seed = seed
        self.noise = perception.PerceptionNoise(
            miss_prob=scenario.noise.miss_prob,
            bbox_jitter_px=scenario.noise.bbox_jitter_px,
            mask_flip_prob=scenario.noise.mask_flip_prob,
            seed=seed,
        )
        self.events: list[dict] = []
        self.sched = _Scheduler()
        self.priorities = stage_order(list(scenario.stages), edges or PIPELINE_EDGES)
        self.window = GraspWindow(
            capacity=scenario.window.capacity,
            deviation_limit=scenario.window.deviation_limit,
            min_inliers=scenario.window.min_inliers,
        )
        self.controller = HandoverController(
            cfg=scenario.controller,
            home=scenario.robot.home,
            drop=scenario.robot.drop,
            approach_axis=scenario.robot.camera_axis,
            log=self.events.append,
        )
        self.world_from_base = scenario.scene.robot_base
        self.base_from_world = self.world_from_base.inverse()
        self.frame_seq = 0
        self.pending_close = None
        self.close_done = False
        self.seen_recoveries = 0
        self.seen_aborts = 0
        # Static scenes yield one immutable snapshot; skip re-posing per tick.
        self._static_snapshot = (
            scene_at(scenario.scene, 0.0) if not scenario.scene.trajectories else None
        )

        specs = {s.name: s for s in scenario.stages}
        self.stages: dict[str, _Stage] = {}
        self.stages["control"] = _Stage(
            specs["control"], self.priorities["control"], self._control_process, lambda o, t: None
        )
        self.stages["aggregate"] = _Stage(
            specs["aggregate"],
            self.priorities["aggregate"],
            self._aggregate_process,
            lambda o, t: self.stages["control"].deliver(self.sched, o, t),
        )
        self.stages["grasp_select"] = _Stage(
            specs["grasp_select"],
            self.priorities["grasp_select"],
            self._grasp_process,
            lambda o, t: self.stages["aggregate"].deliver(self.sched, o, t),
        )
        self.join = _Join(self.stages["grasp_select"])
        for kind, fn in (
            ("detector", self._detect_process),
            ("hand_seg", self._hand_process),
            ("body_seg", self._body_process),
        ):
            self.stages[kind] = _Stage(
                specs[kind],
                self.priorities[kind],
                fn,
                lambda o, t: self.join.deliver(self.sched, o, t),
            )
        self.stages["camera"] = _Stage(
            specs["camera"],
            self.priorities["camera"],
            lambda item, t: item,
            self._camera_emit,
        )

    def _snapshot(self, t: float):
        if self._static_snapshot is not None:
            return self._static_snapshot
        return scene_at(self.scn.scene, t)

    # ------------------------------------------------------------------
    # Stage bodies
    # ------------------------------------------------------------------

    def _camera_emit(self, packet: _FramePacket, t: Fraction) -> None:
        for name in ("detector", "hand_seg", "body_seg"):
            self.stages[name].deliver(self.sched, packet, t)

    def _detect_process(self, packet: _FramePacket, t: Fraction) -> _BranchOut:
        # Post-freeze the detector output is no longer consumed: the handover
        # target is locked in, so ROI frames skip detection entirely.
        if packet.roi_origin is not None:
            return _BranchOut(packet.stamp, "detector", packet, [])
        boxes = perception.detect_objects(packet.render_out, self.noise, packet.stamp.sequence)
        return _BranchOut(packet.stamp, "detector", packet, boxes)

    def _hand_process(self, packet: _FramePacket, t: Fraction) -> _BranchOut:
        mask = perception.segment_hand(packet.render_out, self.noise, packet.stamp.sequence)
        return _BranchOut(packet.stamp, "hand", packet, mask)

    def _body_process(self, packet: _FramePacket, t: Fraction) -> _BranchOut:
        mask = perception.segment_body(packet.render_out, self.noise, packet.stamp.sequence)
        return _BranchOut(packet.stamp, "body", packet, mask)

    def _grasp_process(self, item: _GraspOut, t: Fraction) -> _GraspOut:
        frame = item.frame
        if frame.roi_origin is not None:
            return item  # frozen grasp in flight; selection output unused
        intr = self.scn.camera.intrinsics
        cam_to_base = self.base_from_world.compose(frame.cam_pose)
        target = perception.select_target(
            item.boxes, frame.render_out.depth, cam_to_base, self.scn.robot.reach, intr
        )
        if target is None:
            return item
        box, _ = target
        item.target_present = True
        try:
            pre, plane = grasping.insert_plane(
                frame.render_out.depth, box, self.scn.grasp.plane_offset
            )
            gmap = grasping.grasp_map(pre, plane, intr)
            fmap = grasping.filter_human(gmap, item.hand, item.body, self.scn.grasp.filter_margin_px)
            item.grasp = grasping.select_best(fmap, pre, intr, cam_to_base, self.scn.grasp.q_min)
        except (NoValidGraspError, grasping.EmptyTargetError):
            item.grasp = None
        return item

    def _aggregate_process(self, item: _GraspOut, t: Fraction) -> _ControlPacket:
        result = None
        if item.grasp is not None:
            result = self.window.push(item.grasp, float(item.frame.capture_t))
        return _ControlPacket(
            stamp=item.stamp,
            frame=item.frame,
            target_present=item.target_present,
            window_result=result,
            hand=item.hand,
            body=item.body,
        )

    def _control_process(self, packet: _ControlPacket, t: Fraction) -> None:
        t_f = float(t)
        signals = ControlSignals(
            target_present=packet.target_present,
            window_result=packet.window_result,
            grasp_close_outcome=self.pending_close,
        )
        self.pending_close = None
        frozen = self.controller.frozen
        if frozen is not None:
            self._grasp_monitor_signals(signals, packet, frozen)
        self.controller.step(t_f, signals)
        self._post_step(t)
        self._observer_check(t_f)

        ctl = self.controller
        window_status = "none"
        if isinstance(packet.window_result, Frozen):
            window_status = "frozen"
        elif isinstance(packet.window_result, Pending):
            window_status = "pending"
        elif isinstance(packet.window_result, Restarted):
            window_status = "restarted"
        self.events.append(
            {
                "type": "tick",
                "t": t_f,
                "seq": packet.stamp.sequence,
                "capture_t": float(packet.frame.capture_t),
                "state": ctl.state.value,
                "ee": [float(x) for x in ctl.arm.position],
                "yaw": float(ctl.arm.yaw),
                "axis": [float(x) for x in ctl.arm.approach_axis],
                "gripper_width": float(ctl.arm.gripper_width),
                "target_present": packet.target_present,
                "window": window_status,
            }
        )

    def _reproject_frozen(self, cam_pose: Pose, frozen):
        """Frozen grasp point in the camera frame plus its pixel, if any."""
        intr = self.scn.camera.intrinsics
        point_world = self.world_from_base.transform(frozen.point_base)
        p_cam = cam_pose.inverse().transform(point_world)
        if p_cam[2] <= 0:
            return p_cam, None
        u = int(math.floor(intr.fx * p_cam[0] / p_cam[2] + intr.cx + 0.5))
        v = int(math.floor(intr.fy * p_cam[1] / p_cam[2] + intr.cy + 0.5))
        return p_cam, (u, v)

    def _grasp_monitor_signals(self, signals: ControlSignals, packet: _ControlPacket, frozen):
        """Reprojection-based abort inputs from the freshest processed frame."""
        intr = self.scn.camera.intrinsics
        p_cam, pixel = self._reproject_frozen(packet.frame.cam_pose, frozen)
        # The frozen point sits past the surface; the sensor sees the surface,
        # so compare at surface depth.
        penetration = min(
            (1.0 - frozen.quality) * grasping.GRIPPER_MAX_WIDTH / 2.0,
            grasping.MAX_PENETRATION,
        )
        expected_surface = float(p_cam[2]) - penetration
        if expected_surface < intr.min_depth + self.scn.controller.depth_error_margin:
            # Within one error margin of the blind wall much of the target is
            # already invalid; the depth cross-check stops being meaningful.
            # The mask check below still applies.
            signals.expected_depth = None
        else:
            signals.expected_depth = expected_surface
        if pixel is None:
            signals.depth_at_grasp_pixel = None
            return
        u, v = pixel
        if not (0 <= u < intr.width and 0 <= v < intr.height):
            signals.depth_at_grasp_pixel = None
            return
        ou, ov = packet.frame.roi_origin or (0, 0)
        depth_img = packet.frame.render_out.depth
        ul, vl = u - ou, v - ov
        if not (0 <= ul < depth_img.width and 0 <= vl < depth_img.height):
            signals.depth_at_grasp_pixel = None  # stale window; treat as lost
            return
        # Pixel quantization makes a single sample flicker when the grasp sits
        # near the object silhouette; take the best-matching valid reading in
        # a 5x5 patch. Real object motion displaces the whole surface and is
        # still caught.
        v0, v1 = max(0, vl - 2), min(depth_img.height, vl + 3)
        u0, u1 = max(0, ul - 2), min(depth_img.width, ul + 3)
        patch = depth_img.data[v0:v1, u0:u1]
        valid = patch[patch > 0.0]
        if valid.size and signals.expected_depth is not None:
            signals.depth_at_grasp_pixel = float(
                valid[np.argmin(np.abs(valid - signals.expected_depth))]
            )
        else:
            signals.depth_at_grasp_pixel = float(depth_img.data[vl, ul])
        margin = self.scn.controller.human_abort_margin_px
        human = packet.hand.bits | packet.body.bits
        v0, v1 = max(0, vl - margin), min(depth_img.height, vl + margin + 1)
        u0, u1 = max(0, ul - margin), min(depth_img.width, ul + margin + 1)
        signals.human_near_grasp = bool(human[v0:v1, u0:u1].any())

    # ------------------------------------------------------------------
    # Runner-side reactions to controller activity
    # ------------------------------------------------------------------

    def _post_step(self, t: Fraction) -> None:
        ctl = self.controller
        if ctl.recovery_cycles > self.seen_recoveries:
            self.seen_recoveries = ctl.recovery_cycles
            wait = Fraction(str(self.scn.controller.recovery_wait))
            self.sched.at(
                t + wait, _TIMER_PRIORITY, lambda tt: self._timer(tt, "recovery_done")
            )
        if ctl.abort_count > self.seen_aborts:
            self.seen_aborts = ctl.abort_count
            self.window.reset()
            self.close_done = False
        if ctl.state == HandoverState.GRASPING and not self.close_done:
            self.close_done = True
            t_f = float(t)
            snap = self._snapshot(t_f)
            pos_world = self.world_from_base.transform(ctl.arm.position)
            jaw_dir_base = direction_of_yaw(ctl.arm.yaw, ctl.arm.approach_axis)
            jaw_dir_world = self.world_from_base.rotate(jaw_dir_base)
            outcome = grasp_outcome(snap, pos_world, jaw_dir_world, ctl.arm.gripper_width)
            self.pending_close = outcome

    def _observer_check(self, t_f: float) -> None:
        """Active simulated experiment observer: halt the robot when the jaw
        volume comes within the observer margin of human geometry outside the
        grasping state. The eye-in-hand camera cannot see threats that close,
        so this mirrors the human supervisor of the physical protocol."""
        ctl = self.controller
        if ctl.state in (HandoverState.GRASPING, HandoverState.DONE):
            return
        snap = self._snapshot(t_f)
        a, b = ctl.arm.jaw_segment()
        a_w = self.world_from_base.transform(a)
        b_w = self.world_from_base.transform(b)
        d = min_human_distance(snap, a_w, b_w)
        if d < self.scn.observer_margin:
            self.events.append({"type": "observer_stop", "t": t_f, "distance": d})
            ctl.halt(t_f, "observer safety stop: jaws too close to the human")

    def _timer(self, t: Fraction, kind: str) -> None:
        self.controller.on_timer(float(t), kind)

    def _capture(self, t: Fraction) -> None:
        if self.controller.state == HandoverState.DONE:
            return
        t_f = float(t)
        pos, yaw = self.controller.arm_state_at(t_f)
        ee_pose = Pose(
            position=pos,
            orientation=ee_orientation(yaw, self.controller.arm.approach_axis),
        )
        cam_pose = ee_pose.compose(self.scn.camera.mount_pose())
        snapshot = self._snapshot(t_f)
        intr = self.scn.camera.intrinsics
        window = None
        roi_origin = None
        frozen = self.controller.frozen
        if frozen is not None:
            # Once the grasp is frozen, control only consumes the depth and
            # human mask around the reprojected grasp pixel; render just that.
            _, pixel = self._reproject_frozen(cam_pose, frozen)
            margin = self.scn.controller.human_abort_margin_px + 2
            cu, cv = pixel if pixel is not None else (intr.width // 2, intr.height // 2)
            cu = min(max(cu, 0), intr.width - 1)
            cv = min(max(cv, 0), intr.height - 1)
            u0, v0 = max(0, cu - margin), max(0, cv - margin)
            u1, v1 = min(intr.width, cu + margin + 1), min(intr.height, cv + margin + 1)
            window = (u0, v0, u1 - u0, v1 - v0)
            roi_origin = (u0, v0)
        render_out = render(snapshot, cam_pose, intr, window=window)
        stamp = FrameStamp(self.frame_seq, t_f)
        packet = _FramePacket(stamp, t, cam_pose, render_out, roi_origin=roi_origin)
        self.frame_seq += 1
        self.stages["camera"].deliver(self.sched, packet, t)
        self.sched.at(
            t + Fraction(1) / self.scn.camera.fps, self.priorities["camera"], self._capture
        )

    def run(self, until: Fraction):
        self.sched.at(Fraction(0), self.priorities["camera"], self._capture)
        timeout = Fraction(str(self.scn.controller.detection_timeout))
        self.sched.at(timeout, _TIMER_PRIORITY, lambda t: self._timer(t, "detection_timeout"))
        self.sched.at(until, _TIMER_PRIORITY + 1, lambda t: self._timer(t, "watchdog"))
        for tc in self.scn.collision_events:
            self.sched.at(tc, _TIMER_PRIORITY, self._collision)

        end_t = 0.0
        while True:
            entry = self.sched.pop()
            if entry is None:
                break
            t, _, _, fn = entry
            if t > until:
                break
            fn(t)
            end_t = float(t)
            if self.controller.state == HandoverState.DONE:
                break

        ctl = self.controller
        summary = {
            "outcome": ctl.outcome.value if ctl.outcome else "grasp_fail",
            "total_time_s": end_t,
            "abort_count": ctl.abort_count,
            "recovery_cycles": ctl.recovery_cycles,
            "frames": self.frame_seq,
        }
        try:
            summary["initiation_time_s"] = measure_initiation(self.events)
        except NoFreezeEventError:
            summary["initiation_time_s"] = None
        return self.events, summary

    def _collision(self, t: Fraction) -> None:
        self.events.append({"type": "collision_injected", "t": float(t)})
        self.controller.step(float(t), ControlSignals(collision=True))
        self._post_step(t)


def measure_initiation(events: list[dict]) -> float:
    """Frozen-grasp time minus the capture time of the first detection that
    reached the controller."""
    detect_capture = None
    for rec in events:
        if rec.get("type") != "tick":
            continue
        if detect_capture is None and rec["target_present"]:
            detect_capture = rec["capture_t"]
        if rec["window"] == "frozen":
            if detect_capture is None:
                detect_capture = rec["capture_t"]
            return rec["t"] - detect_capture
    raise NoFreezeEventError("log holds no frozen-grasp tick")
