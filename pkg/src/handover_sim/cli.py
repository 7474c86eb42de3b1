"""Command line interface: run batches, replay logs, render scenes, report.

Exit codes: 0 success, 2 scenario/log parse error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from handover_sim import harness, pgm
from handover_sim.control import TargetPose, ee_orientation
from handover_sim.geometry import Pose
from handover_sim.scenario import IoError as ScenarioIoError
from handover_sim.scenario import ParseError, load_scenario, parse_scenario
from handover_sim.scene import render, scene_at

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_IO = 3


def _cmd_run(args) -> int:
    scenario = load_scenario(args.scenario)
    results = harness.run_batch(
        scenario, seed=args.seed, out_dir=args.out_dir, trials=args.trials
    )
    rows = harness.summarize(results)
    print(harness.format_report(rows))
    print(f"\nwrote {len(results)} trial(s) to {args.out_dir}")
    return EXIT_OK


def _cmd_replay(args) -> int:
    path = Path(args.log)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ScenarioIoError(f"cannot read log {path}: {exc}") from exc
    if not lines:
        raise ParseError(f"{path}: empty log")
    try:
        records = [json.loads(line) for line in lines]
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc.msg} at line {exc.lineno}") from exc
    header = records[0]
    if header.get("type") != "trial_header":
        raise ParseError(f"{path}: first record is not a trial header")
    scenario = parse_scenario(header["scenario"], source=f"{path}[header]")
    events = records[1:]
    outcome = harness.classify_outcome(events, scenario.scene, scenario.observer_margin)
    print(f"scenario: {scenario.name}  trial: {header.get('trial')}  seed: {header.get('seed')}")
    for rec in events:
        if rec["type"] == "transition":
            print(f"  t={rec['t']:9.4f}  {rec['state_from']:>18} -> {rec['state_to']:<18} {rec['reason']}")
        elif rec["type"] in ("gripper_close", "gripper_open", "collision_injected", "done"):
            detail = {k: v for k, v in rec.items() if k not in ("type", "t")}
            print(f"  t={rec['t']:9.4f}  [{rec['type']}] {detail}")
    print(f"classified outcome: {outcome}")
    return EXIT_OK


def _cmd_render(args) -> int:
    scenario = load_scenario(args.scenario)
    home: TargetPose = scenario.robot.home
    ee_pose = Pose(
        position=home.position,
        orientation=ee_orientation(home.yaw, scenario.robot.camera_axis),
    )
    cam_pose = ee_pose.compose(scenario.camera.mount_pose())
    snapshot = scene_at(scenario.scene, args.time)
    out = render(snapshot, cam_pose, scenario.camera.intrinsics)
    try:
        if args.depth:
            pgm.write_depth_pgm(args.depth, out.depth)
            print(f"wrote {args.depth}")
        if args.class_path:
            pgm.write_class_pgm(args.class_path, out.class_image)
            print(f"wrote {args.class_path}")
    except OSError as exc:
        raise ScenarioIoError(f"cannot write render output: {exc}") from exc
    return EXIT_OK


def _cmd_report(args) -> int:
    try:
        results = harness.read_results_csv(args.infile)
    except OSError as exc:
        raise ScenarioIoError(f"cannot read {args.infile}: {exc}") from exc
    except (KeyError, ValueError) as exc:
        raise ParseError(f"{args.infile}: malformed results CSV ({exc})") from exc
    print(harness.format_report(harness.summarize(results)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="handover-sim",
        description="Deterministic human-to-robot handover simulation harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a scenario batch")
    p_run.add_argument("--scenario", required=True)
    p_run.add_argument("--trials", type=int, default=None, help="override the scenario trial count")
    p_run.add_argument("--seed", type=int, default=0)
    p_run.add_argument("--out-dir", required=True)
    p_run.set_defaults(fn=_cmd_run)

    p_replay = sub.add_parser("replay", help="replay and re-classify a trial log")
    p_replay.add_argument("--log", required=True)
    p_replay.set_defaults(fn=_cmd_replay)

    p_render = sub.add_parser("render", help="render a scenario frame to PGM files")
    p_render.add_argument("--scenario", required=True)
    p_render.add_argument("--time", type=float, default=0.0)
    p_render.add_argument("--depth", default=None)
    p_render.add_argument("--class", dest="class_path", default=None)
    p_render.set_defaults(fn=_cmd_render)

    p_report = sub.add_parser("report", help="print the outcome table for a results CSV")
    p_report.add_argument("--in", dest="infile", required=True)
    p_report.set_defaults(fn=_cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except ScenarioIoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
