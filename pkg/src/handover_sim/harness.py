"""Batch trial execution, outcome classification and tabular reporting.

A trial log plus the scene ground truth fully determine the reported outcome,
so stored logs re-classify reproducibly. The human experiment observer is
simulated as a deterministic proximity rule: if the jaw volume ever comes
within the observer margin of hand/body geometry outside the grasping state,
the trial counts as a safety stop no matter how it ended.

Per-trial seeds are ``seed + trial_index`` so any single trial replays in
isolation. Trials are independent; an optional thread pool (capped by the
HANDOVER_SIM_THREADS environment variable) runs them concurrently with
results always written in trial order.
"""

from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from handover_sim.geometry import direction_of_yaw
from handover_sim.pipeline import run as run_trial_pipeline
from handover_sim.scenario import IoError as ScenarioIoError
from handover_sim.scenario import Scenario, scenario_to_dict
from handover_sim.scene import SceneModel, min_human_distance, scene_at

OUTCOME_SUCCESS = "success"
OUTCOME_SAFETY_STOP = "safety_stop"
OUTCOME_GRASP_FAIL = "grasp_fail"
OUTCOME_DETECTION_FAIL = "detection_fail"

OUTCOME_ORDER = (OUTCOME_SUCCESS, OUTCOME_SAFETY_STOP, OUTCOME_GRASP_FAIL, OUTCOME_DETECTION_FAIL)

CSV_HEADER = ["scenario", "trial", "outcome", "initiation_time_s", "total_time_s", "abort_count"]


class IncompleteLogError(Exception):
    """Trial log ended without a terminal record."""


@dataclass(frozen=True)
class TrialResult:
    scenario: str
    trial_index: int
    outcome: str
    initiation_time_s: float | None
    total_time_s: float
    abort_count: int


def classify_outcome(events: list[dict], scene: SceneModel, observer_margin: float = 0.02) -> str:
    """Map a finished trial log to one of the four outcome categories."""
    done = next((r for r in events if r.get("type") == "done"), None)
    if done is None:
        raise IncompleteLogError("log holds no terminal record")

    if done["outcome"] == "safety_violation":
        return OUTCOME_SAFETY_STOP
    for rec in events:
        if rec.get("type") == "gripper_close" and rec["outcome"] == "human_pinch":
            return OUTCOME_SAFETY_STOP

    world_from_base = scene.robot_base
    for rec in events:
        if rec.get("type") != "tick" or rec["state"] in ("grasping", "done"):
            continue
        snap = scene_at(scene, rec["t"])
        ee = np.array(rec["ee"])
        jaw_dir = direction_of_yaw(rec["yaw"], np.array(rec["axis"]))
        half = rec["gripper_width"] / 2.0
        a = world_from_base.transform(ee - half * jaw_dir)
        b = world_from_base.transform(ee + half * jaw_dir)
        if min_human_distance(snap, a, b) < observer_margin:
            return OUTCOME_SAFETY_STOP

    if done["outcome"] == "success":
        return OUTCOME_SUCCESS
    if done["outcome"] == "detection_fail":
        return OUTCOME_DETECTION_FAIL
    return OUTCOME_GRASP_FAIL


def run_single_trial(scenario: Scenario, trial_index: int, seed: int):
    """One seeded trial: returns (events, summary, TrialResult)."""
    events, summary = run_trial_pipeline(scenario, seed=seed + trial_index)
    outcome = classify_outcome(events, scenario.scene, scenario.observer_margin)
    result = TrialResult(
        scenario=scenario.name,
        trial_index=trial_index,
        outcome=outcome,
        initiation_time_s=summary["initiation_time_s"],
        total_time_s=summary["total_time_s"],
        abort_count=summary["abort_count"],
    )
    return events, summary, result


def _max_workers() -> int:
    raw = os.environ.get("HANDOVER_SIM_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def run_batch(
    scenario: Scenario,
    seed: int,
    out_dir=None,
    trials: int | None = None,
    write_logs: bool = True,
) -> list[TrialResult]:
    """Run every trial of a scenario; optionally write results.csv and
    per-trial JSONL logs under ``out_dir``."""
    n = trials if trials is not None else scenario.trials
    workers = _max_workers()

    def one(i: int):
        return run_single_trial(scenario, i, seed)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(one, range(n)))
    else:
        outputs = [one(i) for i in range(n)]

    results = [r for _, _, r in outputs]
    if out_dir is not None:
        out_dir = Path(out_dir)
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            write_results_csv(out_dir / "results.csv", results)
            if write_logs:
                header = {
                    "type": "trial_header",
                    "scenario": scenario_to_dict(scenario),
                    "base_seed": seed,
                }
                for i, (events, _, _) in enumerate(outputs):
                    log_path = out_dir / f"{scenario.name}_trial{i:04d}.jsonl"
                    with open(log_path, "w") as f:
                        f.write(_dumps(header | {"trial": i, "seed": seed + i}) + "\n")
                        for rec in events:
                            f.write(_dumps(rec) + "\n")
        except OSError as exc:
            raise ScenarioIoError(f"cannot write outputs under {out_dir}: {exc}") from exc
    return results


def _dumps(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True, separators=(",", ":"))


def write_results_csv(path, results: list[TrialResult]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in results:
        writer.writerow(
            [
                r.scenario,
                r.trial_index,
                r.outcome,
                "" if r.initiation_time_s is None else repr(r.initiation_time_s),
                repr(r.total_time_s),
                r.abort_count,
            ]
        )
    Path(path).write_bytes(buf.getvalue().encode("utf-8"))


def read_results_csv(path) -> list[TrialResult]:
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        for row in reader:
            rows.append(
                TrialResult(
                    scenario=row["scenario"],
                    trial_index=int(row["trial"]),
                    outcome=row["outcome"],
                    initiation_time_s=(
                        float(row["initiation_time_s"]) if row["initiation_time_s"] else None
                    ),
                    total_time_s=float(row["total_time_s"]),
                    abort_count=int(row["abort_count"]),
                )
            )
    return rows


def summarize(results: list[TrialResult]) -> list[dict]:
    """Per-scenario outcome percentages (one decimal) and mean initiation."""
    by_scenario: dict[str, list[TrialResult]] = {}
    for r in results:
        by_scenario.setdefault(r.scenario, []).append(r)
    rows = []
    for name in sorted(by_scenario):
        group = by_scenario[name]
        n = len(group)
        counts = {o: sum(1 for r in group if r.outcome == o) for o in OUTCOME_ORDER}
        inits = [r.initiation_time_s for r in group if r.initiation_time_s is not None]
        rows.append(
            {
                "scenario": name,
                "trials": n,
                **{f"{o}_pct": round(100.0 * counts[o] / n, 1) for o in OUTCOME_ORDER},
                **{f"{o}_count": counts[o] for o in OUTCOME_ORDER},
                "mean_initiation_s": (sum(inits) / len(inits)) if inits else None,
            }
        )
    return rows


def format_report(rows: list[dict]) -> str:
    """Outcome table, one scenario per column block, percentages per category."""
    lines = []
    header = f"{'':16}" + "".join(f"{row['scenario'][:14]:>16}" for row in rows)
    lines.append(header)
    pretty = {
        OUTCOME_SUCCESS: "Successful",
        OUTCOME_SAFETY_STOP: "Safety Stop",
        OUTCOME_GRASP_FAIL: "Grasping Fail",
        OUTCOME_DETECTION_FAIL: "Detection Fail",
    }
    for outcome in OUTCOME_ORDER:
        lines.append(
            f"{pretty[outcome]:16}"
            + "".join(f"{row[f'{outcome}_pct']:>16.1f}" for row in rows)
        )
    lines.append(
        f"{'Trials':16}" + "".join(f"{row['trials']:>16d}" for row in rows)
    )
    inits = [
        "-" if row["mean_initiation_s"] is None else f"{row['mean_initiation_s']:.5f}"
        for row in rows
    ]
    lines.append(f"{'Mean init (s)':16}" + "".join(f"{v:>16}" for v in inits))
    return "\n".join(lines)
