"""Command-line surface: plan, benchmark, validate, gen-scenario.

All outputs are JSON (reports) or CSV (per-trial benchmark rows); the --svg
flag renders a debug picture of the distance field, candidate paths and the
final base trajectory. Exit codes: 0 success, 1 validation failure, 2 no
path, 3 all candidates failed, 4 malformed input.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from xml.etree import ElementTree as ET

import numpy as np

from . import objective as ob
from . import pipeline as pl
from . import robot as rb
from . import world as wd

log = logging.getLogger("wbp.cli")


class InputError(Exception):
    """Malformed CLI input; `where` names the flag/file/field at fault."""

    def __init__(self, where: str, msg: str):
        super().__init__(msg)
        self.where = where


# ---------- parsing helpers ----------

def _floats(text: str, n: int, where: str) -> np.ndarray:
    try:
        vals = np.array([float(v) for v in text.split(",")])
    except ValueError as e:
        raise InputError(where, f"expected comma-separated floats: {e}")
    if len(vals) != n:
        raise InputError(where, f"expected {n} values, got {len(vals)}")
    return vals


def _load_json(path: str, where: str) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise InputError(where, f"file not found: {path}")
    except json.JSONDecodeError as e:
        raise InputError(where, f"{path}: line {e.lineno} col {e.colno}: {e.msg}")


def _load_robot(path) -> rb.RobotModel:
    if path is None:
        return rb.default_robot()
    try:
        return rb.RobotModel.from_json_dict(_load_json(path, "--robot"))
    except (KeyError, TypeError, ValueError) as e:
        raise InputError("--robot", f"{path}: {e}")


def _load_config(path) -> ob.OptimizerConfig:
    if path is None:
        return ob.OptimizerConfig()
    try:
        return ob.OptimizerConfig.from_json_dict(_load_json(path, "--config"))
    except (KeyError, TypeError, ValueError) as e:
        raise InputError("--config", f"{path}: {e}")


def _scenario_from_args(args) -> wd.Scenario:
    if args.scenario is not None:
        try:
            return wd.Scenario.from_json_dict(_load_json(args.scenario, "--scenario"))
        except (KeyError, TypeError, ValueError) as e:
            raise InputError("--scenario", f"{args.scenario}: {e}")
    return wd.generate_scenario(wd.ScenarioParams(), int(args.random))


def _parse_goal(text: str) -> ob.GoalSpec:
    v = _floats(text, 6, "--goal")
    return ob.GoalSpec.from_xyz_rpy(v[:3], v[3:])


def _parse_start(text: str, robot: rb.RobotModel) -> rb.WholeBodyState:
    v = _floats(text, 3 + robot.n_joints, "--start")
    q = v[3:]
    if np.any(np.abs(q) >= robot.limits.q_max):
        raise InputError("--start", "joint values outside position limits")
    return rb.WholeBodyState(x=v[0], y=v[1], theta=v[2], q=q)


def _dump(payload: dict, out_path) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out_path:
        with open(out_path, "w") as f:
            f.write(text + "\n")
    else:
        sys.stdout.write(text + "\n")


# ---------- SVG rendering ----------

def _hex(rgb) -> str:
    return "#%02x%02x%02x" % tuple(int(np.clip(c, 0, 255)) for c in rgb)


def _cell_color(d: float) -> str:
    if d < 0.0:
        return "#46424f"
    t = min(d / 2.0, 1.0)
    lo, hi = np.array([198.0, 219.0, 239.0]), np.array([255.0, 255.0, 255.0])
    return _hex(lo + t * (hi - lo))


def render_svg(grid: wd.GridEsdf, scenario: wd.Scenario,
               report=None, start=None, goal_xy=None) -> str:
    """Debug picture: ESDF heatmap, obstacle footprints, candidate base
    paths, and the winning trajectory's dense base positions."""
    xmin, ymin, xmax, ymax = scenario.room
    pad = 0.5
    scale = 900.0 / max(xmax - xmin + 2 * pad, ymax - ymin + 2 * pad)

    def sx(x):
        return (x - xmin + pad) * scale

    def sy(y):
        return (ymax - y + pad) * scale

    W = (xmax - xmin + 2 * pad) * scale
    H = (ymax - ymin + 2 * pad) * scale
    root = ET.Element("svg", xmlns="http://www.w3.org/2000/svg",
                      width=f"{W:.0f}", height=f"{H:.0f}",
                      viewBox=f"0 0 {W:.1f} {H:.1f}")
    ET.SubElement(root, "rect", x="0", y="0", width=f"{W:.1f}", height=f"{H:.1f}",
                  fill="#ffffff")

    ny, nx = grid.dist.shape
    k = max(1, int(np.ceil(np.sqrt(nx * ny / 4000))))
    cell = grid.resolution * k
    for iy in range(0, ny, k):
        for ix in range(0, nx, k):
            d = float(np.min(grid.dist[iy:iy + k, ix:ix + k]))
            x = grid.origin[0] + ix * grid.resolution
            y = grid.origin[1] + iy * grid.resolution
            ET.SubElement(root, "rect", x=f"{sx(x):.1f}", y=f"{sy(y + cell):.1f}",
                          width=f"{cell * scale:.1f}", height=f"{cell * scale:.1f}",
                          fill=_cell_color(d))

    for obs in scenario.obstacles:
        cs = wd._rect_corners(obs.center[:2], obs.half_extents[:2], obs.yaw)
        pts = " ".join(f"{sx(p[0]):.1f},{sy(p[1]):.1f}" for p in cs)
        ET.SubElement(root, "polygon", points=pts, fill="none",
                      stroke="#1f2937", **{"stroke-width": "1.5"})

    def polyline(xys, color, width, dash=None):
        pts = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in xys)
        at = {"points": pts, "fill": "none", "stroke": color,
              "stroke-width": str(width)}
        if dash:
            at["stroke-dasharray"] = dash
        ET.SubElement(root, "polyline", **at)

    if report is not None:
        for c in report.candidates:
            if c.base_path is not None:
                polyline(c.base_path, "#d97706", 2, dash="6,4")
        if report.best is not None:
            tr_ = report.best
            co = tr_.coeffs
            _, xs, ys = rb.flat_positions_dense(co[:, :, 0], co[:, :, 1],
                                                tr_.durations, samples_per_seg=24,
                                                n_gap=4, x0=tr_.x0, y0=tr_.y0)
            polyline(np.column_stack([xs, ys]), "#15803d", 3)

    if start is not None:
        ET.SubElement(root, "circle", cx=f"{sx(start[0]):.1f}",
                      cy=f"{sy(start[1]):.1f}", r="6", fill="#15803d")
    if goal_xy is not None:
        ET.SubElement(root, "circle", cx=f"{sx(goal_xy[0]):.1f}",
                      cy=f"{sy(goal_xy[1]):.1f}", r="6", fill="#7c3aed")
    return ET.tostring(root, encoding="unicode")


# ---------- plan ----------

def cmd_plan(args) -> int:
    robot = _load_robot(args.robot)
    scenario = _scenario_from_args(args)
    goal = _parse_goal(args.goal)
    start = _parse_start(args.start, robot)
    config = _load_config(args.config)

    grid = wd.build_grid_esdf(scenario, pl.GRID_RESOLUTION,
                              inflation=robot.collision.cylinder_radius,
                              z_band=(0.0, robot.collision.cylinder_height))
    st_m = wd.state_margins(scenario, grid, robot, start)
    if min(st_m) < 0.0:
        raise InputError("--start", "start state is in collision")

    req = pl.PlanRequest(start=start, goal=goal, scenario=scenario, robot=robot,
                         config=config, seed=args.seed, k_max=args.k_max,
                         jobs=args.jobs, budget_ms=args.budget_ms)
    report = pl.plan(req)
    _dump(report.to_json_dict(include_timing=not args.no_timing), args.out)
    if args.svg:
        svg = render_svg(grid, scenario, report, start=(start.x, start.y),
                         goal_xy=goal.position[:2])
        with open(args.svg, "w") as f:
            f.write(svg)
    return report.exit_code


# ---------- benchmark ----------

@dataclass
class BenchmarkSpec:
    """Batch evaluation: trials per base-distance interval on fresh scenarios."""

    intervals: list            # [(d_min, d_max)] in meters
    trials: int = 50
    seed: int = 0
    budget_ms: float | None = 5000.0
    k_max: int = 5
    plan_jobs: int = 1         # candidate-level workers inside one trial
    scenario: wd.ScenarioParams = field(default_factory=wd.ScenarioParams)
    config: ob.OptimizerConfig = field(default_factory=ob.OptimizerConfig)

    @staticmethod
    def from_json_dict(d: dict) -> "BenchmarkSpec":
        try:
            spec = BenchmarkSpec(
                intervals=[(float(a), float(b)) for a, b in d["intervals"]],
                trials=int(d.get("trials", 50)),
                seed=int(d.get("seed", 0)),
                budget_ms=None if d.get("budget_ms") is None
                else float(d.get("budget_ms", 5000.0)),
                k_max=int(d.get("k_max", 5)),
                plan_jobs=int(d.get("plan_jobs", 1)))
        except (KeyError, TypeError, ValueError) as e:
            raise InputError("benchmark spec", str(e))
        if "scenario" in d:
            try:
                spec.scenario = wd.ScenarioParams(**d["scenario"])
            except TypeError as e:
                raise InputError("benchmark spec: scenario", str(e))
        if "config" in d:
            spec.config = ob.OptimizerConfig.from_json_dict(d["config"])
        if spec.trials < 1:
            raise InputError("benchmark spec: trials", "must be >= 1")
        for a, b in spec.intervals:
            if not a < b:
                raise InputError("benchmark spec: intervals",
                                 f"need d_min < d_max, got ({a}, {b})")
        return spec


@dataclass
class BenchmarkResult:
    """Per-interval aggregates in the S.R. / T.P. / T.D. convention."""

    intervals: list = field(default_factory=list)
    total_wall_s: float = 0.0

    def to_json_dict(self) -> dict:
        return {"intervals": self.intervals,
                "total_wall_s": round(self.total_wall_s, 3)}


_TRIAL_FIELDS = ["interval", "trial", "scenario_seed", "distance", "status",
                 "reason", "cost", "t_f", "n_candidates", "best_index"]


def _run_trial(spec: BenchmarkSpec, robot: rb.RobotModel, i: int, t: int) -> dict:
    scen_seed = (spec.seed * 1000003 + i * 10007 + t * 101) & 0x7FFFFFFF
    scenario = wd.generate_scenario(spec.scenario, scen_seed)
    grid = wd.build_grid_esdf(scenario, pl.GRID_RESOLUTION,
                              inflation=robot.collision.cylinder_radius,
                              z_band=(0.0, robot.collision.cylinder_height))
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, i, t)))
    d_min, d_max = spec.intervals[i]
    row = {"interval": i, "trial": t, "scenario_seed": scen_seed,
           "distance": "", "status": "", "reason": "", "cost": "",
           "t_f": "", "n_candidates": 0, "best_index": "", "wall_ms": 0.0}
    t0 = time.perf_counter()
    try:
        start = wd.sample_free_state(scenario, robot, rng, g=grid)
        goal_state = None
        for _ in range(500):
            cand = wd.sample_free_state(scenario, robot, rng, g=grid)
            dist = float(np.hypot(cand.x - start.x, cand.y - start.y))
            if d_min <= dist <= d_max:
                goal_state = cand
                break
        if goal_state is None:
            row.update(status="sampling_failed", reason="no goal in interval")
            return row
    except RuntimeError as e:
        row.update(status="sampling_failed", reason=str(e))
        return row
    R, p = rb.forward_kinematics(robot, (goal_state.x, goal_state.y,
                                         goal_state.theta), goal_state.q)
    goal = ob.GoalSpec(position=p, rotation=R)
    req = pl.PlanRequest(start=start, goal=goal, scenario=scenario, robot=robot,
                         config=spec.config, seed=scen_seed, k_max=spec.k_max,
                         jobs=spec.plan_jobs, budget_ms=spec.budget_ms)
    rep = pl.plan(req)
    row.update(distance=f"{dist:.6f}", status=rep.status, reason=rep.reason,
               n_candidates=len(rep.candidates),
               wall_ms=(time.perf_counter() - t0) * 1e3)
    if rep.status == "success":
        best = rep.candidates[rep.best_index]
        row.update(cost=f"{best.cost:.9g}", t_f=f"{rep.total_duration:.9g}",
                   best_index=rep.best_index)
    return row


def run_benchmark(spec: BenchmarkSpec, robot=None, jobs: int = 1):
    """All trials of a benchmark spec; returns (BenchmarkResult, trial rows).

    Rows are deterministic per spec seed for any `jobs` as long as the trial
    budget never binds; wall_ms is carried separately and must stay out of
    byte-compared outputs.
    """
    robot = robot if robot is not None else rb.default_robot()
    t0 = time.perf_counter()
    tasks = [(i, t) for i in range(len(spec.intervals))
             for t in range(spec.trials)]
    if jobs <= 1:
        rows = [_run_trial(spec, robot, i, t) for i, t in tasks]
    else:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=int(jobs)) as ex:
            rows = list(ex.map(lambda it: _run_trial(spec, robot, *it), tasks))
    result = BenchmarkResult(total_wall_s=time.perf_counter() - t0)
    for i, (d_min, d_max) in enumerate(spec.intervals):
        sub = [r for r in rows if r["interval"] == i]
        ok = [r for r in sub if r["status"] == "success"]
        failures = {}
        for r in sub:
            if r["status"] != "success":
                key = r["status"] + (":" + r["reason"] if r["reason"] else "")
                failures[key] = failures.get(key, 0) + 1
        result.intervals.append({
            "d_min": d_min, "d_max": d_max,
            "trials": len(sub), "successes": len(ok),
            "success_rate_pct": round(100.0 * len(ok) / max(len(sub), 1), 2),
            "mean_tp_ms": None if not ok else
            round(float(np.mean([r["wall_ms"] for r in ok])), 2),
            "mean_td_s": None if not ok else
            round(float(np.mean([float(r["t_f"]) for r in ok])), 4),
            "failures": failures,
        })
    return result, rows


def _write_csv(rows, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=_TRIAL_FIELDS, extrasaction="ignore",
                           lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def cmd_benchmark(args) -> int:
    spec = BenchmarkSpec.from_json_dict(_load_json(args.spec, "spec file"))
    if args.seed is not None:
        spec.seed = args.seed
    if args.budget_ms is not None:
        spec.budget_ms = args.budget_ms
    result, rows = run_benchmark(spec, jobs=args.jobs or 1)
    _dump(result.to_json_dict(), args.out)
    if args.csv:
        _write_csv(rows, args.csv)
    return 0


# ---------- validate ----------

def cmd_validate(args) -> int:
    from . import traj as tr
    try:
        traj = tr.WholeBodyTrajectory.from_json_dict(
            _load_json(args.trajectory, "trajectory file"))
    except (KeyError, TypeError, ValueError) as e:
        raise InputError("trajectory file", str(e))
    if args.scenario is None:
        raise InputError("--scenario", "required for validation")
    try:
        scenario = wd.Scenario.from_json_dict(_load_json(args.scenario, "--scenario"))
    except (KeyError, TypeError, ValueError) as e:
        raise InputError("--scenario", f"{args.scenario}: {e}")
    robot = _load_robot(args.robot)
    goal = _parse_goal(args.goal) if args.goal else None
    report = pl.validate_trajectory(traj, scenario, robot, goal=goal,
                                    tol=args.tol)
    _dump(report.to_json_dict(), args.out)
    return 0 if report.ok else 1


# ---------- gen-scenario ----------

def cmd_gen_scenario(args) -> int:
    params = wd.ScenarioParams()
    if args.room:
        v = _floats(args.room, 2, "--room")
        if v[0] <= 0 or v[1] <= 0:
            raise InputError("--room", "room sides must be positive")
        params.room_w, params.room_h = float(v[0]), float(v[1])
    if args.desks is not None:
        params.n_desk_grids = args.desks
    if args.cuboids is not None:
        params.n_cuboids = args.cuboids
    scenario = wd.generate_scenario(params, args.seed)
    _dump(scenario.to_json_dict(), args.out)
    if args.svg:
        robot = rb.default_robot()
        grid = wd.build_grid_esdf(scenario, pl.GRID_RESOLUTION,
                                  inflation=robot.collision.cylinder_radius,
                                  z_band=(0.0, robot.collision.cylinder_height))
        with open(args.svg, "w") as f:
            f.write(render_svg(grid, scenario))
    return 0


# ---------- entry point ----------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="wbp",
                                 description="whole-body planner for a "
                                 "differential-drive mobile manipulator")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="plan one trajectory")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--scenario", help="scenario JSON file")
    src.add_argument("--random", type=int, metavar="SEED",
                     help="generate a random desk-scale scenario")
    p.add_argument("--robot", help="robot JSON file (default: built-in model)")
    p.add_argument("--start", required=True,
                   help="x,y,theta,q1..qN start state")
    p.add_argument("--goal", required=True, help="x,y,z,roll,pitch,yaw pose")
    p.add_argument("--config", help="optimizer config JSON file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k-max", type=int, default=5, dest="k_max")
    p.add_argument("--jobs", type=int)
    p.add_argument("--budget-ms", type=float, dest="budget_ms")
    p.add_argument("--out", help="write the report here instead of stdout")
    p.add_argument("--svg", help="write a debug SVG here")
    p.add_argument("--no-timing", action="store_true",
                   help="omit wall-clock fields for byte-comparable output")
    p.set_defaults(fn=cmd_plan)

    p = sub.add_parser("benchmark", help="run a batch benchmark spec")
    p.add_argument("spec", help="benchmark spec JSON file")
    p.add_argument("--seed", type=int, help="override the spec seed")
    p.add_argument("--budget-ms", type=float, dest="budget_ms",
                   help="override the per-trial budget")
    p.add_argument("--jobs", type=int, help="trial-level workers")
    p.add_argument("--out", help="write aggregate JSON here")
    p.add_argument("--csv", help="write per-trial rows here")
    p.set_defaults(fn=cmd_benchmark)

    p = sub.add_parser("validate", help="validate an exported trajectory")
    p.add_argument("trajectory", help="trajectory JSON file")
    p.add_argument("--scenario", help="scenario JSON file", required=False)
    p.add_argument("--robot", help="robot JSON file")
    p.add_argument("--goal", help="x,y,z,roll,pitch,yaw pose for end checks")
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_validate)

    p = sub.add_parser("gen-scenario", help="generate a random scenario")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--room", help="W,H meters (default 20,10)")
    p.add_argument("--desks", type=int, help="desk grid count")
    p.add_argument("--cuboids", type=int, help="cuboid count")
    p.add_argument("--out")
    p.add_argument("--svg")
    p.set_defaults(fn=cmd_gen_scenario)
    return ap


def main(argv=None) -> int:
    level = os.environ.get("WBP_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(name)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except InputError as e:
        print(f"input error ({e.where}): {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
