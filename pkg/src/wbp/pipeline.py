"""End-to-end planner: candidate base paths, whole-body initialization,
parallel trajectory optimization, independent validation and selection.

The pipeline fixes the goal base pose with a whole-body IK solve, searches
topologically distinct base paths to it, initializes one trajectory per path
and optimizes the candidates concurrently. The best validated candidate by
final objective value wins; ties break toward the lower candidate index, so
the report is identical for any worker count.
"""
from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import objective as ob
from . import optim as op
from . import robot as rb
from . import topo as tp
from . import traj as tr
from . import world as wd

log = logging.getLogger("wbp.pipeline")

BASE_SAMPLE_INTERVAL = 0.5   # m between initialization states on a path
SEGMENT_TARGET_LENGTH = 1.0  # m of path per trajectory segment
MIN_SEGMENTS = 3
MAX_SEGMENTS = 30
REFERENCE_SPEED_FRAC = 0.5   # of v_max, for initial durations
MIN_SEGMENT_TIME = 1.0       # s floor per segment
DQ_STEP = 0.7                # rad per-joint bound between consecutive init states
INIT_MARGIN = 0.02           # m clearance required of initialization states
IK_POS_TOL = 0.1             # m, coarse goal tolerance for initialization
IK_ROT_TOL = 0.3             # two-column rotation residual norm
GRID_RESOLUTION = 0.1
TOPO_SAMPLES = 250           # roadmap size used by plan(); passage seeding covers throats

# rng stream tags; candidate indices occupy the small integers
_GOAL_STREAM = 999983
_TOPO_STREAM = 999979

FAMILY_KEYS = ("drive", "base_acc", "joint_pos", "joint_vel", "joint_acc",
               "collision")


# ---------- validation ----------

@dataclass
class ValidationReport:
    """Worst violation per constraint family, 0.0 when satisfied."""

    families: dict
    ok: bool
    ee_pos_err: Optional[float] = None
    ee_rot_err: Optional[float] = None
    detail: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "ok": bool(self.ok),
            "families": {k: float(self.families[k]) for k in FAMILY_KEYS},
            "ee_pos_err": None if self.ee_pos_err is None else float(self.ee_pos_err),
            "ee_rot_err": None if self.ee_rot_err is None else float(self.ee_rot_err),
            "detail": {k: float(v) for k, v in sorted(self.detail.items())},
        }

    @staticmethod
    def from_json_dict(d: dict) -> "ValidationReport":
        return ValidationReport(
            families=dict(d["families"]), ok=bool(d["ok"]),
            ee_pos_err=d.get("ee_pos_err"), ee_rot_err=d.get("ee_rot_err"),
            detail=dict(d.get("detail", {})))


def _pair_clearances(robot: rb.RobotModel, kin: rb.BatchKinematics) -> np.ndarray:
    """Clearance of every self-collision pair at each batch sample, (P, n_pairs)."""
    col = robot.collision
    P = kin.sphere_centers.shape[0]
    if not col.self_pairs:
        return np.zeros((P, 0))
    centers = kin.sphere_centers
    radii = np.array([sp.radius for sp in col.spheres])
    half_h = col.cylinder_height / 2.0
    out = np.empty((P, len(col.self_pairs)))
    for k, (i, j) in enumerate(col.self_pairs):
        if i == 0 or j == 0:
            m = j - 1 if i == 0 else i - 1
            c = centers[:, m]
            az = kin.cyl_point[:, 2] - half_h
            dz = np.clip(c[:, 2] - az, 0.0, col.cylinder_height)
            closest = kin.cyl_point.copy()
            closest[:, 2] = az + dz
            d = np.linalg.norm(c - closest, axis=1)
            out[:, k] = d - col.cylinder_radius - radii[m]
        else:
            d = np.linalg.norm(centers[:, i - 1] - centers[:, j - 1], axis=1)
            out[:, k] = d - radii[i - 1] - radii[j - 1]
    return out


def validate_trajectory(traj: tr.WholeBodyTrajectory, scenario: wd.Scenario,
                        robot: rb.RobotModel, grid: Optional[wd.GridEsdf] = None,
                        goal: Optional[ob.GoalSpec] = None, tol: float = 1e-3,
                        k_dense: Optional[int] = None,
                        cfg: Optional[ob.OptimizerConfig] = None,
                        ee_pos_tol: float = 1e-3,
                        ee_rot_tol: float = 1e-2) -> ValidationReport:
    """Independent dense-sampling checker for a whole-body trajectory.

    Base positions come from a fresh high-order quadrature (not the optimizer's
    sample set); every constraint family is evaluated directly at k_dense
    points per segment, ten times the optimizer default. Family violations
    are normalized (dynamic limits relative to the limit, collision in meters
    of missing clearance) and clamped at zero. With a goal, the end-effector
    pose error must additionally stay within ee_pos_tol / ee_rot_tol.
    """
    cfg = cfg if cfg is not None else ob.OptimizerConfig()
    if k_dense is None:
        k_dense = 10 * cfg.k_samples
    col = robot.collision
    if grid is None:
        grid = wd.build_grid_esdf(scenario, GRID_RESOLUTION,
                                  inflation=col.cylinder_radius,
                                  z_band=(0.0, col.cylinder_height))
    lim = robot.limits
    c = traj.coeffs
    ts, xs, ys = rb.flat_positions_dense(c[:, :, 0], c[:, :, 1], traj.durations,
                                         samples_per_seg=k_dense, n_gap=10,
                                         x0=traj.x0, y0=traj.y0)
    vals = traj.eval_batch(ts, 0)
    vels = traj.eval_batch(ts, 1)
    accs = traj.eval_batch(ts, 2)

    drive = np.max(np.abs(vels[:, 0]) / lim.v_max +
                   np.abs(vels[:, 1]) / lim.omega_max) - 1.0
    base_acc = max(np.max(np.abs(accs[:, 0])) / lim.a_max,
                   np.max(np.abs(accs[:, 1])) / lim.beta_max) - 1.0
    q = vals[:, 2:]
    joint_pos = np.max(np.abs(q) / lim.q_max) - 1.0
    joint_vel = np.max(np.abs(vels[:, 2:]) / lim.dq_max) - 1.0
    joint_acc = np.max(np.abs(accs[:, 2:]) / lim.ddq_max) - 1.0

    d, _, oob = wd.esdf_query_batch(grid, np.column_stack([xs, ys]))
    d = np.where(oob, -1.0, d)
    base_col = float(np.max(col.r_thr[0] - d))
    kin = rb.BatchKinematics(robot, xs, ys, vals[:, 1], q)
    if len(col.spheres):
        centers = kin.sphere_centers.reshape(-1, 3)
        ds = scenario.sdf().query_batch(centers)[0].reshape(len(ts), -1)
        arm_col = float(np.max(np.asarray(col.r_thr[1:]) - ds))
    else:
        arm_col = -np.inf
    pc = _pair_clearances(robot, kin)
    self_col = float(np.max(-pc)) if pc.size else -np.inf
    collision = max(base_col, arm_col, self_col)

    raw = {"drive": drive, "base_acc": base_acc, "joint_pos": joint_pos,
           "joint_vel": joint_vel, "joint_acc": joint_acc,
           "collision": collision}
    families = {k: max(0.0, float(v)) for k, v in raw.items()}
    ok = all(v < tol for v in families.values())

    ee_pos = ee_rot = None
    if goal is not None:
        ekin = rb.BatchKinematics(robot, [xs[-1]], [ys[-1]], [vals[-1, 1]],
                                  q[-1][None, :])
        r = _goal_residual9(ekin, goal)
        ee_pos = float(np.linalg.norm(r[:3]))
        ee_rot = float(np.linalg.norm(r[3:]))
        ok = ok and ee_pos < ee_pos_tol and ee_rot < ee_rot_tol

    detail = {"collision_base": base_col, "collision_arm": arm_col,
              "collision_self": self_col}
    return ValidationReport(families=families, ok=ok, ee_pos_err=ee_pos,
                            ee_rot_err=ee_rot, detail=detail)


# ---------- goal IK ----------

def _goal_residual9(kin: rb.BatchKinematics, goal: ob.GoalSpec) -> np.ndarray:
    p = kin.ee_t[0]
    R = kin.ee_R[0]
    G = goal.rotation
    return np.concatenate([p - goal.position, R[:, 0] - G[:, 0], R[:, 1] - G[:, 1]])


def _pose_errors(robot, base, q, goal) -> tuple[float, float]:
    kin = rb.BatchKinematics(robot, [base[0]], [base[1]], [base[2]],
                             np.asarray(q, dtype=float)[None, :])
    r = _goal_residual9(kin, goal)
    return float(np.linalg.norm(r[:3])), float(np.linalg.norm(r[3:]))


_EZ = np.array([0.0, 0.0, 1.0])


def _ik_terms(robot, x, y, th, q, goal, reg):
    """Shared squared-residual IK cost; returns (f, dtheta, dq, r)."""
    kin = rb.BatchKinematics(robot, [x], [y], [th], q[None, :])
    r = _goal_residual9(kin, goal)
    p = kin.ee_t[0]
    c0 = kin.ee_R[0][:, 0]
    c1 = kin.ee_R[0][:, 1]
    dth = 2.0 * (r[:3] @ np.cross(_EZ, p - kin.base_origin[0]) +
                 r[3:6] @ np.cross(_EZ, c0) + r[6:9] @ np.cross(_EZ, c1))
    o = kin.joint_origin[0]
    a = kin.joint_axis[0]
    dq = np.empty(len(q))
    for i in range(len(q)):
        dq[i] = 2.0 * (r[:3] @ np.cross(a[i], p - o[i]) +
                       r[3:6] @ np.cross(a[i], c0) + r[6:9] @ np.cross(a[i], c1))
    f = float(r @ r + reg * (q @ q))
    dq += 2.0 * reg * q
    return f, dth, dq, r


def _ik_cost_free(robot, goal, u, q_max, reg=1e-3):
    q = tr.joint_unsquash(u[3:], q_max)
    f, dth, dq, r = _ik_terms(robot, u[0], u[1], u[2], q, goal, reg)
    g = np.empty_like(u)
    g[0], g[1] = 2.0 * r[0], 2.0 * r[1]
    g[2] = dth
    g[3:] = dq * tr.joint_unsquash_deriv(u[3:], q_max)
    return f, g


def _ik_cost_fixed(robot, base, goal, v, q_max, reg=1e-3):
    q = tr.joint_unsquash(v, q_max)
    f, _, dq, _ = _ik_terms(robot, base[0], base[1], base[2], q, goal, reg)
    return f, dq * tr.joint_unsquash_deriv(v, q_max)


def _horizontal_reach(robot: rb.RobotModel) -> float:
    r = float(np.linalg.norm(robot.mount_xyz[:2]))
    for j in robot.joints[1:]:
        r += float(np.linalg.norm(j.origin_xyz))
    return r + float(np.linalg.norm(robot.ee_xyz)) + 0.15


def _wrap_angle(a: float) -> float:
    return float(np.arctan2(np.sin(a), np.cos(a)))


def _state_clear(scenario, grid, robot, base, q, margin) -> bool:
    st = rb.WholeBodyState(x=base[0], y=base[1], theta=base[2],
                           q=np.asarray(q, dtype=float))
    b, a, s = wd.state_margins(scenario, grid, robot, st)
    return min(b, a, s) >= margin


def goal_base_state(robot: rb.RobotModel, scenario: wd.Scenario,
                    grid: wd.GridEsdf, goal: ob.GoalSpec, rng,
                    start_q: Optional[np.ndarray] = None, n_restarts: int = 40,
                    margin: float = INIT_MARGIN) -> Optional[rb.WholeBodyState]:
    """Collision-free whole-body state whose end effector reaches the goal.

    Whole-body IK with the base pose free, by L-BFGS from random restarts
    around the goal; the first coarse-tolerance, clear solution wins. The base
    position of this state becomes the goal of the topological path search.
    Deterministic given the rng state. None when every restart fails.
    """
    q_max = robot.limits.q_max
    reach = _horizontal_reach(robot)
    gx, gy = float(goal.position[0]), float(goal.position[1])
    fallback = None
    for k in range(n_restarts):
        ang = rng.uniform(-np.pi, np.pi)
        rad = rng.uniform(0.2, max(0.35, 0.95 * reach))
        bx, by = gx - rad * np.cos(ang), gy - rad * np.sin(ang)
        th0 = ang + rng.uniform(-0.6, 0.6)
        if k == 0 and start_q is not None:
            q0 = np.asarray(start_q, dtype=float)
        else:
            q0 = rng.uniform(-0.8, 0.8) * q_max
        u0 = np.concatenate([[bx, by, th0],
                             tr.joint_squash(np.clip(q0, -0.95 * q_max, 0.95 * q_max), q_max)])
        res = op.lbfgs_minimize(lambda u: _ik_cost_free(robot, goal, u, q_max),
                                u0, g_tol=1e-9, max_iters=200, memory=10)
        x, y, th = float(res.x[0]), float(res.x[1]), float(res.x[2])
        q = tr.joint_unsquash(res.x[3:], q_max)
        pe, re_ = _pose_errors(robot, (x, y, th), q, goal)
        if pe > IK_POS_TOL or re_ > IK_ROT_TOL:
            continue
        st = rb.WholeBodyState(x=x, y=y, theta=_wrap_angle(th), q=q)
        b, a, s = wd.state_margins(scenario, grid, robot, st)
        if min(b, a, s) < margin:
            continue
        # limit-jammed postures freeze joints under the squash map; keep
        # looking for an interior solution and fall back only at the end
        if np.max(np.abs(q) / q_max) <= 0.98:
            log.debug("goal IK accepted at restart %d: base (%.2f, %.2f, %.2f)",
                      k, x, y, st.theta)
            return st
        if fallback is None:
            fallback = st
    return fallback


# ---------- initialization ----------

def _tangent_angles(pts: np.ndarray, fracs) -> np.ndarray:
    """Polyline heading at arc-length fractions; corner stations average
    the two adjacent segment directions."""
    pts = np.asarray(pts, dtype=float)
    seg = np.diff(pts, axis=0)
    lens = np.hypot(seg[:, 0], seg[:, 1])
    good = lens > 1e-12
    dirs = np.zeros_like(seg)
    dirs[good] = seg[good] / lens[good, None]
    cl = np.concatenate([[0.0], np.cumsum(lens)])
    L = cl[-1]
    out = np.empty(len(np.atleast_1d(fracs)))
    for m, f in enumerate(np.atleast_1d(np.asarray(fracs, dtype=float))):
        arc = float(np.clip(f, 0.0, 1.0)) * L
        i = int(np.clip(np.searchsorted(cl, arc, side="right") - 1, 0, len(seg) - 1))
        while i < len(seg) - 1 and not good[i]:
            i += 1
        d = dirs[i]
        if i > 0 and good[i - 1] and abs(arc - cl[i]) < 1e-9:
            avg = dirs[i - 1] + dirs[i]
            n = np.hypot(avg[0], avg[1])
            if n > 1e-12:
                d = avg / n
        out[m] = np.arctan2(d[1], d[0])
    return out


def sample_base_states(path, interval: float = BASE_SAMPLE_INTERVAL,
                       fallback_heading: float = 0.0) -> np.ndarray:
    """Arc-length-uniform SE(2) states along a path, endpoints included.

    Rows are (x, y, theta) with theta the local tangent direction; a path
    shorter than one interval yields exactly the two endpoints. Degenerate
    zero-length paths take the fallback heading.
    """
    if interval <= 0:
        raise ValueError("interval must be positive")
    pts = np.asarray(path, dtype=float)
    L = tp.path_length(pts)
    if L <= 1e-9:
        p = pts[0]
        return np.array([[p[0], p[1], fallback_heading],
                         [p[0], p[1], fallback_heading]])
    n_seg = max(1, int(np.ceil(L / interval - 1e-9)))
    fracs = np.linspace(0.0, 1.0, n_seg + 1)
    xy = tp.interp_along(pts, fracs)
    th = _tangent_angles(pts, fracs)
    return np.column_stack([xy, th])


def _densify_states(bs: np.ndarray, k: int) -> np.ndarray:
    """Insert k-1 linearly interpolated states into every gap."""
    out = [bs[0]]
    for i in range(len(bs) - 1):
        a, b = bs[i], bs[i + 1]
        dth = _wrap_angle(b[2] - a[2])
        for j in range(1, k + 1):
            w = j / k
            out.append([a[0] + w * (b[0] - a[0]), a[1] + w * (b[1] - a[1]),
                        a[2] + w * dth])
    return np.asarray(out)


def _ik_fixed_base(robot, scenario, grid, base, goal, rng, q_seeds,
                   q_max, n_random: int = 10, margin: float = INIT_MARGIN):
    seeds = [np.asarray(s, dtype=float) for s in q_seeds]
    seeds += [rng.uniform(-0.8, 0.8) * q_max for _ in range(n_random)]
    for q0 in seeds:
        v0 = tr.joint_squash(np.clip(q0, -0.95 * q_max, 0.95 * q_max), q_max)
        res = op.lbfgs_minimize(
            lambda v: _ik_cost_fixed(robot, base, goal, v, q_max),
            v0, g_tol=1e-9, max_iters=150, memory=10)
        q = tr.joint_unsquash(res.x, q_max)
        pe, re_ = _pose_errors(robot, base, q, goal)
        if pe <= IK_POS_TOL and re_ <= IK_ROT_TOL and \
                _state_clear(scenario, grid, robot, base, q, margin):
            return q
    return None


def sample_arm_path(base_states, start_q, goal: ob.GoalSpec,
                    scenario: wd.Scenario, grid: wd.GridEsdf,
                    robot: rb.RobotModel, rng, budget: int = 80,
                    dq_step: float = DQ_STEP, margin: float = INIT_MARGIN,
                    q_goal_hint=None) -> Optional[np.ndarray]:
    """Whole-body initialization states for one base path.

    The final configuration comes from fixed-base IK (start posture first, so
    a goal reachable without moving the arm keeps it still); intermediate
    configurations interpolate linearly and are repaired by random perturbation
    where collision margins fail, backtracking to the previous state when a
    repair cannot be found. Consecutive rows differ by at most dq_step per
    joint. Returns (n, 3 + N) rows (x, y, theta, q) or None on failure.
    """
    bs = np.asarray(base_states, dtype=float)
    q0 = np.asarray(start_q, dtype=float)
    q_max = robot.limits.q_max
    base_f = (float(bs[-1, 0]), float(bs[-1, 1]), float(bs[-1, 2]))

    q_g = None
    pe, re_ = _pose_errors(robot, base_f, q0, goal)
    if pe <= IK_POS_TOL and re_ <= IK_ROT_TOL and \
            _state_clear(scenario, grid, robot, base_f, q0, margin):
        q_g = q0.copy()
    if q_g is None:
        seeds = [q0] if q_goal_hint is None else [q_goal_hint, q0]
        q_g = _ik_fixed_base(robot, scenario, grid, base_f, goal, rng, seeds,
                             q_max, margin=margin)
    if q_g is None:
        log.debug("arm path init: goal IK failed at base (%.2f, %.2f)",
                  base_f[0], base_f[1])
        return None

    span = float(np.max(np.abs(q_g - q0)))
    gaps = max(len(bs) - 1, 1)
    k = int(np.ceil(span / (dq_step * gaps) - 1e-12))
    if k > 1:
        bs = _densify_states(bs, k)
    n = len(bs)
    w = np.linspace(0.0, 1.0, n)[:, None]
    qs = (1.0 - w) * q0[None, :] + w * q_g[None, :]
    qs[-1] = q_g

    lo, hi = -0.95 * q_max, 0.95 * q_max
    attempts = 0
    backtracks = 0
    forced = -1  # index whose repair was requested by a backtrack
    i = 1
    while 1 <= i <= n - 2:
        base_i = (float(bs[i, 0]), float(bs[i, 1]), float(bs[i, 2]))
        if i != forced and _state_clear(scenario, grid, robot, base_i, qs[i], margin):
            i += 1
            continue
        found = False
        for t in range(12):
            attempts += 1
            if attempts > budget:
                return None
            sigma = 0.08 * (1 + t)
            q_try = np.clip(qs[i] + sigma * rng.standard_normal(len(q0)), lo, hi)
            if np.max(np.abs(q_try - qs[i - 1])) > dq_step:
                continue
            if np.max(np.abs(q_try - qs[i + 1])) > dq_step:
                continue
            if _state_clear(scenario, grid, robot, base_i, q_try, margin):
                qs[i] = q_try
                found = True
                break
        if i == forced:
            forced = -1
        if found:
            i += 1
        elif i > 1 and backtracks < 8:
            backtracks += 1
            forced = i - 1
            i -= 1
        else:
            return None
    return np.column_stack([bs, qs])


# ---------- request / report ----------

@dataclass
class PlanRequest:
    """One planning instance: start state, goal pose, world and knobs."""

    start: rb.WholeBodyState
    goal: ob.GoalSpec
    scenario: wd.Scenario
    robot: rb.RobotModel = field(default_factory=rb.default_robot)
    config: ob.OptimizerConfig = field(default_factory=ob.OptimizerConfig)
    seed: int = 0
    k_max: int = 5
    jobs: Optional[int] = None
    budget_ms: Optional[float] = None
    v0: float = 0.0
    omega0: float = 0.0
    a0: float = 0.0
    beta0: float = 0.0
    dq0: Optional[np.ndarray] = None
    ddq0: Optional[np.ndarray] = None

    def start_rates(self) -> np.ndarray:
        n = self.robot.n_joints
        rates = np.zeros((2, n + 2))
        rates[0, 0], rates[0, 1] = self.v0, self.omega0
        rates[1, 0], rates[1, 1] = self.a0, self.beta0
        if self.dq0 is not None:
            rates[0, 2:] = np.asarray(self.dq0, dtype=float)
        if self.ddq0 is not None:
            rates[1, 2:] = np.asarray(self.ddq0, dtype=float)
        return rates

    def to_json_dict(self) -> dict:
        d = {
            "start": self.start.to_json_dict(),
            "goal": self.goal.to_json_dict(),
            "scenario": self.scenario.to_json_dict(),
            "robot": self.robot.to_json_dict(),
            "config": self.config.to_json_dict(),
            "seed": int(self.seed),
            "k_max": int(self.k_max),
        }
        if self.jobs is not None:
            d["jobs"] = int(self.jobs)
        if self.budget_ms is not None:
            d["budget_ms"] = float(self.budget_ms)
        rates = [self.v0, self.omega0, self.a0, self.beta0]
        if any(v != 0.0 for v in rates) or self.dq0 is not None or self.ddq0 is not None:
            d["rates"] = {"v0": self.v0, "omega0": self.omega0,
                          "a0": self.a0, "beta0": self.beta0,
                          "dq0": None if self.dq0 is None else list(map(float, self.dq0)),
                          "ddq0": None if self.ddq0 is None else list(map(float, self.ddq0))}
        return d

    @staticmethod
    def from_json_dict(d: dict) -> "PlanRequest":
        req = PlanRequest(
            start=rb.WholeBodyState.from_json_dict(d["start"]),
            goal=ob.GoalSpec.from_json_dict(d["goal"]),
            scenario=wd.Scenario.from_json_dict(d["scenario"]),
            seed=int(d.get("seed", 0)), k_max=int(d.get("k_max", 5)))
        if "robot" in d:
            req.robot = rb.RobotModel.from_json_dict(d["robot"])
        if "config" in d:
            req.config = ob.OptimizerConfig.from_json_dict(d["config"])
        if "jobs" in d and d["jobs"] is not None:
            req.jobs = int(d["jobs"])
        if "budget_ms" in d and d["budget_ms"] is not None:
            req.budget_ms = float(d["budget_ms"])
        r = d.get("rates", {})
        req.v0 = float(r.get("v0", 0.0))
        req.omega0 = float(r.get("omega0", 0.0))
        req.a0 = float(r.get("a0", 0.0))
        req.beta0 = float(r.get("beta0", 0.0))
        if r.get("dq0") is not None:
            req.dq0 = np.asarray(r["dq0"], dtype=float)
        if r.get("ddq0") is not None:
            req.ddq0 = np.asarray(r["ddq0"], dtype=float)
        return req


@dataclass
class CandidateResult:
    """Diagnostics for one optimized candidate path."""

    index: int
    path_length: float
    init_ok: bool
    status: str
    cost: float = float("inf")
    residual: float = float("inf")
    valid: bool = False
    n_outer: int = 0
    n_evals: int = 0
    wall_ms: float = 0.0
    trajectory: Optional[tr.WholeBodyTrajectory] = None
    validation: Optional[ValidationReport] = None
    base_path: Optional[np.ndarray] = None  # topo polyline, for debug rendering

    def to_json_dict(self, include_timing: bool = True) -> dict:
        d = {
            "index": int(self.index),
            "path_length": float(self.path_length),
            "init_ok": bool(self.init_ok),
            "status": self.status,
            "cost": float(self.cost),
            "residual": float(self.residual),
            "valid": bool(self.valid),
            "n_outer": int(self.n_outer),
            "n_evals": int(self.n_evals),
        }
        if include_timing:
            d["wall_ms"] = float(self.wall_ms)
        return d


@dataclass
class PlanReport:
    """Outcome of one plan() call, populated for every candidate."""

    status: str  # success | no_path | all_candidates_failed
    reason: str = ""
    seed: int = 0
    best_index: Optional[int] = None
    best: Optional[tr.WholeBodyTrajectory] = None
    validation: Optional[ValidationReport] = None
    candidates: list = field(default_factory=list)
    total_duration: float = 0.0
    wall_ms: float = 0.0

    @property
    def exit_code(self) -> int:
        return {"success": 0, "no_path": 2}.get(self.status, 3)

    def to_json_dict(self, include_timing: bool = True) -> dict:
        d = {
            "status": self.status,
            "reason": self.reason,
            "seed": int(self.seed),
            "best_index": None if self.best_index is None else int(self.best_index),
            "T_f": float(self.total_duration),
            "best": None if self.best is None else self.best.to_json_dict(),
            "validation": None if self.validation is None else self.validation.to_json_dict(),
            "candidates": [c.to_json_dict(include_timing) for c in self.candidates],
        }
        if include_timing:
            d["wall_ms"] = float(self.wall_ms)
        return d


# ---------- per-candidate optimization ----------

def optimize_candidate(init_states: np.ndarray, req: PlanRequest,
                       grid: wd.GridEsdf, index: int = 0,
                       deadline: Optional[float] = None) -> CandidateResult:
    """Optimize one candidate from its initialization states.

    Builds decision variables with waypoints taken from the initialization
    states nearest each trajectory-segment boundary, durations from segment
    length at half the base speed limit with a 1 s floor, then runs the
    augmented-Lagrangian solve and the independent validator.
    """
    st = np.asarray(init_states, dtype=float)
    robot, cfg = req.robot, req.config
    xy = st[:, :2]
    chord = np.hypot(*np.diff(xy, axis=0).T)
    cl = np.concatenate([[0.0], np.cumsum(chord)])
    L = float(cl[-1])
    M = int(np.clip(np.ceil(L / SEGMENT_TARGET_LENGTH), MIN_SEGMENTS, MAX_SEGMENTS))
    result = CandidateResult(index=index, path_length=L, init_ok=True, status="ok")

    if deadline is not None and time.perf_counter() >= deadline:
        result.status = "timeout"
        result.init_ok = True
        return result

    pick = np.round(np.linspace(0, len(st) - 1, M + 1)).astype(int)
    s_way = cl[pick]
    th_way = np.unwrap(st[pick, 2])
    # keep initial joint values off the squash asymptotes or they start frozen
    qcap = 0.99 * robot.limits.q_max
    q_way = np.clip(st[pick, 3:], -qcap, qcap)
    P = np.column_stack([s_way[1:M], th_way[1:M], q_way[1:M]])
    e = np.concatenate([[s_way[M], th_way[M]], q_way[M]])
    v_ref = REFERENCE_SPEED_FRAC * robot.limits.v_max
    T0 = np.maximum(MIN_SEGMENT_TIME, np.diff(s_way) / v_ref)

    base_problem = ob.WholeBodyProblem(robot, req.scenario, grid, req.start,
                                       req.goal, M, cfg,
                                       start_rates=req.start_rates())
    problem = base_problem
    z0 = problem.pack(P, e, tr.time_transform(T0))
    res = problem.solve(z0, deadline=deadline)
    traj = problem.build_trajectory(res.x)
    resid = float(np.max(np.abs(res.residual)))
    result.cost = float(problem.objective(res.x))
    result.residual = resid
    result.n_outer = res.n_outer
    result.n_evals = res.n_evals
    result.trajectory = traj
    if resid > cfg.eq_tol:
        result.status = "failed_residual"
        return result
    v = validate_trajectory(traj, req.scenario, robot, grid=grid, goal=req.goal,
                            cfg=cfg)
    # penalty continuation: a fixed-weight hinge settles at a depth that scales
    # with the local cost pull, so hard instances can land past the validator
    # threshold; re-solving warm-started with stiffer collision weights pushes
    # the equilibrium back inside
    def _collision_only(rep: ValidationReport) -> bool:
        if rep.families.get("collision", 0.0) <= 0.0:
            return False
        others = all(val < 1e-3 for fam, val in rep.families.items()
                     if fam != "collision")
        ee = (rep.ee_pos_err is None
              or (rep.ee_pos_err < 1e-3 and rep.ee_rot_err < 1e-2))
        return others and ee

    boost = 10.0
    while (not v.ok and _collision_only(v) and boost <= 100.0
           and (deadline is None or time.perf_counter() < deadline)):
        cfg_b = replace(cfg, w_obstacle=boost * cfg.w_obstacle,
                        w_arm=boost * cfg.w_arm, w_self=boost * cfg.w_self)
        problem = ob.WholeBodyProblem(robot, req.scenario, grid, req.start,
                                      req.goal, M, cfg_b,
                                      start_rates=req.start_rates())
        res_b = problem.solve(res.x, lam0=res.lam, deadline=deadline)
        result.n_outer += res_b.n_outer
        result.n_evals += res_b.n_evals
        resid_b = float(np.max(np.abs(res_b.residual)))
        if resid_b > cfg.eq_tol:
            break
        res, resid = res_b, resid_b
        traj = problem.build_trajectory(res.x)
        result.trajectory = traj
        # cost for candidate selection stays on the base weights
        result.cost = float(base_problem.objective(res.x))
        result.residual = resid
        v = validate_trajectory(traj, req.scenario, robot, grid=grid,
                                goal=req.goal, cfg=cfg)
        boost *= 10.0
    result.validation = v
    result.valid = v.ok
    if not v.ok:
        result.status = "failed_validation" if resid <= cfg.eq_tol \
            else "failed_residual"
    return result


def _run_candidate(req: PlanRequest, path: np.ndarray, goal_state,
                   grid: wd.GridEsdf, index: int,
                   deadline: Optional[float]) -> CandidateResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(np.random.SeedSequence((req.seed, index)))
    bs = sample_base_states(path, BASE_SAMPLE_INTERVAL,
                            fallback_heading=req.start.theta)
    bs[0, 2] = req.start.theta
    bs[-1, 2] = goal_state.theta
    init = sample_arm_path(bs, req.start.q, req.goal, req.scenario, grid,
                           req.robot, rng, q_goal_hint=goal_state.q)
    if init is None:
        out = CandidateResult(index=index, path_length=tp.path_length(path),
                              init_ok=False, status="init_failed")
    else:
        try:
            out = optimize_candidate(init, req, grid, index=index,
                                     deadline=deadline)
        except (ValueError, FloatingPointError, np.linalg.LinAlgError) as e:
            log.warning("candidate %d: numeric failure: %s", index, e)
            out = CandidateResult(index=index, path_length=tp.path_length(path),
                                  init_ok=True, status="error")
    out.base_path = np.asarray(path, dtype=float)
    out.wall_ms = (time.perf_counter() - t0) * 1e3
    log.debug("candidate %d: %s (cost %.3g, residual %.3g)", index, out.status,
              out.cost, out.residual)
    return out


def plan(req: PlanRequest) -> PlanReport:
    """Run the full pipeline for one request.

    Deterministic for a fixed seed and any worker count as long as the time
    budget does not bind: per-candidate rngs are seeded by (seed, index),
    results are gathered by index and the winner is the validated candidate
    with the lowest objective, ties toward the lower index. Wall-clock fields
    are the only scheduling-dependent outputs; serialize with
    include_timing=False to compare reports bytewise.
    """
    t0 = time.perf_counter()
    deadline = t0 + req.budget_ms / 1e3 if req.budget_ms else None
    robot, scenario = req.robot, req.scenario
    col = robot.collision
    grid = wd.build_grid_esdf(scenario, GRID_RESOLUTION,
                              inflation=col.cylinder_radius,
                              z_band=(0.0, col.cylinder_height))
    clearance = col.r_thr[0] + req.config.margin_obs

    def done(report: PlanReport) -> PlanReport:
        report.seed = req.seed
        report.wall_ms = (time.perf_counter() - t0) * 1e3
        return report

    rng_goal = np.random.default_rng(np.random.SeedSequence((req.seed, _GOAL_STREAM)))
    goal_state = goal_base_state(robot, scenario, grid, req.goal, rng_goal,
                                 start_q=req.start.q)
    if goal_state is None:
        return done(PlanReport(status="all_candidates_failed",
                               reason="goal_ik_failed"))

    rng_topo = np.random.default_rng(np.random.SeedSequence((req.seed, _TOPO_STREAM)))
    paths = tp.candidate_paths(grid, (req.start.x, req.start.y),
                               (goal_state.x, goal_state.y), rng_topo,
                               n_samples=TOPO_SAMPLES, clearance=clearance,
                               k_max=req.k_max)
    if not paths:
        return done(PlanReport(status="no_path", reason="no_topo_path"))
    log.debug("%d candidate paths to goal base (%.2f, %.2f)", len(paths),
              goal_state.x, goal_state.y)

    workers = req.jobs if req.jobs else min(len(paths), os.cpu_count() or 1)
    workers = max(1, int(workers))
    if workers == 1:
        cands = [_run_candidate(req, p, goal_state, grid, i, deadline)
                 for i, p in enumerate(paths)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            cands = list(ex.map(
                lambda i: _run_candidate(req, paths[i], goal_state, grid, i, deadline),
                range(len(paths))))

    winners = [c for c in cands if c.status == "ok"]
    if not winners:
        return done(PlanReport(status="all_candidates_failed",
                               reason=";".join(c.status for c in cands),
                               candidates=cands))
    best = min(winners, key=lambda c: (c.cost, c.index))
    return done(PlanReport(status="success", best_index=best.index,
                           best=best.trajectory, validation=best.validation,
                           candidates=cands,
                           total_duration=best.trajectory.total_time))
