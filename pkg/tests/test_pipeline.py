import json

import numpy as np

from wbp import objective as ob
from wbp import pipeline as pl
from wbp import robot as rb
from wbp import topo as tp
from wbp import traj as tr
from wbp import world as wd


# ---------- fixtures ----------

def _robot():
    return rb.default_robot()


def _home_q():
    return np.array([0.0, 0.5, 0.6, 0.0, 0.5, 0.0])


def _empty_room(w=8.0, h=6.0):
    s = wd.Scenario(room=np.array([0.0, 0.0, w, h]),
                    obstacles=wd._wall_boxes((0.0, 0.0, w, h), 0.2, 2.0),
                    seed=0)
    return s


def _grid(s, robot):
    col = robot.collision
    return wd.build_grid_esdf(s, pl.GRID_RESOLUTION, inflation=col.cylinder_radius,
                              z_band=(0.0, col.cylinder_height))


def _two_gap_room():
    # wall across y=3 with 1 m gaps at x in (3.5, 4.5) and (5.5, 6.5)
    t, h = 0.1, 1.0
    obs = wd._wall_boxes((0.0, 0.0, 10.0, 6.0), 0.2, 2.0)
    obs += [
        wd.BoxObstacle([1.75, 3.0, h / 2], [1.75, t / 2, h / 2], 0.0, "wall_seg"),
        wd.BoxObstacle([5.0, 3.0, h / 2], [0.5, t / 2, h / 2], 0.0, "wall_seg"),
        wd.BoxObstacle([8.25, 3.0, h / 2], [1.75, t / 2, h / 2], 0.0, "wall_seg"),
    ]
    return wd.Scenario(room=np.array([0.0, 0.0, 10.0, 6.0]), obstacles=obs, seed=0)


def _goal_at(robot, base, q):
    R, p = rb.forward_kinematics(robot, base, np.asarray(q, dtype=float))
    return ob.GoalSpec(position=p, rotation=R)


def _const_traj(x0, y0, theta, q, M=2):
    """Zero-motion trajectory parked at one whole-body state."""
    n = len(q)
    coeffs = np.zeros((M, 6, n + 2))
    coeffs[:, 0, 1] = theta
    coeffs[:, 0, 2:] = np.asarray(q, dtype=float)
    return tr.WholeBodyTrajectory(coeffs=coeffs, durations=np.ones(M),
                                  x0=x0, y0=y0)


def _smoothstep_coeffs(delta, T):
    # quintic 0 -> delta with zero end velocities/accelerations
    return np.array([0.0, 0.0, 0.0, 10 * delta / T**3, -15 * delta / T**4,
                     6 * delta / T**5])


# ---------- base-state sampling ----------

def test_base_states_straight_and_short():
    bs = pl.sample_base_states(np.array([[1.0, 2.0], [5.0, 2.0]]), interval=1.0)
    assert bs.shape == (5, 3)
    assert np.max(np.abs(bs[:, 0] - np.arange(1.0, 5.5))) < 1e-12
    assert np.max(np.abs(bs[:, 1] - 2.0)) < 1e-12
    assert np.max(np.abs(bs[:, 2])) < 1e-12

    short = pl.sample_base_states(np.array([[0.0, 0.0], [0.3, 0.0]]), interval=0.5)
    assert short.shape == (2, 3)
    assert np.max(np.abs(short[:, 0] - [0.0, 0.3])) < 1e-12

    degen = pl.sample_base_states(np.array([[1.0, 1.0], [1.0, 1.0]]),
                                  interval=0.5, fallback_heading=0.7)
    assert degen.shape == (2, 3)
    assert np.all(degen[:, 2] == 0.7)

    try:
        pl.sample_base_states(np.array([[0.0, 0.0], [1.0, 0.0]]), interval=0.0)
        assert False, "expected ValueError"
    except ValueError:
        pass


def test_base_states_corner_tangents():
    path = np.array([[0.0, 0.0], [2.0, 0.0], [2.0, 2.0]])
    bs = pl.sample_base_states(path, interval=0.5)
    assert bs.shape == (9, 3)
    arcs = 0.5 * np.arange(9)
    for row, arc in zip(bs, arcs):
        if arc < 2.0 - 1e-12:
            expect = 0.0
        elif arc > 2.0 + 1e-12:
            expect = np.pi / 2
        else:
            expect = np.pi / 4  # corner averages the two segment directions
        assert abs(row[2] - expect) < 1e-9, (arc, row[2])
    # stations sit on the polyline at uniform arc length
    xy_expect = np.where(arcs[:, None] <= 2.0,
                         np.column_stack([arcs, np.zeros(9)]),
                         np.column_stack([np.full(9, 2.0), arcs - 2.0]))
    assert np.max(np.abs(bs[:, :2] - xy_expect)) < 1e-12


# ---------- whole-body IK ----------

def test_ik_cost_gradients_match_finite_differences():
    robot = _robot()
    q_max = robot.limits.q_max
    goal = _goal_at(robot, (3.0, 2.0, 0.4), _home_q())
    rng = np.random.default_rng(5)
    h = 1e-6
    for _ in range(4):
        u = np.concatenate([rng.uniform(-1, 1, 3) + [3.0, 2.0, 0.0],
                            rng.uniform(-0.9, 0.9, robot.n_joints)])
        f, g = pl._ik_cost_free(robot, goal, u, q_max)
        for i in range(len(u)):
            up, um = u.copy(), u.copy()
            up[i] += h
            um[i] -= h
            fd = (pl._ik_cost_free(robot, goal, up, q_max)[0] -
                  pl._ik_cost_free(robot, goal, um, q_max)[0]) / (2 * h)
            assert abs(fd - g[i]) < 1e-5 * max(1.0, abs(fd)), (i, fd, g[i])

        v = rng.uniform(-0.9, 0.9, robot.n_joints)
        f, g = pl._ik_cost_fixed(robot, (3.0, 2.0, 0.3), goal, v, q_max)
        for i in range(len(v)):
            vp, vm = v.copy(), v.copy()
            vp[i] += h
            vm[i] -= h
            fd = (pl._ik_cost_fixed(robot, (3.0, 2.0, 0.3), goal, vp, q_max)[0] -
                  pl._ik_cost_fixed(robot, (3.0, 2.0, 0.3), goal, vm, q_max)[0]) / (2 * h)
            assert abs(fd - g[i]) < 1e-5 * max(1.0, abs(fd)), (i, fd, g[i])


def test_goal_base_state_reaches_pose_and_clearance():
    robot = _robot()
    s = _empty_room()
    g = _grid(s, robot)
    goal = _goal_at(robot, (4.0, 3.0, 0.4), _home_q())
    st = pl.goal_base_state(robot, s, g, goal,
                            np.random.default_rng(3), start_q=_home_q())
    assert st is not None
    R, p = rb.forward_kinematics(robot, (st.x, st.y, st.theta), st.q)
    assert np.linalg.norm(p - goal.position) <= pl.IK_POS_TOL
    rot = np.linalg.norm((R - goal.rotation)[:, :2])
    assert rot <= pl.IK_ROT_TOL
    margins = wd.state_margins(s, g, robot, st)
    assert min(margins) >= pl.INIT_MARGIN - 1e-12

    st2 = pl.goal_base_state(robot, s, g, goal,
                             np.random.default_rng(3), start_q=_home_q())
    assert st2.x == st.x and st2.y == st.y and st2.theta == st.theta
    assert np.array_equal(st2.q, st.q)


# ---------- arm-path initialization ----------

def test_arm_path_keeps_start_posture_when_goal_already_reached():
    robot = _robot()
    s = _empty_room()
    g = _grid(s, robot)
    q0 = _home_q()
    path = np.array([[2.5, 3.0], [5.5, 3.0]])
    bs = pl.sample_base_states(path)
    goal = _goal_at(robot, (float(bs[-1, 0]), float(bs[-1, 1]), float(bs[-1, 2])), q0)
    out = pl.sample_arm_path(bs, q0, goal, s, g, robot,
                             np.random.default_rng(0))
    assert out is not None
    assert out.shape == (len(bs), 3 + robot.n_joints)
    assert np.max(np.abs(out[:, 3:] - q0[None, :])) == 0.0


def test_arm_path_step_bound_margins_and_determinism():
    robot = _robot()
    s = _empty_room()
    g = _grid(s, robot)
    q0 = _home_q()
    # goal posture far from the start so interpolation spans > dq_step
    q_goal = np.array([1.6, -0.4, 1.2, 0.8, -0.9, 1.3])
    path = np.array([[2.0, 3.0], [6.0, 3.0]])
    bs = pl.sample_base_states(path)
    base_f = (float(bs[-1, 0]), float(bs[-1, 1]), float(bs[-1, 2]))
    goal = _goal_at(robot, base_f, q_goal)
    out = pl.sample_arm_path(bs, q0, goal, s, g, robot,
                             np.random.default_rng(4), q_goal_hint=q_goal)
    assert out is not None
    assert np.max(np.abs(out[0, 3:] - q0)) == 0.0
    steps = np.abs(np.diff(out[:, 3:], axis=0))
    assert np.max(steps) <= pl.DQ_STEP + 1e-12
    for row in out[1:-1]:
        st = rb.WholeBodyState(x=row[0], y=row[1], theta=row[2], q=row[3:])
        assert min(wd.state_margins(s, g, robot, st)) >= pl.INIT_MARGIN - 1e-9
    pe, re_ = pl._pose_errors(robot, base_f, out[-1, 3:], goal)
    assert pe <= pl.IK_POS_TOL and re_ <= pl.IK_ROT_TOL

    out2 = pl.sample_arm_path(bs, q0, goal, s, g, robot,
                              np.random.default_rng(4), q_goal_hint=q_goal)
    assert np.array_equal(out, out2)


# ---------- self-pair clearances ----------

def test_pair_clearances_match_per_sample_reference():
    robot = _robot()
    rng = np.random.default_rng(11)
    P = 5
    qs = rng.uniform(-0.9, 0.9, (P, robot.n_joints)) * robot.limits.q_max
    xs, ys = rng.uniform(0, 4, P), rng.uniform(0, 4, P)
    ths = rng.uniform(-np.pi, np.pi, P)
    kin = rb.BatchKinematics(robot, xs, ys, ths, qs)
    pc = pl._pair_clearances(robot, kin)
    assert pc.shape == (P, len(robot.collision.self_pairs))
    for p in range(P):
        ref = rb.self_collision_distances(robot, qs[p])  # base-pose invariant
        assert np.max(np.abs(pc[p] - ref)) < 1e-9


# ---------- validator ----------

def test_validator_parked_state_is_clean():
    robot = _robot()
    s = _empty_room()
    q = _home_q()
    traj = _const_traj(4.0, 3.0, 0.3, q)
    goal = _goal_at(robot, (4.0, 3.0, 0.3), q)
    rep = pl.validate_trajectory(traj, s, robot, goal=goal)
    assert rep.ok
    assert set(rep.families) == set(pl.FAMILY_KEYS)
    assert all(v == 0.0 for v in rep.families.values())
    assert rep.ee_pos_err < 1e-9 and rep.ee_rot_err < 1e-9


def test_validator_flags_drive_and_joint_families():
    robot = _robot()
    s = _empty_room()
    lim = robot.limits
    q = _home_q()

    fast = _const_traj(2.0, 3.0, 0.0, q, M=1)
    fast.coeffs[0, :, 0] = _smoothstep_coeffs(3.0, 1.0)  # peak ds = 5.625 m/s
    rep = pl.validate_trajectory(fast, s, robot)
    assert not rep.ok
    expect = 1.875 * 3.0 / lim.v_max - 1.0
    assert abs(rep.families["drive"] - expect) < 1e-6
    assert rep.families["joint_pos"] == 0.0
    assert rep.families["joint_vel"] == 0.0
    assert rep.families["collision"] == 0.0

    # joint 0 spins about the vertical axis: clearances stay untouched
    swing = _const_traj(4.0, 3.0, 0.0, q, M=1)
    swing.coeffs[0, :, 2] = _smoothstep_coeffs(1.5, 1.0)
    rep = pl.validate_trajectory(swing, s, robot)
    assert not rep.ok
    expect = 1.875 * 1.5 / lim.dq_max[0] - 1.0
    assert abs(rep.families["joint_vel"] - expect) < 1e-6
    assert rep.families["drive"] == 0.0
    assert rep.families["collision"] == 0.0


def test_validator_flags_base_collision():
    robot = _robot()
    s = _empty_room()
    q = _home_q()
    traj = _const_traj(0.25, 3.0, 0.0, q)  # hugging the x=0 wall
    rep = pl.validate_trajectory(traj, s, robot)
    assert not rep.ok
    assert rep.families["collision"] > 0.0
    assert rep.detail["collision_base"] > 0.0
    assert rep.families["drive"] == 0.0


def test_validator_matches_brute_force_sampling():
    robot = _robot()
    s = _empty_room()
    lim, col = robot.limits, robot.collision
    cfg = ob.OptimizerConfig()
    g = _grid(s, robot)
    q = _home_q()

    way = np.zeros((1, robot.n_joints + 2))
    way[0, 0], way[0, 1] = 0.7, 0.25
    way[0, 2:] = q + 0.2
    st0 = np.zeros((3, robot.n_joints + 2))
    st0[0, 1] = 0.0
    st0[0, 2:] = q
    stf = np.zeros((3, robot.n_joints + 2))
    stf[0, 0], stf[0, 1] = 1.4, 0.5
    stf[0, 2:] = q + 0.35
    durations = np.array([1.3, 1.7])
    traj = tr.solve_coefficients(way, st0, stf, durations)
    traj.x0, traj.y0 = 3.0, 2.5

    k_dense = 8
    rep = pl.validate_trajectory(traj, s, robot, grid=g, k_dense=k_dense, cfg=cfg)

    c = traj.coeffs
    ts, xs, ys = rb.flat_positions_dense(c[:, :, 0], c[:, :, 1], traj.durations,
                                         samples_per_seg=k_dense, n_gap=10,
                                         x0=traj.x0, y0=traj.y0)
    fam = {k: -np.inf for k in pl.FAMILY_KEYS}
    for m, t in enumerate(ts):
        v0 = traj.eval(t, 0)
        v1 = traj.eval(t, 1)
        v2 = traj.eval(t, 2)
        fam["drive"] = max(fam["drive"],
                           abs(v1[0]) / lim.v_max + abs(v1[1]) / lim.omega_max - 1)
        fam["base_acc"] = max(fam["base_acc"], abs(v2[0]) / lim.a_max - 1,
                              abs(v2[1]) / lim.beta_max - 1)
        fam["joint_pos"] = max(fam["joint_pos"], np.max(np.abs(v0[2:]) / lim.q_max) - 1)
        fam["joint_vel"] = max(fam["joint_vel"], np.max(np.abs(v1[2:]) / lim.dq_max) - 1)
        fam["joint_acc"] = max(fam["joint_acc"], np.max(np.abs(v2[2:]) / lim.ddq_max) - 1)
        pts = rb.collision_points(robot, (xs[m], ys[m], v0[1]), v0[2:])
        d_base, _ = wd.esdf_query(g, pts[0, :2])
        worst = col.r_thr[0] - d_base
        for i, p in enumerate(pts[1:]):
            d3, _ = wd.sdf3_query(s, p)
            worst = max(worst, col.r_thr[1 + i] - d3)
        worst = max(worst, np.max(-rb.self_collision_distances(robot, v0[2:])))
        fam["collision"] = max(fam["collision"], worst)
    for k in pl.FAMILY_KEYS:
        assert abs(rep.families[k] - max(0.0, fam[k])) < 1e-9, k


def test_validator_positions_agree_with_pointwise_quadrature():
    robot = _robot()
    q = _home_q()
    way = np.zeros((1, robot.n_joints + 2))
    way[0, 0], way[0, 1] = 0.9, -0.3
    way[0, 2:] = q
    st0 = np.zeros((3, robot.n_joints + 2))
    st0[0, 2:] = q
    stf = np.zeros((3, robot.n_joints + 2))
    stf[0, 0], stf[0, 1] = 1.8, 0.4
    stf[0, 2:] = q
    durations = np.array([1.0, 1.2])
    traj = tr.solve_coefficients(way, st0, stf, durations)
    traj.x0, traj.y0 = 4.0, 3.0
    c = traj.coeffs
    ts, xs, ys = rb.flat_positions_dense(c[:, :, 0], c[:, :, 1], traj.durations,
                                         samples_per_seg=160, n_gap=10,
                                         x0=traj.x0, y0=traj.y0)
    for idx in range(0, len(ts), 40):
        x, y = rb.flat_position(c[:, :, 0], c[:, :, 1], traj.durations,
                                float(ts[idx]), x0=traj.x0, y0=traj.y0, n_sub=64)
        assert abs(x - xs[idx]) < 1e-7 and abs(y - ys[idx]) < 1e-7


# ---------- candidate optimization ----------

def test_optimize_candidate_goal_at_start_parks():
    robot = _robot()
    s = _empty_room()
    g = _grid(s, robot)
    q0 = _home_q()
    start = rb.WholeBodyState(x=4.0, y=3.0, theta=0.2, q=q0)
    goal = _goal_at(robot, (4.0, 3.0, 0.2), q0)
    req = pl.PlanRequest(start=start, goal=goal, scenario=s, robot=robot, seed=0)
    init = np.concatenate([[[4.0, 3.0, 0.2]], [[4.0, 3.0, 0.2]]])
    init = np.column_stack([init, np.vstack([q0, q0])])
    res = pl.optimize_candidate(init, req, g)
    assert res.status == "ok"
    assert res.residual <= req.config.eq_tol
    assert res.valid and res.validation.ok
    # nothing to do: the cost is almost pure time
    assert res.cost <= req.config.rho_time * res.trajectory.total_time + 1.0
    v_end = res.trajectory.eval(res.trajectory.total_time, 0)
    assert abs(v_end[0]) < 0.05  # net arc progress stays near zero


# ---------- full pipeline ----------

def test_plan_empty_room_succeeds():
    robot = _robot()
    s = _empty_room(7.0, 5.0)
    q0 = _home_q()
    start = rb.WholeBodyState(x=1.5, y=2.5, theta=0.0, q=q0)
    goal = _goal_at(robot, (4.0, 2.5, 0.0), q0)
    req = pl.PlanRequest(start=start, goal=goal, scenario=s, robot=robot,
                         seed=0, jobs=1)
    rep = pl.plan(req)
    assert rep.status == "success"
    assert rep.exit_code == 0
    assert rep.best is not None and rep.validation is not None
    assert rep.validation.ok
    assert rep.best_index in [c.index for c in rep.candidates if c.status == "ok"]
    assert abs(rep.total_duration - rep.best.total_time) < 1e-12
    assert rep.wall_ms > 0.0


def test_plan_two_gap_room_worker_invariance():
    robot = _robot()
    s = _two_gap_room()
    q0 = _home_q()
    start = rb.WholeBodyState(x=2.0, y=1.5, theta=0.0, q=q0)
    goal = _goal_at(robot, (8.0, 4.5, 0.5), q0)
    req1 = pl.PlanRequest(start=start, goal=goal, scenario=s, robot=robot,
                          seed=1, k_max=2, jobs=1)
    rep1 = pl.plan(req1)
    assert len(rep1.candidates) >= 2  # both gaps produce a candidate
    req4 = pl.PlanRequest(start=start, goal=goal, scenario=s, robot=robot,
                          seed=1, k_max=2, jobs=4)
    rep4 = pl.plan(req4)
    j1 = json.dumps(rep1.to_json_dict(include_timing=False), sort_keys=True)
    j4 = json.dumps(rep4.to_json_dict(include_timing=False), sort_keys=True)
    assert j1 == j4
    assert rep1.status == "success"


def test_plan_unreachable_goal_fails_cleanly():
    robot = _robot()
    obs = wd._wall_boxes((0.0, 0.0, 8.0, 6.0), 0.2, 2.0)
    obs.append(wd.BoxObstacle([5.0, 3.0, 0.6], [0.8, 0.8, 0.6], 0.0, "block"))
    s = wd.Scenario(room=np.array([0.0, 0.0, 8.0, 6.0]), obstacles=obs, seed=0)
    start = rb.WholeBodyState(x=1.5, y=3.0, theta=0.0, q=_home_q())
    goal = ob.GoalSpec.from_xyz_rpy([5.0, 3.0, 0.6], [0, 0, 0])  # inside the block
    req = pl.PlanRequest(start=start, goal=goal, scenario=s, robot=robot, seed=0)
    rep = pl.plan(req)
    assert rep.status == "all_candidates_failed"
    assert rep.exit_code == 3
    assert rep.reason == "goal_ik_failed"
    assert rep.best is None


def test_plan_sealed_room_reports_no_path():
    robot = _robot()
    obs = wd._wall_boxes((0.0, 0.0, 8.0, 6.0), 0.2, 2.0)
    # full-height wall straight across: no gap anywhere
    obs.append(wd.BoxObstacle([4.0, 3.0, 1.0], [4.0, 0.05, 1.0], 0.0, "seal"))
    s = wd.Scenario(room=np.array([0.0, 0.0, 8.0, 6.0]), obstacles=obs, seed=0)
    q0 = _home_q()
    start = rb.WholeBodyState(x=1.5, y=1.5, theta=0.0, q=q0)
    goal = _goal_at(robot, (6.0, 4.5, 0.0), q0)
    req = pl.PlanRequest(start=start, goal=goal, scenario=s, robot=robot, seed=0)
    rep = pl.plan(req)
    assert rep.status == "no_path"
    assert rep.exit_code == 2
    assert rep.reason == "no_topo_path"


# ---------- serialization ----------

def _assert_no_key(d, key):
    if isinstance(d, dict):
        assert key not in d
        for v in d.values():
            _assert_no_key(v, key)
    elif isinstance(d, list):
        for v in d:
            _assert_no_key(v, key)


def test_report_serialization_and_exit_codes():
    q = _home_q()
    traj = _const_traj(4.0, 3.0, 0.0, q)
    val = pl.ValidationReport(families={k: 0.0 for k in pl.FAMILY_KEYS}, ok=True,
                              ee_pos_err=1e-5, ee_rot_err=1e-4,
                              detail={"collision_base": -0.5})
    cand = pl.CandidateResult(index=0, path_length=2.0, init_ok=True, status="ok",
                              cost=10.0, residual=1e-5, valid=True, n_outer=3,
                              n_evals=120, wall_ms=250.0, trajectory=traj,
                              validation=val)
    rep = pl.PlanReport(status="success", seed=7, best_index=0, best=traj,
                        validation=val, candidates=[cand],
                        total_duration=traj.total_time, wall_ms=300.0)
    with_timing = rep.to_json_dict()
    assert with_timing["wall_ms"] == 300.0
    assert with_timing["candidates"][0]["wall_ms"] == 250.0
    clean = rep.to_json_dict(include_timing=False)
    _assert_no_key(clean, "wall_ms")
    json.dumps(clean)  # must be plain JSON types

    assert pl.PlanReport(status="success").exit_code == 0
    assert pl.PlanReport(status="no_path").exit_code == 2
    assert pl.PlanReport(status="all_candidates_failed").exit_code == 3

    v2 = pl.ValidationReport.from_json_dict(val.to_json_dict())
    assert v2.families == val.families and v2.ok == val.ok


def test_plan_request_json_round_trip():
    robot = _robot()
    s = _empty_room()
    start = rb.WholeBodyState(x=1.0, y=2.0, theta=0.3, q=_home_q())
    goal = _goal_at(robot, (3.0, 2.0, 0.1), _home_q())
    req = pl.PlanRequest(start=start, goal=goal, scenario=s, robot=robot,
                         seed=42, k_max=3, jobs=2, budget_ms=5000.0,
                         v0=0.2, omega0=-0.1, dq0=np.full(robot.n_joints, 0.05))
    back = pl.PlanRequest.from_json_dict(json.loads(json.dumps(req.to_json_dict())))
    assert back.seed == 42 and back.k_max == 3 and back.jobs == 2
    assert back.budget_ms == 5000.0
    assert back.v0 == 0.2 and back.omega0 == -0.1 and back.beta0 == 0.0
    assert np.array_equal(back.dq0, req.dq0) and back.ddq0 is None
    assert back.start.x == start.x and np.array_equal(back.start.q, start.q)
    assert np.array_equal(back.goal.rotation, goal.rotation)
    assert len(back.scenario.obstacles) == len(s.obstacles)
    assert back.config.eq_tol == req.config.eq_tol
    rates = back.start_rates()
    assert rates.shape == (2, robot.n_joints + 2)
    assert rates[0, 0] == 0.2 and rates[0, 2] == 0.05 and rates[1, 0] == 0.0
