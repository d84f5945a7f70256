import json

import numpy as np
import pytest
from numpy.polynomial import polynomial as npoly

from wbp import objective as ob
from wbp import robot as rb
from wbp import traj as tr
from wbp import world as wd


# ---------- helpers ----------

def _jerk_integral_exact(c, T):
    # independent oracle: integrate the squared jerk polynomial exactly
    jerk = np.array([6 * c[3], 24 * c[4], 60 * c[5]])
    sq = npoly.polymul(jerk, jerk)
    return float(npoly.polyval(T, npoly.polyint(sq)))


def _empty_room(room=(0.0, 0.0, 8.0, 6.0)):
    s = wd.Scenario(room=np.array(room), obstacles=wd._wall_boxes(np.array(room), 0.2, 2.0),
                    seed=0)
    return s


def _room_with_post():
    room = np.array([0.0, 0.0, 8.0, 6.0])
    obs = wd._wall_boxes(room, 0.2, 2.0)
    obs.append(wd.BoxObstacle([4.0, 2.9, 0.6], [0.25, 0.25, 0.6], 0.4, "cuboid"))
    return wd.Scenario(room=room, obstacles=obs, seed=0)


def _make_problem(scenario, start_xy=(1.5, 1.5), theta=0.3, M=3,
                  goal_conf=(6.0, 4.0, -0.4), cfg=None):
    robot = rb.default_robot()
    g = wd.build_grid_esdf(scenario, resolution=0.1,
                           inflation=robot.collision.cylinder_radius,
                           z_band=(0.0, robot.collision.cylinder_height))
    q0 = np.array([0.3, -0.4, 0.8, 0.2, 0.5, -0.3])
    start = rb.WholeBodyState(x=start_xy[0], y=start_xy[1], theta=theta, q=q0)
    qg = np.array([-0.5, 0.5, -0.7, 0.4, -0.6, 0.2])
    Rg, pg = rb.forward_kinematics(robot, goal_conf, qg)
    goal = ob.GoalSpec(position=pg, rotation=Rg)
    prob = ob.WholeBodyProblem(robot, scenario, g, start, goal, n_segments=M,
                               config=cfg)
    return prob, qg, np.asarray(goal_conf, dtype=float)


def _initial_z(prob, qg, goal_conf, T_seg=2.0):
    # straight-line interpolation of every channel between start and goal guesses
    M, C = prob.M, prob.C
    L = float(np.hypot(goal_conf[0] - prob.x0, goal_conf[1] - prob.y0))
    sv = np.linspace(0.0, L, M + 1)[1:]
    thv = np.linspace(prob.start.theta, goal_conf[2], M + 1)[1:]
    qv = np.linspace(prob.start.q, qg, M + 1)[1:]
    P = np.column_stack([sv[:-1], thv[:-1], qv[:-1]]) if M > 1 else np.zeros((0, C))
    e = np.concatenate([[sv[-1], thv[-1]], qv[-1]])
    tau = tr.time_transform(np.full(M, T_seg))
    return prob.pack(P, e, tau)


# ---------- jerk energy ----------

def test_jerk_energy_matches_exact_integration():
    rng = np.random.default_rng(0)
    M, C = 4, 3
    c = rng.normal(size=(M, 6, C))
    T = rng.uniform(0.5, 3.0, size=M)
    w = rng.uniform(0.5, 2.0, size=C)
    E, _, _ = ob.jerk_energy(c, T, w)
    manual = sum(w[ch] * _jerk_integral_exact(c[j, :, ch], T[j])
                 for j in range(M) for ch in range(C))
    assert abs(E - manual) < 1e-9 * max(1.0, abs(manual))


def test_jerk_energy_gradients_finite_difference():
    rng = np.random.default_rng(1)
    c = rng.normal(size=(2, 6, 2))
    T = np.array([1.3, 0.7])
    w = np.array([1.0, 2.5])
    _, dc, dT = ob.jerk_energy(c, T, w)
    h = 1e-6
    for j in range(2):
        for k in range(6):
            for ch in range(2):
                cp = c.copy()
                cp[j, k, ch] += h
                cm = c.copy()
                cm[j, k, ch] -= h
                fd = (ob.jerk_energy(cp, T, w)[0] - ob.jerk_energy(cm, T, w)[0]) / (2 * h)
                assert abs(dc[j, k, ch] - fd) < 1e-4 * (1 + abs(fd))
    for j in range(2):
        Tp = T.copy()
        Tp[j] += h
        Tm = T.copy()
        Tm[j] -= h
        fd = (ob.jerk_energy(c, Tp, w)[0] - ob.jerk_energy(c, Tm, w)[0]) / (2 * h)
        assert abs(dT[j] - fd) < 1e-4 * (1 + abs(fd))


def test_jerk_energy_smoothstep_is_720():
    c = np.zeros((1, 6, 1))
    c[0, :, 0] = [0.0, 0.0, 0.0, 10.0, -15.0, 6.0]
    E, _, _ = ob.jerk_energy(c, np.array([1.0]), np.array([1.0]))
    assert abs(E - 720.0) < 1e-9


# ---------- packing ----------

def test_pack_unpack_round_trip():
    rng = np.random.default_rng(4)
    q_max = rb.default_robot().limits.q_max
    M, C = 4, 8
    P = np.column_stack([rng.normal(size=(M - 1, 2)),
                         rng.uniform(-0.97, 0.97, size=(M - 1, 6)) * q_max])
    e = np.concatenate([rng.normal(size=2), rng.uniform(-0.9, 0.9, 6) * q_max])
    tau = rng.normal(size=M)
    z = ob.pack_decision(P, e, tau, q_max)
    P2, e2, tau2 = ob.unpack_decision(z, M, C, q_max)
    assert np.max(np.abs(P2 - P)) < 1e-9
    assert np.max(np.abs(e2 - e)) < 1e-9
    assert np.array_equal(tau2, tau)


# ---------- residual ----------

def test_residual_zero_when_goal_matches_end_state():
    prob, qg, gc = _make_problem(_empty_room())
    z = _initial_z(prob, qg, gc)
    traj = prob.build_trajectory(z)
    ex, ey, th, q = prob._end_pose(traj)
    R, p = rb.forward_kinematics(prob.robot, (ex, ey, th), q)
    prob.goal = ob.GoalSpec(position=p, rotation=R)
    r = prob.residual(z)
    assert np.max(np.abs(r)) < 1e-10


def test_residual_matches_lagrangian_probe():
    prob, qg, gc = _make_problem(_empty_room())
    z = _initial_z(prob, qg, gc)
    r = prob.residual(z)
    f0, _ = prob.augmented(z, np.zeros(9), 0.0)
    for i in range(9):
        lam = np.zeros(9)
        lam[i] = 1.0
        fi, _ = prob.augmented(z, lam, 0.0)
        assert abs((fi - f0) - r[i]) < 1e-9 * (1 + abs(r[i]))


def test_residual_against_plain_forward_kinematics():
    prob, qg, gc = _make_problem(_empty_room())
    z = _initial_z(prob, qg, gc)
    traj = prob.build_trajectory(z)
    ex, ey, th, q = prob._end_pose(traj)
    R, p = rb.forward_kinematics(prob.robot, (ex, ey, th), q)
    manual = np.concatenate([p - prob.goal.position,
                             R[:, 0] - prob.goal.rotation[:, 0],
                             R[:, 1] - prob.goal.rotation[:, 1]])
    assert np.max(np.abs(prob.residual(z) - manual)) < 1e-12


# ---------- full gradient ----------

def _fd_check(prob, z, lam, sigma, h=1e-5, tol=1e-4):
    # central differences; the fixtures keep |f| moderate so this step sits
    # between the cancellation floor and the truncation regime
    f0, g = prob.augmented(z, lam, sigma)
    assert np.isfinite(f0)
    for i in range(len(z)):
        zp = z.copy()
        zp[i] += h
        zm = z.copy()
        zm[i] -= h
        fp, _ = prob.augmented(zp, lam, sigma)
        fm, _ = prob.augmented(zm, lam, sigma)
        fd = (fp - fm) / (2 * h)
        assert abs(g[i] - fd) < tol * (1 + abs(fd)), \
            f"var {i}: analytic {g[i]:.8g} vs fd {fd:.8g}"


def test_augmented_gradient_finite_difference_free_space():
    prob, qg, gc = _make_problem(_empty_room())
    z = _initial_z(prob, qg, gc, T_seg=3.0)
    rng = np.random.default_rng(7)
    z = z + 0.005 * rng.normal(size=z.shape)
    f0, _ = prob.augmented(z, np.zeros(9), 0.0)
    assert f0 < 1e4  # keep the FD probe well-conditioned
    lam = rng.normal(size=9)
    _fd_check(prob, z, lam, sigma=10.0)


def test_augmented_gradient_finite_difference_with_active_hinges():
    prob, qg, gc = _make_problem(_room_with_post())
    z = _initial_z(prob, qg, gc, T_seg=1.6)  # brisk: some hinges fire mildly
    rng = np.random.default_rng(11)
    z = z + 0.003 * rng.normal(size=z.shape)
    parts = prob.objective_parts(z)
    assert parts["penalty"] > 1e-6  # the point of this test is active penalties
    assert parts["penalty"] < 1e7
    lam = rng.normal(size=9)
    _fd_check(prob, z, lam, sigma=25.0)


# ---------- feasibility behavior ----------

def test_slow_straight_line_has_zero_penalty():
    prob, qg, gc = _make_problem(_empty_room(), goal_conf=(3.0, 1.5, 0.3))
    qg0 = prob.start.q.copy()
    M, C = prob.M, prob.C
    sv = np.linspace(0.0, 1.5, M + 1)[1:]
    P = np.column_stack([sv[:-1], np.full(M - 1, prob.start.theta),
                         np.tile(qg0, (M - 1, 1))])
    e = np.concatenate([[sv[-1], prob.start.theta], qg0])
    tau = tr.time_transform(np.full(M, 4.0))  # generous time
    z = prob.pack(P, e, tau)
    parts = prob.objective_parts(z)
    assert parts["penalty"] == 0.0
    assert parts["jerk"] > 0.0
    assert abs(parts["total_time"] - 12.0) < 1e-9


# ---------- end-to-end multiplier loop ----------

def test_alm_reaches_goal_in_open_room():
    cfg = ob.OptimizerConfig(eq_tol=1e-4)
    prob, qg, gc = _make_problem(_empty_room(), goal_conf=(4.0, 2.5, 0.2), cfg=cfg)
    z0 = _initial_z(prob, qg, gc, T_seg=2.0)
    res = prob.solve(z0)
    assert res.status == "converged"
    assert np.max(np.abs(res.residual)) <= cfg.eq_tol
    traj = prob.build_trajectory(res.x)
    assert np.all(traj.durations > 0.0)
    # true (untightened) limits hold on a dense grid
    lim = prob.robot.limits
    ts = np.linspace(0.0, traj.total_time, 2000)
    vel = traj.eval_batch(ts, order=1)
    acc = traj.eval_batch(ts, order=2)
    val = traj.eval_batch(ts, order=0)
    assert np.max(np.abs(vel[:, 0]) / lim.v_max
                  + np.abs(vel[:, 1]) / lim.omega_max) <= 1.0 + 1e-3
    assert np.max(np.abs(acc[:, 0])) <= lim.a_max * (1 + 1e-3)
    assert np.max(np.abs(acc[:, 1])) <= lim.beta_max * (1 + 1e-3)
    assert np.max(np.abs(val[:, 2:]) / lim.q_max) <= 1.0 + 1e-3
    assert np.max(np.abs(vel[:, 2:]) / lim.dq_max) <= 1.0 + 1e-3
    assert np.max(np.abs(acc[:, 2:]) / lim.ddq_max) <= 1.0 + 1e-3
    ex, ey, th, q = prob._end_pose(traj)
    _, p = rb.forward_kinematics(prob.robot, (ex, ey, th), q)
    assert np.linalg.norm(p - prob.goal.position) < 5e-4


# ---------- config / goal serialization ----------

def test_config_json_round_trip(tmp_path):
    cfg = ob.OptimizerConfig(rho_time=33.0, k_samples=8, w_arm=5e3)
    path = tmp_path / "cfg.json"
    with open(path, "w") as f:
        json.dump(cfg.to_json_dict(), f)
    cfg2 = ob.load_config(path)
    assert cfg2.rho_time == 33.0 and cfg2.k_samples == 8 and cfg2.w_arm == 5e3
    assert cfg2.w_jerk == (1.0, 1.0, 1.0)
    with pytest.raises(KeyError):
        ob.OptimizerConfig.from_json_dict({"not_a_field": 1})


def test_goal_spec_json_and_rpy():
    g = ob.GoalSpec.from_xyz_rpy([1.0, 2.0, 0.8], [0.1, -0.2, 0.7])
    R = g.rotation
    assert np.max(np.abs(R @ R.T - np.eye(3))) < 1e-12
    g2 = ob.GoalSpec.from_json_dict(g.to_json_dict())
    assert np.max(np.abs(g2.rotation - g.rotation)) < 1e-15
    g3 = ob.GoalSpec.from_json_dict({"position": [0, 0, 1], "rpy": [0, 0, np.pi / 2]})
    assert abs(g3.rotation[1, 0] - 1.0) < 1e-12
