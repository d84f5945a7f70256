"""Whole-body trajectory objective with analytic gradients.

The decision vector stacks the interior waypoints, the free end values, and
unconstrained duration variables; joint entries are stored through the squash
transform so every variable is unconstrained. The cost is the weighted jerk
energy plus a total-time charge plus cubic-hinge penalties sampled along each
segment; the end-effector goal enters as a 9-dimensional equality residual
handled by an augmented-Lagrangian loop.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import optim as op
from . import robot as rb
from . import traj as tr
from . import world as wd

_EZ = np.array([0.0, 0.0, 1.0])


# ---------- configuration ----------

@dataclass
class OptimizerConfig:
    """Weights, sampling densities, margins, and solver knobs."""

    w_jerk: tuple = (1.0, 1.0, 1.0)  # s, heading, each joint
    rho_time: float = 20.0
    k_samples: int = 16
    n_quad_full: int = 32
    n_quad_part: int = 32
    w_drive: float = 6e5
    w_base_acc: float = 6e5
    w_joint_pos: float = 6e5
    w_joint_vel: float = 6e5
    w_joint_acc: float = 6e5
    w_obstacle: float = 6e5
    w_arm: float = 6e5
    w_self: float = 6e5
    margin_obs: float = 0.03   # meters, tightening on top of r_thr
    margin_dyn: float = 0.01   # fraction of each dynamic limit
    margin_self: float = 0.01  # meters of required self clearance
    sdf_cutoff: float = 0.5
    sigma0: float = 1e2
    sigma_scale: float = 5.0
    dec_factor: float = 0.5
    eq_tol: float = 1e-4
    g_tol: float = 1e-3
    max_outer: int = 16
    inner_iters: int = 120
    inner_f_tol: float = 1e-6  # relative decrease below which an inner pass stops
    memory: int = 16

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["w_jerk"] = list(self.w_jerk)
        return d

    @staticmethod
    def from_json_dict(d: dict) -> "OptimizerConfig":
        cfg = OptimizerConfig()
        for k, v in d.items():
            if not hasattr(cfg, k):
                raise KeyError(f"unknown config field: {k}")
            setattr(cfg, k, tuple(v) if k == "w_jerk" else v)
        return cfg


def load_config(path) -> OptimizerConfig:
    with open(path) as f:
        return OptimizerConfig.from_json_dict(json.load(f))


@dataclass
class GoalSpec:
    """Target end-effector pose in world coordinates."""

    position: np.ndarray
    rotation: np.ndarray  # (3, 3)

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.rotation = np.asarray(self.rotation, dtype=float)

    @staticmethod
    def from_xyz_rpy(xyz, rpy) -> "GoalSpec":
        return GoalSpec(position=np.asarray(xyz, dtype=float),
                        rotation=rb.rpy_matrix(rpy))

    def to_json_dict(self) -> dict:
        return {"position": [float(v) for v in self.position],
                "rotation": [[float(v) for v in row] for row in self.rotation]}

    @staticmethod
    def from_json_dict(d: dict) -> "GoalSpec":
        if "rpy" in d and "rotation" not in d:
            return GoalSpec.from_xyz_rpy(d["position"], d["rpy"])
        return GoalSpec(position=np.asarray(d["position"], dtype=float),
                        rotation=np.asarray(d["rotation"], dtype=float))


# ---------- pieces ----------

def _cross3(a, b):
    """Cross product along the last axis; avoids np.cross dispatch overhead."""
    a, b = np.broadcast_arrays(a, b)
    out = np.empty(a.shape)
    out[..., 0] = a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1]
    out[..., 1] = a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2]
    out[..., 2] = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    return out


def hinge(x):
    """Cubic one-sided penalty: value max(x,0)^3 and its derivative."""
    h = np.maximum(x, 0.0)
    return h ** 3, 3.0 * h ** 2


def jerk_energy(coeffs, durations, weights):
    """Closed-form per-channel jerk integral of quintic segments.

    Returns (total, d/dcoeffs, d/ddurations), all weighted per channel.
    """
    c = np.asarray(coeffs, dtype=float)
    T = np.asarray(durations, dtype=float)
    w = np.asarray(weights, dtype=float)
    c3, c4, c5 = c[:, 3, :], c[:, 4, :], c[:, 5, :]
    T1 = T[:, None]
    T2, T3, T4, T5 = T1 ** 2, T1 ** 3, T1 ** 4, T1 ** 5
    E = (36 * c3 ** 2 * T1 + 144 * c3 * c4 * T2
         + (192 * c4 ** 2 + 240 * c3 * c5) * T3
         + 720 * c4 * c5 * T4 + 720 * c5 ** 2 * T5)
    dc = np.zeros_like(c)
    dc[:, 3, :] = w * (72 * c3 * T1 + 144 * c4 * T2 + 240 * c5 * T3)
    dc[:, 4, :] = w * (144 * c3 * T2 + 384 * c4 * T3 + 720 * c5 * T4)
    dc[:, 5, :] = w * (240 * c3 * T3 + 720 * c4 * T4 + 1440 * c5 * T5)
    jerk_T = 6 * c3 + 24 * c4 * T1 + 60 * c5 * T2
    dT = np.sum(w * jerk_T ** 2, axis=1)
    return float(np.sum(w * E)), dc, dT


def pack_decision(P, e, tau, q_max) -> np.ndarray:
    """Flatten (waypoints, end values, duration variables) with squashed joints."""
    P = np.asarray(P, dtype=float).copy()
    e = np.asarray(e, dtype=float).copy()
    if P.size:
        P[:, 2:] = tr.joint_squash(P[:, 2:], q_max)
    e = e.copy()
    e[2:] = tr.joint_squash(e[2:], q_max)
    return np.concatenate([P.ravel(), e, np.asarray(tau, dtype=float)])


def unpack_decision(z, n_segments, n_channels, q_max):
    """Inverse of pack_decision; returns physical (P, e, tau)."""
    M, C = n_segments, n_channels
    nP = (M - 1) * C
    P = np.asarray(z[:nP], dtype=float).reshape(M - 1, C).copy()
    e = np.asarray(z[nP:nP + C], dtype=float).copy()
    tau = np.asarray(z[nP + C:], dtype=float).copy()
    if P.size:
        P[:, 2:] = tr.joint_unsquash(P[:, 2:], q_max)
    e[2:] = tr.joint_unsquash(e[2:], q_max)
    return P, e, tau


# ---------- problem ----------

class WholeBodyProblem:
    """Everything needed to evaluate and solve one planning instance.

    The base grid is expected to be inflated by the platform cylinder radius
    and band-filtered to the cylinder height, so the residual base clearance
    threshold is r_thr[0] plus the obstacle margin.
    """

    def __init__(self, robot: rb.RobotModel, scenario: wd.Scenario,
                 grid: wd.GridEsdf, start: rb.WholeBodyState, goal: GoalSpec,
                 n_segments: int, config: Optional[OptimizerConfig] = None,
                 start_rates: Optional[np.ndarray] = None):
        self.robot = robot
        self.scenario = scenario
        self.grid = grid
        self.start = start
        self.goal = goal
        self.M = int(n_segments)
        self.cfg = config if config is not None else OptimizerConfig()
        self.N = robot.n_joints
        self.C = self.N + 2
        lim = robot.limits
        self.q_max = lim.q_max
        self.w_ch = np.concatenate([[self.cfg.w_jerk[0], self.cfg.w_jerk[1]],
                                    np.full(self.N, self.cfg.w_jerk[2])])
        self.start_state = np.zeros((3, self.C))
        self.start_state[0, 0] = 0.0
        self.start_state[0, 1] = start.theta
        self.start_state[0, 2:] = start.q
        if start_rates is not None:
            # rows: (ds, dtheta, dq) and (dds, ddtheta, ddq) at t = 0
            self.start_state[1:] = np.asarray(start_rates, dtype=float)
        self.x0, self.y0 = float(start.x), float(start.y)
        col = robot.collision
        self.thr_base = col.r_thr[0] + self.cfg.margin_obs
        self.thr_sph = np.asarray(col.r_thr[1:], dtype=float) + self.cfg.margin_obs
        links = np.array([sp.link for sp in col.spheres], dtype=int)
        self.anc = (np.arange(self.N)[None, :] <= links[:, None]).astype(float)  # (S, N)
        self.sph_links = links
        self.sdf = scenario.sdf()
        cyl_m, pa, pb = [], [], []
        for (i, j) in col.self_pairs:
            if i == 0 or j == 0:
                cyl_m.append((j if i == 0 else i) - 1)
            else:
                pa.append(i - 1)
                pb.append(j - 1)
        self._cyl_m = np.asarray(cyl_m, dtype=int)
        self._pair_a = np.asarray(pa, dtype=int)
        self._pair_b = np.asarray(pb, dtype=int)
        self._rad = np.asarray([sp.radius for sp in col.spheres], dtype=float)

    # ----- packing -----

    @property
    def n_vars(self) -> int:
        return (self.M - 1) * self.C + self.C + self.M

    def pack(self, P, e, tau) -> np.ndarray:
        return pack_decision(P, e, tau, self.q_max)

    def unpack(self, z):
        return unpack_decision(z, self.M, self.C, self.q_max)

    def build_trajectory(self, z) -> tr.WholeBodyTrajectory:
        P, e, tau = self.unpack(z)
        T = tr.time_transform_inv(tau)
        end_state = np.zeros((3, self.C))
        end_state[0] = e
        return tr.solve_coefficients(P, self.start_state, end_state, T,
                                     self.x0, self.y0)

    # ----- residual -----

    def _end_pose(self, traj: tr.WholeBodyTrajectory):
        c = traj.coeffs
        (ex, ey) = rb.flat_position(c[:, :, 0], c[:, :, 1], traj.durations,
                                    float(np.sum(traj.durations)),
                                    self.x0, self.y0, n_sub=self.cfg.n_quad_full)
        e = traj.eval(float(np.sum(traj.durations)), order=0)
        return float(ex), float(ey), float(e[1]), e[2:]

    def residual(self, z) -> np.ndarray:
        traj = self.build_trajectory(z)
        ex, ey, th, q = self._end_pose(traj)
        kin = rb.BatchKinematics(self.robot, [ex], [ey], [th], q[None, :])
        return self._residual_from_kin(kin)

    def _residual_from_kin(self, kin, idx: int = 0) -> np.ndarray:
        p = kin.ee_t[idx]
        R = kin.ee_R[idx]
        G = self.goal.rotation
        return np.concatenate([p - self.goal.position,
                               R[:, 0] - G[:, 0], R[:, 1] - G[:, 1]])

    # ----- evaluation -----

    def augmented(self, z, lam, sigma):
        """Value and gradient of cost + lam.r + sigma/2 |r|^2 at z."""
        f, grad, _ = self._evaluate(z, np.asarray(lam, dtype=float), float(sigma))
        return f, grad

    def objective_parts(self, z) -> dict:
        _, _, parts = self._evaluate(z, np.zeros(9), 0.0)
        return parts

    def objective(self, z) -> float:
        p = self.objective_parts(z)
        return p["jerk"] + p["time"] + p["penalty"]

    def _evaluate(self, z, lam, sigma):
        cfg = self.cfg
        M, C, N, K = self.M, self.C, self.N, cfg.k_samples
        lim = self.robot.limits
        col = self.robot.collision
        P, e, tau = self.unpack(z)
        T = tr.time_transform_inv(tau)
        end_state = np.zeros((3, C))
        end_state[0] = e
        traj = tr.solve_coefficients(P, self.start_state, end_state, T,
                                     self.x0, self.y0)
        cf = traj.coeffs
        if not np.isfinite(cf).all():
            # extreme trial step (line search probing); report +inf so it backs off
            return np.inf, np.zeros(self.n_vars), {"diverged": True}
        quad = rb.FlatOutputQuadrature(cf[:, :, 0], cf[:, :, 1], T, self.x0,
                                       self.y0, K, cfg.n_quad_full, cfg.n_quad_part)

        eta = np.arange(K) / K
        tt = T[:, None] * eta[None, :]                       # (M, K)
        V0 = tr.poly_basis(tt, 0)                            # (M, K, 6)
        V1 = tr.poly_basis(tt, 1)
        V2 = tr.poly_basis(tt, 2)
        V3 = tr.poly_basis(tt, 3)
        vals = V0 @ cf
        vels = V1 @ cf
        accs = V2 @ cf
        jrks = V3 @ cf

        A0 = np.zeros((M, K, C))
        A1 = np.zeros((M, K, C))
        A2 = np.zeros((M, K, C))
        pen = np.zeros((M, K))
        gx = np.zeros((M, K))
        gy = np.zeros((M, K))
        shrink = 1.0 - cfg.margin_dyn

        # drive window: |v|/v_max + |w|/w_max <= 1, as four half-planes
        v = vels[:, :, 0]
        w = vels[:, :, 1]
        for sv in (1.0, -1.0):
            for sw in (1.0, -1.0):
                gval, gder = hinge(sv * v / lim.v_max + sw * w / lim.omega_max
                                   - shrink)
                pen += cfg.w_drive * gval
                A1[:, :, 0] += cfg.w_drive * gder * (sv / lim.v_max)
                A1[:, :, 1] += cfg.w_drive * gder * (sw / lim.omega_max)

        # translational and heading acceleration bounds
        for ch, amx in ((0, lim.a_max), (1, lim.beta_max)):
            a = accs[:, :, ch]
            gval, gder = hinge((a / amx) ** 2 - shrink ** 2)
            pen += cfg.w_base_acc * gval
            A2[:, :, ch] += cfg.w_base_acc * gder * 2.0 * a / amx ** 2

        # joint position / velocity / acceleration boxes
        for arr, Acc, lim_vec, wgt in ((vals, A0, self.q_max, cfg.w_joint_pos),
                                       (vels, A1, lim.dq_max, cfg.w_joint_vel),
                                       (accs, A2, lim.ddq_max, cfg.w_joint_acc)):
            u = arr[:, :, 2:] / lim_vec
            gval, gder = hinge(u ** 2 - shrink ** 2)
            pen += wgt * np.sum(gval, axis=2)
            Acc[:, :, 2:] += wgt * gder * 2.0 * u / lim_vec

        # platform clearance against the inflated grid; the threshold grows by
        # the worst between-sample excursion (0.5 v_max T_j / K) so sampled
        # clearance certifies the continuous path, which makes the hinge
        # depend on T_j explicitly (extra dT term folded in below)
        base_pts = np.stack([quad.xs.ravel(), quad.ys.ravel()], axis=1)
        dg, grad2, _ = wd.esdf_query_batch(self.grid, base_pts)
        thr_j = self.thr_base + 0.5 * lim.v_max * T / K
        gval, gder = hinge(thr_j[:, None] - dg.reshape(M, K))
        pen += cfg.w_obstacle * gval
        gder_f = gder.ravel()
        gx += (cfg.w_obstacle * gder_f * -grad2[:, 0]).reshape(M, K)
        gy += (cfg.w_obstacle * gder_f * -grad2[:, 1]).reshape(M, K)
        dpen_dT = cfg.w_obstacle * np.sum(gder, axis=1) * (0.5 * lim.v_max / K)

        # arm spheres against the box field; self-collision pairs. The end
        # state rides along as one extra kinematics row for the goal residual.
        th_flat = vals[:, :, 1].ravel()
        q_flat = vals[:, :, 2:].reshape(M * K, N)
        kin = rb.BatchKinematics(self.robot,
                                 np.append(quad.xs.ravel(), quad.end_x),
                                 np.append(quad.ys.ravel(), quad.end_y),
                                 np.append(th_flat, e[1]),
                                 np.vstack([q_flat, e[2:][None, :]]))
        S = len(col.spheres)
        dq_acc = np.zeros((M * K, N))
        if S:
            cen = kin.sphere_centers[:-1]                     # (MK, S, 3)
            cyl_pt = kin.cyl_point[:-1]
            ds, gs = self.sdf.query_batch(cen.reshape(-1, 3), cutoff=cfg.sdf_cutoff)
            ds = ds.reshape(M * K, S)
            gs = gs.reshape(M * K, S, 3)
            gval, gder = hinge(self.thr_sph[None, :] - ds)
            pen += cfg.w_arm * np.sum(gval, axis=1).reshape(M, K)
            gvec = (cfg.w_arm * gder)[:, :, None] * -gs       # dcost/dcenter
            gx += np.sum(gvec[:, :, 0], axis=1).reshape(M, K)
            gy += np.sum(gvec[:, :, 1], axis=1).reshape(M, K)
            relb = cen - kin.base_origin[:-1, None, :]
            A0[:, :, 1] += (np.sum(gvec[:, :, 0] * -relb[:, :, 1]
                                   + gvec[:, :, 1] * relb[:, :, 0], axis=1)
                            ).reshape(M, K)
            cross = _cross3(kin.joint_axis[:-1, None, :, :],
                            cen[:, :, None, :] - kin.joint_origin[:-1, None, :, :])
            dq_acc += np.einsum("psnc,psc,sn->pn", cross, gvec, self.anc)

            if len(self._cyl_m):
                half_h = col.cylinder_height / 2
                mi = self._cyl_m
                cm = cen[:, mi, :]                            # (MK, nc, 3)
                lo = (cyl_pt[:, 2] - half_h)[:, None]
                tcl = np.clip(cm[:, :, 2] - lo, 0.0, col.cylinder_height)
                delta = cm - cyl_pt[:, None, :]
                delta[:, :, 2] = cm[:, :, 2] - (lo + tcl)
                d = np.linalg.norm(delta, axis=2)
                clear = d - col.cylinder_radius - self._rad[mi]
                gval, gder = hinge(cfg.margin_self - clear)
                pen += cfg.w_self * np.sum(gval, axis=1).reshape(M, K)
                u = delta / np.maximum(d, 1e-12)[:, :, None]
                gc = (cfg.w_self * gder)[:, :, None] * -u
                dq_acc += np.einsum("pmnc,pmc,mn->pn", cross[:, mi], gc,
                                    self.anc[mi])
            if len(self._pair_a):
                a, b = self._pair_a, self._pair_b
                delta = cen[:, a, :] - cen[:, b, :]
                d = np.linalg.norm(delta, axis=2)
                clear = d - self._rad[a] - self._rad[b]
                gval, gder = hinge(cfg.margin_self - clear)
                pen += cfg.w_self * np.sum(gval, axis=1).reshape(M, K)
                u = delta / np.maximum(d, 1e-12)[:, :, None]
                gc = (cfg.w_self * gder)[:, :, None] * -u
                dq_acc += (np.einsum("pmnc,pmc,mn->pn", cross[:, a], gc,
                                     self.anc[a])
                           - np.einsum("pmnc,pmc,mn->pn", cross[:, b], gc,
                                       self.anc[b]))
        A0[:, :, 2:] += dq_acc.reshape(M, K, N)

        # fold: scale penalty accumulators by the T_j/K quadrature weight
        E, dJ_dc, dT = jerk_energy(cf, T, self.w_ch)
        scale = (T / K)[:, None]
        f_pen = float(np.sum(scale * pen))
        dT = dT + cfg.rho_time + np.sum(pen, axis=1) / K + (T / K) * dpen_dT
        A0 *= scale[:, :, None]
        A1 *= scale[:, :, None]
        A2 *= scale[:, :, None]
        dJ_dc += (V0.transpose(0, 2, 1) @ A0
                  + V1.transpose(0, 2, 1) @ A1
                  + V2.transpose(0, 2, 1) @ A2)
        dT += np.sum((np.sum(A0 * vels, axis=2)
                      + np.sum(A1 * accs, axis=2)
                      + np.sum(A2 * jrks, axis=2)) * eta[None, :], axis=1)
        quad.add_sample_grad(gx * scale, gy * scale)

        # goal residual at the end state (last kinematics row)
        r = self._residual_from_kin(kin, idx=-1)
        nu = lam + sigma * r
        f_res = float(lam @ r) + 0.5 * sigma * float(r @ r)
        quad.add_end_grad(nu[0], nu[1])
        de_direct = np.zeros(C)
        p_ee = kin.ee_t[-1]
        R_ee = kin.ee_R[-1]
        cols = (R_ee[:, 0], R_ee[:, 1])
        rel = p_ee - kin.base_origin[-1]
        de_direct[1] = (nu[0:3] @ _cross3(_EZ, rel)
                        + nu[3:6] @ _cross3(_EZ, cols[0])
                        + nu[6:9] @ _cross3(_EZ, cols[1]))
        axs = kin.joint_axis[-1]                              # (N, 3)
        ois = kin.joint_origin[-1]
        de_direct[2:] = (_cross3(axs, p_ee[None, :] - ois) @ nu[0:3]
                         + _cross3(axs, cols[0][None, :]) @ nu[3:6]
                         + _cross3(axs, cols[1][None, :]) @ nu[6:9])

        dcs_q, dcth_q, dT_q = quad.fold()
        dJ_dc[:, :, 0] += dcs_q
        dJ_dc[:, :, 1] += dcth_q
        dT += dT_q

        finite = (np.isfinite(E) and np.isfinite(f_pen) and np.isfinite(f_res)
                  and np.isfinite(dJ_dc).all() and np.isfinite(dT).all())
        if not finite:
            return np.inf, np.zeros(self.n_vars), {"diverged": True}
        dP, de, dT_full = tr.propagate_gradients(traj, dJ_dc, dJ_dT_direct=dT)
        de = de + de_direct

        # map physical gradients back to the packed variables
        nP = (M - 1) * C
        grad = np.empty(self.n_vars)
        if nP:
            zP = z[:nP].reshape(M - 1, C)
            dP = dP.copy()
            dP[:, 2:] *= tr.joint_unsquash_deriv(zP[:, 2:], self.q_max)
            grad[:nP] = dP.ravel()
        ze = z[nP:nP + C]
        de = de.copy()
        de[2:] *= tr.joint_unsquash_deriv(ze[2:], self.q_max)
        grad[nP:nP + C] = de
        grad[nP + C:] = dT_full * tr.time_transform_inv_deriv(tau)

        f_time = cfg.rho_time * float(np.sum(T))
        f = E + f_time + f_pen + f_res
        parts = {"jerk": E, "time": f_time, "penalty": f_pen,
                 "residual_norm": float(np.linalg.norm(r)),
                 "total_time": float(np.sum(T))}
        return f, grad, parts

    # ----- driver -----

    def solve(self, z0, lam0=None, deadline: Optional[float] = None) -> op.AlmResult:
        cfg = self.cfg
        return op.alm_minimize(self.augmented, self.residual, z0, n_eq=9,
                               lam0=lam0, sigma0=cfg.sigma0,
                               sigma_scale=cfg.sigma_scale,
                               dec_factor=cfg.dec_factor, eq_tol=cfg.eq_tol,
                               g_tol=cfg.g_tol, max_outer=cfg.max_outer,
                               inner_iters=cfg.inner_iters, memory=cfg.memory,
                               deadline=deadline, inner_f_tol=cfg.inner_f_tol)
