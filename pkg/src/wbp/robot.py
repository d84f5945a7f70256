"""Differential-drive base + serial arm: kinematics, collision geometry, flat output.

The base contributes (x, y, theta); the planar position is not a free variable but
the integral of (s' cos theta, s' sin theta), evaluated here by composite Simpson
quadrature over the piecewise quintic channels. All kinematic quantities come with
the partial derivatives needed by the trajectory optimizer.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .traj import poly_basis

_EZ = np.array([0.0, 0.0, 1.0])


# ---------- small rotation helpers ----------

def rpy_matrix(rpy) -> np.ndarray:
    r, p, y = float(rpy[0]), float(rpy[1]), float(rpy[2])
    cr, sr = np.cos(r), np.sin(r)
    cp, sp = np.cos(p), np.sin(p)
    cy, sy = np.cos(y), np.sin(y)
    return np.array([
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp, cp * sr, cp * cr],
    ])


def _rotz_batch(th: np.ndarray) -> np.ndarray:
    c, s = np.cos(th), np.sin(th)
    R = np.zeros(th.shape + (3, 3))
    R[..., 0, 0] = c
    R[..., 0, 1] = -s
    R[..., 1, 0] = s
    R[..., 1, 1] = c
    R[..., 2, 2] = 1.0
    return R


def _axis_rot_batch(axis: np.ndarray, ang: np.ndarray) -> np.ndarray:
    """Rodrigues rotation about a fixed unit axis for a batch of angles."""
    a = np.asarray(axis, dtype=float)
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    KK = K @ K
    c = np.cos(ang)[..., None, None]
    s = np.sin(ang)[..., None, None]
    return np.eye(3) + s * K + (1.0 - c) * KK


# ---------- model types ----------

@dataclass
class Joint:
    axis: np.ndarray
    origin_xyz: np.ndarray
    origin_rpy: np.ndarray

    def __post_init__(self):
        self.axis = np.asarray(self.axis, dtype=float)
        n = np.linalg.norm(self.axis)
        if n == 0:
            raise ValueError("joint axis must be nonzero")
        self.axis = self.axis / n
        self.origin_xyz = np.asarray(self.origin_xyz, dtype=float)
        self.origin_rpy = np.asarray(self.origin_rpy, dtype=float)
        self._R = rpy_matrix(self.origin_rpy)


@dataclass
class DynamicLimits:
    v_max: float
    omega_max: float
    a_max: float
    beta_max: float
    q_max: np.ndarray
    dq_max: np.ndarray
    ddq_max: np.ndarray

    def __post_init__(self):
        self.q_max = np.asarray(self.q_max, dtype=float)
        self.dq_max = np.asarray(self.dq_max, dtype=float)
        self.ddq_max = np.asarray(self.ddq_max, dtype=float)


@dataclass
class SphereSpec:
    link: int  # 0-based joint index whose frame carries the sphere
    offset: np.ndarray
    radius: float

    def __post_init__(self):
        self.offset = np.asarray(self.offset, dtype=float)


@dataclass
class CollisionModel:
    """Base cylinder + arm spheres.

    Collision point 0 is the cylinder axis point (checked against the 2D grid);
    points 1.. are the sphere centers (checked against the 3D box field). r_thr
    holds one threshold per collision point in that order. self_pairs index into
    the same list; a pair containing 0 is a cylinder-vs-sphere check.
    """

    cylinder_radius: float
    cylinder_height: float
    cylinder_offset: np.ndarray
    spheres: list
    self_pairs: list
    r_thr: np.ndarray

    def __post_init__(self):
        self.cylinder_offset = np.asarray(self.cylinder_offset, dtype=float)
        self.r_thr = np.asarray(self.r_thr, dtype=float)
        if len(self.r_thr) != 1 + len(self.spheres):
            raise ValueError("r_thr length must be 1 + number of spheres")


@dataclass
class WholeBodyState:
    x: float
    y: float
    theta: float
    q: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)

    def to_json_dict(self) -> dict:
        return {"x": float(self.x), "y": float(self.y), "theta": float(self.theta),
                "q": [float(v) for v in self.q]}

    @staticmethod
    def from_json_dict(d: dict) -> "WholeBodyState":
        return WholeBodyState(float(d["x"]), float(d["y"]), float(d["theta"]),
                              np.asarray(d["q"], dtype=float))


@dataclass
class RobotModel:
    joints: list
    mount_xyz: np.ndarray
    mount_rpy: np.ndarray
    ee_xyz: np.ndarray
    ee_rpy: np.ndarray
    limits: DynamicLimits
    collision: CollisionModel

    def __post_init__(self):
        self.mount_xyz = np.asarray(self.mount_xyz, dtype=float)
        self.mount_rpy = np.asarray(self.mount_rpy, dtype=float)
        self.ee_xyz = np.asarray(self.ee_xyz, dtype=float)
        self.ee_rpy = np.asarray(self.ee_rpy, dtype=float)
        self._mount_R = rpy_matrix(self.mount_rpy)
        self._ee_R = rpy_matrix(self.ee_rpy)

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def n_collision_points(self) -> int:
        return 1 + len(self.collision.spheres)

    def to_json_dict(self) -> dict:
        col = self.collision
        return {
            "joints": [
                {"axis": list(map(float, j.axis)),
                 "origin_xyz": list(map(float, j.origin_xyz)),
                 "origin_rpy": list(map(float, j.origin_rpy))}
                for j in self.joints
            ],
            "mount": {"origin_xyz": list(map(float, self.mount_xyz)),
                      "origin_rpy": list(map(float, self.mount_rpy))},
            "ee_offset": {"origin_xyz": list(map(float, self.ee_xyz)),
                          "origin_rpy": list(map(float, self.ee_rpy))},
            "limits": {
                "v_max": self.limits.v_max, "omega_max": self.limits.omega_max,
                "a_max": self.limits.a_max, "beta_max": self.limits.beta_max,
                "q_max": list(map(float, self.limits.q_max)),
                "dq_max": list(map(float, self.limits.dq_max)),
                "ddq_max": list(map(float, self.limits.ddq_max)),
            },
            "collision": {
                "cylinder": {"radius": col.cylinder_radius, "height": col.cylinder_height,
                             "offset": list(map(float, col.cylinder_offset))},
                "spheres": [
                    {"link": sp.link, "offset": list(map(float, sp.offset)),
                     "radius": sp.radius} for sp in col.spheres
                ],
                "self_pairs": [[int(a), int(b)] for a, b in col.self_pairs],
                "r_thr": list(map(float, col.r_thr)),
            },
        }

    @staticmethod
    def from_json_dict(d: dict) -> "RobotModel":
        joints = [Joint(j["axis"], j["origin_xyz"], j["origin_rpy"]) for j in d["joints"]]
        lim = d["limits"]
        col = d["collision"]
        cyl = col["cylinder"]
        return RobotModel(
            joints=joints,
            mount_xyz=d["mount"]["origin_xyz"], mount_rpy=d["mount"]["origin_rpy"],
            ee_xyz=d["ee_offset"]["origin_xyz"], ee_rpy=d["ee_offset"]["origin_rpy"],
            limits=DynamicLimits(
                v_max=float(lim["v_max"]), omega_max=float(lim["omega_max"]),
                a_max=float(lim["a_max"]), beta_max=float(lim["beta_max"]),
                q_max=lim["q_max"], dq_max=lim["dq_max"], ddq_max=lim["ddq_max"]),
            collision=CollisionModel(
                cylinder_radius=float(cyl["radius"]), cylinder_height=float(cyl["height"]),
                cylinder_offset=cyl["offset"],
                spheres=[SphereSpec(int(s["link"]), s["offset"], float(s["radius"]))
                         for s in col["spheres"]],
                self_pairs=[tuple(p) for p in col["self_pairs"]],
                r_thr=col["r_thr"]),
        )


def load_robot(path) -> RobotModel:
    with open(path) as f:
        return RobotModel.from_json_dict(json.load(f))


def save_robot(robot: RobotModel, path) -> None:
    with open(path, "w") as f:
        json.dump(robot.to_json_dict(), f, indent=2, sort_keys=True)


def default_robot() -> RobotModel:
    """Six-joint arm on a cylindrical differential-drive base."""
    joints = [
        Joint([0, 0, 1], [0.0, 0.0, 0.05], [0, 0, 0]),
        Joint([0, 1, 0], [0.0, 0.0, 0.08], [0, 0, 0]),
        Joint([0, 1, 0], [0.0, 0.0, 0.32], [0, 0, 0]),
        Joint([0, 1, 0], [0.0, 0.0, 0.28], [0, 0, 0]),
        Joint([0, 0, 1], [0.0, 0.0, 0.10], [0, 0, 0]),
        Joint([0, 1, 0], [0.0, 0.0, 0.08], [0, 0, 0]),
    ]
    spheres = [
        SphereSpec(0, [0.0, 0.0, 0.04], 0.10),
        SphereSpec(1, [0.0, 0.0, 0.10], 0.07),
        SphereSpec(1, [0.0, 0.0, 0.24], 0.07),
        SphereSpec(2, [0.0, 0.0, 0.09], 0.06),
        SphereSpec(2, [0.0, 0.0, 0.21], 0.06),
        SphereSpec(3, [0.0, 0.0, 0.05], 0.055),
        SphereSpec(4, [0.0, 0.0, 0.04], 0.05),
        SphereSpec(5, [0.0, 0.0, 0.03], 0.05),
        SphereSpec(5, [0.0, 0.0, 0.09], 0.05),
    ]
    # base cylinder vs distal spheres, plus widely separated link pairs
    self_pairs = [(0, m) for m in (4, 5, 6, 7, 8, 9)]
    self_pairs += [(1, m) for m in (6, 7, 8, 9)]
    self_pairs += [(2, m) for m in (6, 7, 8, 9)] + [(3, m) for m in (6, 7, 8, 9)]
    radii = [sp.radius for sp in spheres]
    return RobotModel(
        joints=joints,
        mount_xyz=[0.0, 0.0, 0.40], mount_rpy=[0, 0, 0],
        ee_xyz=[0.0, 0.0, 0.10], ee_rpy=[0, 0, 0],
        limits=DynamicLimits(
            v_max=1.0, omega_max=1.5, a_max=1.5, beta_max=2.5,
            q_max=[np.pi, 1.9, 2.3, np.pi, 2.0, np.pi],
            dq_max=[2.0, 2.0, 2.0, 2.5, 2.5, 2.5],
            ddq_max=[8.0, 8.0, 8.0, 10.0, 10.0, 10.0]),
        collision=CollisionModel(
            cylinder_radius=0.30, cylinder_height=0.40,
            cylinder_offset=[0.0, 0.0, 0.20],
            spheres=spheres, self_pairs=self_pairs,
            r_thr=np.concatenate(([0.02], radii))),
    )


# ---------- forward kinematics ----------

class BatchKinematics:
    """Chain frames, sphere centers and Jacobian ingredients at a batch of samples.

    All arrays are leading-axis batched: x, y, th are (P,), q is (P, N). Exposes
    joint world origins/axes so that point Jacobians can be formed as
    dw/dq_i = a_i x (w - p_i) and dw/dtheta = e_z x (w - base).
    """

    def __init__(self, robot: RobotModel, x, y, th, q):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        th = np.atleast_1d(np.asarray(th, dtype=float))
        q = np.atleast_2d(np.asarray(q, dtype=float))
        P, N = q.shape
        Rb = _rotz_batch(th)
        tb = np.stack([x, y, np.zeros_like(x)], axis=-1)
        self.base_origin = tb
        self.base_R = Rb

        R = Rb @ robot._mount_R
        t = tb + Rb @ robot.mount_xyz
        self.joint_origin = np.empty((P, N, 3))
        self.joint_axis = np.empty((P, N, 3))
        link_R = np.empty((P, N + 1, 3, 3))
        link_t = np.empty((P, N + 1, 3))
        link_R[:, 0] = R
        link_t[:, 0] = t
        for i, jnt in enumerate(robot.joints):
            Rf = R @ jnt._R
            tf = t + R @ jnt.origin_xyz
            self.joint_origin[:, i] = tf
            self.joint_axis[:, i] = Rf @ jnt.axis
            Rq = _axis_rot_batch(jnt.axis, q[:, i])
            R = Rf @ Rq
            t = tf
            link_R[:, i + 1] = R
            link_t[:, i + 1] = t
        self.link_R = link_R
        self.link_t = link_t
        self.ee_R = R @ robot._ee_R
        self.ee_t = t + R @ robot.ee_xyz

        col = robot.collision
        S = len(col.spheres)
        self.sphere_centers = np.empty((P, S, 3))
        self.sphere_links = np.array([sp.link for sp in col.spheres], dtype=int)
        for m, sp in enumerate(col.spheres):
            fr = sp.link + 1
            self.sphere_centers[:, m] = link_t[:, fr] + link_R[:, fr] @ sp.offset
        self.cyl_point = tb + Rb @ col.cylinder_offset


def forward_kinematics(robot: RobotModel, base, q) -> tuple[np.ndarray, np.ndarray]:
    """End-effector pose for base = (x, y, theta) and joint vector q.

    Returns (R, p): a rotation matrix and position in the world frame.
    """
    x, y, th = base
    kin = BatchKinematics(robot, [x], [y], [th], np.asarray(q, dtype=float)[None, :])
    return kin.ee_R[0], kin.ee_t[0]


def collision_points(robot: RobotModel, base, q) -> np.ndarray:
    """World positions of all collision points, cylinder axis point first.

    Row order matches collision.r_thr.
    """
    x, y, th = base
    kin = BatchKinematics(robot, [x], [y], [th], np.asarray(q, dtype=float)[None, :])
    return np.vstack([kin.cyl_point[0:1], kin.sphere_centers[0]])


def _point_segment_distance(p, a, b):
    ab = b - a
    denom = float(ab @ ab)
    s = 0.0 if denom == 0.0 else float(np.clip((p - a) @ ab / denom, 0.0, 1.0))
    return float(np.linalg.norm(p - (a + s * ab)))


def self_collision_distances(robot: RobotModel, q) -> np.ndarray:
    """Clearance of each configured self-collision pair at base identity.

    Positive = separated; negative = penetrating. Cylinder pairs measure distance
    from the sphere center to the cylinder axis segment minus both radii.
    """
    col = robot.collision
    kin = BatchKinematics(robot, [0.0], [0.0], [0.0],
                          np.asarray(q, dtype=float)[None, :])
    centers = kin.sphere_centers[0]
    radii = np.array([sp.radius for sp in col.spheres])
    cyl_c = col.cylinder_offset
    a = np.array([cyl_c[0], cyl_c[1], cyl_c[2] - col.cylinder_height / 2])
    b = np.array([cyl_c[0], cyl_c[1], cyl_c[2] + col.cylinder_height / 2])
    out = np.empty(len(col.self_pairs))
    for k, (i, j) in enumerate(col.self_pairs):
        if i == 0 or j == 0:
            m = j - 1 if i == 0 else i - 1
            d = _point_segment_distance(centers[m], a, b)
            out[k] = d - col.cylinder_radius - radii[m]
        else:
            d = float(np.linalg.norm(centers[i - 1] - centers[j - 1]))
            out[k] = d - radii[i - 1] - radii[j - 1]
    return out


# ---------- flat-output quadrature ----------

def _simpson_sigma(n: int) -> np.ndarray:
    if n % 2 != 0 or n < 2:
        raise ValueError("Simpson rule needs an even, positive sub-interval count")
    s = np.ones(n + 1)
    s[1:-1:2] = 4.0
    s[2:-1:2] = 2.0
    return s


def _leg_integral(cs, cth, L, n_sub):
    """Simpson integral of (s' cos th, s' sin th) over [0, L] of one segment.

    Returns (Ix, Iy, dIx_dcs, dIx_dcth, dIy_dcs, dIy_dcth, dIx_dL, dIy_dL).
    """
    if L <= 0.0:
        z = np.zeros(6)
        return 0.0, 0.0, z, z.copy(), z.copy(), z.copy(), 0.0, 0.0
    sig = _simpson_sigma(n_sub)
    tt = np.linspace(0.0, L, n_sub + 1)
    w = (L / (3.0 * n_sub)) * sig
    b0 = poly_basis(tt, 0)
    b1 = poly_basis(tt, 1)
    b2 = poly_basis(tt, 2)
    sd = b1 @ cs
    sdd = b2 @ cs
    th = b0 @ cth
    thd = b1 @ cth
    c, s = np.cos(th), np.sin(th)
    Ix = float(np.sum(w * sd * c))
    Iy = float(np.sum(w * sd * s))
    dIx_dcs = (w * c) @ b1
    dIy_dcs = (w * s) @ b1
    dIx_dcth = (-(w * sd * s)) @ b0
    dIy_dcth = (w * sd * c) @ b0
    fpx = sdd * c - sd * thd * s
    fpy = sdd * s + sd * thd * c
    dIx_dL = (Ix + float(np.sum(w * fpx * tt))) / L
    dIy_dL = (Iy + float(np.sum(w * fpy * tt))) / L
    return Ix, Iy, dIx_dcs, dIx_dcth, dIy_dcs, dIy_dcth, dIx_dL, dIy_dL


def flat_position(s_coeffs, th_coeffs, durations, t, x0=0.0, y0=0.0,
                  n_sub: int = 32, with_grad: bool = False):
    """Planar base position at time t from the flat channels.

    Parameters
    ----------
    s_coeffs, th_coeffs : (M, 6) per-segment quintic coefficients.
    durations : (M,) segment durations.
    t : query time, clamped into [0, sum(durations)].
    n_sub : Simpson sub-intervals per integration leg.

    With with_grad=True also returns a dict of partials with respect to both
    coefficient blocks and the durations.
    """
    s_coeffs = np.asarray(s_coeffs, dtype=float)
    th_coeffs = np.asarray(th_coeffs, dtype=float)
    T = np.asarray(durations, dtype=float)
    M = len(T)
    ct = np.concatenate(([0.0], np.cumsum(T)))
    tc = float(np.clip(t, 0.0, ct[-1]))
    j = min(max(int(np.searchsorted(ct, tc, side="right") - 1), 0), M - 1)
    u = tc - ct[j]

    x, y = float(x0), float(y0)
    if with_grad:
        dx_dcs = np.zeros((M, 6))
        dx_dcth = np.zeros((M, 6))
        dy_dcs = np.zeros((M, 6))
        dy_dcth = np.zeros((M, 6))
        dx_dT = np.zeros(M)
        dy_dT = np.zeros(M)
    for jj in range(j):
        Ix, Iy, gxs, gxt, gys, gyt, gxL, gyL = _leg_integral(
            s_coeffs[jj], th_coeffs[jj], T[jj], n_sub)
        x += Ix
        y += Iy
        if with_grad:
            dx_dcs[jj] = gxs
            dx_dcth[jj] = gxt
            dy_dcs[jj] = gys
            dy_dcth[jj] = gyt
            dx_dT[jj] = gxL
            dy_dT[jj] = gyL
    Ix, Iy, gxs, gxt, gys, gyt, gxL, gyL = _leg_integral(
        s_coeffs[j], th_coeffs[j], u, n_sub)
    x += Ix
    y += Iy
    if not with_grad:
        return x, y
    dx_dcs[j] += gxs
    dx_dcth[j] += gxt
    dy_dcs[j] += gys
    dy_dcth[j] += gyt
    # local time u = t - ct[j]; a duration change of an earlier segment shifts u
    eta = u / T[j] if T[j] > 0 else 0.0
    dx_dT[j] += gxL * eta
    dy_dT[j] += gyL * eta
    grads = {"dx_dcs": dx_dcs, "dx_dcth": dx_dcth, "dy_dcs": dy_dcs,
             "dy_dcth": dy_dcth, "dx_dT": dx_dT, "dy_dT": dy_dT}
    return (x, y), grads


class FlatOutputQuadrature:
    """Simpson flat-output positions at the penalty samples, with a gradient fold.

    Bound to fixed (s, theta) coefficient blocks and durations. Sample l of
    segment j sits at local time (l / K) T_j. Gradients seeded per sample (and at
    the end time) are folded once into coefficient- and duration-space arrays.
    """

    def __init__(self, s_coeffs, th_coeffs, durations, x0, y0, K: int,
                 n_full: int = 32, n_part: int = 32):
        self.cs = np.asarray(s_coeffs, dtype=float)
        self.cth = np.asarray(th_coeffs, dtype=float)
        self.T = np.asarray(durations, dtype=float)
        self.x0, self.y0 = float(x0), float(y0)
        self.K = K
        M = len(self.T)
        self.M = M

        # full-segment integrals, batched over segments
        sigf = _simpson_sigma(n_full)
        af = np.arange(n_full + 1) / n_full
        ttf = self.T[:, None] * af[None, :]                     # (M, nf+1)
        wf = (self.T / (3.0 * n_full))[:, None] * sigf[None, :]
        b1 = poly_basis(ttf, 1)
        b2 = poly_basis(ttf, 2)
        th = np.einsum("mib,mb->mi", poly_basis(ttf, 0), self.cth)
        thd = np.einsum("mib,mb->mi", b1, self.cth)
        sd = np.einsum("mib,mb->mi", b1, self.cs)
        sdd = np.einsum("mib,mb->mi", b2, self.cs)
        c, s = np.cos(th), np.sin(th)
        self.Ix = np.sum(wf * sd * c, axis=1)
        self.Iy = np.sum(wf * sd * s, axis=1)
        self.dIx_dcs = np.einsum("mi,mib->mb", wf * c, b1)
        self.dIy_dcs = np.einsum("mi,mib->mb", wf * s, b1)
        b0 = poly_basis(ttf, 0)
        self.dIx_dcth = np.einsum("mi,mib->mb", -(wf * sd * s), b0)
        self.dIy_dcth = np.einsum("mi,mib->mb", wf * sd * c, b0)
        fpx = sdd * c - sd * thd * s
        fpy = sdd * s + sd * thd * c
        self.dIx_dT = (self.Ix + np.sum(wf * fpx * ttf, axis=1)) / self.T
        self.dIy_dT = (self.Iy + np.sum(wf * fpy * ttf, axis=1)) / self.T
        self.prefix_x = self.x0 + np.concatenate(([0.0], np.cumsum(self.Ix)[:-1]))
        self.prefix_y = self.y0 + np.concatenate(([0.0], np.cumsum(self.Iy)[:-1]))
        self.end_x = self.x0 + float(np.sum(self.Ix))
        self.end_y = self.y0 + float(np.sum(self.Iy))

        # per-sample partial integrals, batched over (segment, sample, node)
        sig = _simpson_sigma(n_part)
        alpha = np.arange(n_part + 1) / n_part
        eta = np.arange(K) / K
        tt = self.T[:, None, None] * eta[None, :, None] * alpha[None, None, :]
        w = ((eta[None, :] * self.T[:, None]
              / (3.0 * n_part))[:, :, None] * sig[None, None, :])
        b0 = poly_basis(tt, 0)
        b1 = poly_basis(tt, 1)
        b2 = poly_basis(tt, 2)
        sd = np.einsum("mlib,mb->mli", b1, self.cs)
        sdd = np.einsum("mlib,mb->mli", b2, self.cs)
        th = np.einsum("mlib,mb->mli", b0, self.cth)
        thd = np.einsum("mlib,mb->mli", b1, self.cth)
        c, s = np.cos(th), np.sin(th)
        self.Px = np.sum(w * sd * c, axis=2)
        self.Py = np.sum(w * sd * s, axis=2)
        self.dPx_dcs = np.einsum("mli,mlib->mlb", w * c, b1)
        self.dPy_dcs = np.einsum("mli,mlib->mlb", w * s, b1)
        self.dPx_dcth = np.einsum("mli,mlib->mlb", -(w * sd * s), b0)
        self.dPy_dcth = np.einsum("mli,mlib->mlb", w * sd * c, b0)
        fpx = sdd * c - sd * thd * s
        fpy = sdd * s + sd * thd * c
        self.dPx_dT = (self.Px + np.sum(w * fpx * tt, axis=2)) / self.T[:, None]
        self.dPy_dT = (self.Py + np.sum(w * fpy * tt, axis=2)) / self.T[:, None]

        self.xs = self.prefix_x[:, None] + self.Px  # (M, K)
        self.ys = self.prefix_y[:, None] + self.Py

        self._gx = np.zeros((M, K))
        self._gy = np.zeros((M, K))
        self._gxf = 0.0
        self._gyf = 0.0

    def add_sample_grad(self, gx: np.ndarray, gy: np.ndarray) -> None:
        self._gx += gx
        self._gy += gy

    def add_end_grad(self, gxf: float, gyf: float) -> None:
        self._gxf += gxf
        self._gyf += gyf

    def fold(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Collapse accumulated seeds into (d/dcs (M,6), d/dcth (M,6), d/dT (M,))."""
        gx, gy = self._gx, self._gy
        # within-segment partial parts
        dcs = np.einsum("lk,lkb->lb", gx, self.dPx_dcs) + \
            np.einsum("lk,lkb->lb", gy, self.dPy_dcs)
        dcth = np.einsum("lk,lkb->lb", gx, self.dPx_dcth) + \
            np.einsum("lk,lkb->lb", gy, self.dPy_dcth)
        dT = np.sum(gx * self.dPx_dT, axis=1) + np.sum(gy * self.dPy_dT, axis=1)
        # prefix parts: every full integral of segment j feeds all later samples
        seg_gx = np.sum(gx, axis=1)
        seg_gy = np.sum(gy, axis=1)
        sufx = np.concatenate((np.cumsum(seg_gx[::-1])[::-1][1:], [0.0])) + self._gxf
        sufy = np.concatenate((np.cumsum(seg_gy[::-1])[::-1][1:], [0.0])) + self._gyf
        dcs += sufx[:, None] * self.dIx_dcs + sufy[:, None] * self.dIy_dcs
        dcth += sufx[:, None] * self.dIx_dcth + sufy[:, None] * self.dIy_dcth
        dT += sufx * self.dIx_dT + sufy * self.dIy_dT
        return dcs, dcth, dT


def flat_positions_dense(s_coeffs, th_coeffs, durations, samples_per_seg: int,
                         n_gap: int = 10, x0: float = 0.0, y0: float = 0.0):
    """Cumulative high-density quadrature of the flat output (validation oracle).

    Integrates gap by gap with composite Simpson (n_gap sub-intervals per gap,
    samples_per_seg gaps per segment), so the total node density per segment is
    samples_per_seg * n_gap. Returns (ts, xs, ys) including the final end time.
    """
    s_coeffs = np.asarray(s_coeffs, dtype=float)
    th_coeffs = np.asarray(th_coeffs, dtype=float)
    T = np.asarray(durations, dtype=float)
    M = len(T)
    sig = _simpson_sigma(n_gap)
    ts_out = [0.0]
    xs_out = [float(x0)]
    ys_out = [float(y0)]
    x, y = float(x0), float(y0)
    t_base = 0.0
    for j in range(M):
        edges = np.linspace(0.0, T[j], samples_per_seg + 1)
        # node matrix (samples_per_seg, n_gap + 1)
        lo = edges[:-1][:, None]
        tt = lo + (edges[1] - edges[0]) * (np.arange(n_gap + 1) / n_gap)[None, :]
        h = (edges[1] - edges[0]) / (3.0 * n_gap)
        b0 = poly_basis(tt, 0)
        b1 = poly_basis(tt, 1)
        sd = b1 @ s_coeffs[j]
        th = b0 @ th_coeffs[j]
        gx = h * np.sum(sig[None, :] * sd * np.cos(th), axis=1)
        gy = h * np.sum(sig[None, :] * sd * np.sin(th), axis=1)
        cx = x + np.cumsum(gx)
        cy = y + np.cumsum(gy)
        ts_out.extend((t_base + edges[1:]).tolist())
        xs_out.extend(cx.tolist())
        ys_out.extend(cy.tolist())
        x, y = float(cx[-1]), float(cy[-1])
        t_base += T[j]
    return np.array(ts_out), np.array(xs_out), np.array(ys_out)
