"""Piecewise quintic minimum-jerk trajectories over the flat channels (s, theta, q).

A trajectory with M segments stores, per channel, 6 polynomial coefficients per
segment in the monomial basis [1, t, t^2, ..., t^5] with t local to the segment.
Coefficients are uniquely determined by interior waypoints, boundary states and
segment durations through a banded linear system; gradients of any objective with
respect to waypoints, end values and durations follow from one adjoint solve with
the transposed band.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import solve_banded

# band widths of the coefficient system in the per-segment ordering with the
# three start rows first, then 6 rows per junction, then the three end rows
_LB = 8
_UB = 2


# ---------- polynomial basis ----------

def poly_basis(t, order: int = 0) -> np.ndarray:
    """Derivative rows of the monomial basis.

    Returns an array of shape t.shape + (6,) whose last axis holds
    d^order/dt^order [1, t, ..., t^5].
    """
    t = np.asarray(t, dtype=float)
    out = np.zeros(t.shape + (6,))
    for i in range(order, 6):
        fac = 1.0
        for m in range(order):
            fac *= i - m
        out[..., i] = fac * t ** (i - order)
    return out


# ---------- trajectory container ----------

@dataclass
class WholeBodyTrajectory:
    """Piecewise quintic over channels (s, theta, q_1..q_N).

    coeffs: (M, 6, C) monomial coefficients, C = n_joints + 2
    durations: (M,) positive segment durations
    x0, y0: base position at t = 0 (the flat integration constants)
    """

    coeffs: np.ndarray
    durations: np.ndarray
    x0: float = 0.0
    y0: float = 0.0
    _band: Optional[tuple] = field(default=None, repr=False, compare=False)

    @property
    def n_segments(self) -> int:
        return self.coeffs.shape[0]

    @property
    def n_channels(self) -> int:
        return self.coeffs.shape[2]

    @property
    def n_joints(self) -> int:
        return self.n_channels - 2

    @property
    def total_time(self) -> float:
        return float(np.sum(self.durations))

    @property
    def cum_times(self) -> np.ndarray:
        return np.concatenate(([0.0], np.cumsum(self.durations)))

    def locate(self, t: float) -> tuple[int, float, bool]:
        """Map absolute time to (segment index, local time, clamped flag)."""
        ct = self.cum_times
        clamped = False
        if t < 0.0:
            t, clamped = 0.0, True
        elif t > ct[-1]:
            t, clamped = ct[-1], True
        j = int(np.searchsorted(ct, t, side="right") - 1)
        j = min(max(j, 0), self.n_segments - 1)
        return j, t - ct[j], clamped

    def eval(self, t: float, order: int = 0) -> np.ndarray:
        """All channel values (or a time derivative) at absolute time t.

        Out-of-range times are clamped to [0, total_time]; use locate() when the
        clamping flag is needed.
        """
        j, u, _ = self.locate(t)
        return poly_basis(u, order) @ self.coeffs[j]

    def eval_batch(self, ts: np.ndarray, order: int = 0) -> np.ndarray:
        ts = np.asarray(ts, dtype=float)
        ct = self.cum_times
        tc = np.clip(ts, 0.0, ct[-1])
        seg = np.clip(np.searchsorted(ct, tc, side="right") - 1, 0, self.n_segments - 1)
        local = tc - ct[seg]
        basis = poly_basis(local, order)  # (n, 6)
        return np.einsum("nb,nbc->nc", basis, self.coeffs[seg])

    def end_values(self) -> np.ndarray:
        return self.eval(self.total_time, 0)

    def to_json_dict(self) -> dict:
        q = self.coeffs[:, :, 2:]
        return {
            "T": [float(v) for v in self.durations],
            "channels": {
                "s": [[float(v) for v in row] for row in self.coeffs[:, :, 0]],
                "theta": [[float(v) for v in row] for row in self.coeffs[:, :, 1]],
                "q": [
                    [[float(v) for v in self.coeffs[j, :, 2 + k]] for j in range(self.n_segments)]
                    for k in range(self.n_joints)
                ],
            },
            "x0": float(self.x0),
            "y0": float(self.y0),
        }

    @staticmethod
    def from_json_dict(d: dict) -> "WholeBodyTrajectory":
        T = np.asarray(d["T"], dtype=float)
        s = np.asarray(d["channels"]["s"], dtype=float)
        th = np.asarray(d["channels"]["theta"], dtype=float)
        q = d["channels"].get("q", [])
        M = len(T)
        C = 2 + len(q)
        coeffs = np.zeros((M, 6, C))
        coeffs[:, :, 0] = s
        coeffs[:, :, 1] = th
        for k, qk in enumerate(q):
            coeffs[:, :, 2 + k] = np.asarray(qk, dtype=float)
        return WholeBodyTrajectory(coeffs=coeffs, durations=T, x0=float(d["x0"]), y0=float(d["y0"]))


# ---------- coefficient solve ----------

def _assemble_band(durations: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Banded storage of the constraint matrix and of its transpose."""
    T = np.asarray(durations, dtype=float)
    M = len(T)
    n = 6 * M
    ab = np.zeros((_LB + _UB + 1, n))
    abT = np.zeros((_LB + _UB + 1, n))

    def put(i: int, j: int, v: float) -> None:
        ab[_UB + i - j, j] = v
        abT[_LB + j - i, i] = v

    def put_row(i: int, col0: int, row6: np.ndarray) -> None:
        for k in range(6):
            if row6[k] != 0.0:
                put(i, col0 + k, row6[k])

    b0 = [poly_basis(0.0, o) for o in range(6)]
    # start rows: value, rate, acceleration of segment 1 at t=0
    for o in range(3):
        put_row(o, 0, b0[o])
    # junction rows
    for j in range(M - 1):
        r0 = 3 + 6 * j
        c0 = 6 * j
        bt = [poly_basis(T[j], o) for o in range(5)]
        put_row(r0, c0, bt[0])  # waypoint
        for o in range(5):  # continuity orders 0..4
            put_row(r0 + 1 + o, c0, bt[o])
            put_row(r0 + 1 + o, c0 + 6, -b0[o])
    # end rows
    bt = [poly_basis(T[M - 1], o) for o in range(3)]
    for o in range(3):
        put_row(n - 3 + o, 6 * (M - 1), bt[o])
    return ab, abT


def assemble_dense(durations: np.ndarray) -> np.ndarray:
    """Dense version of the coefficient matrix (test oracle for the banded path)."""
    T = np.asarray(durations, dtype=float)
    M = len(T)
    n = 6 * M
    A = np.zeros((n, n))
    b0 = [poly_basis(0.0, o) for o in range(6)]
    for o in range(3):
        A[o, 0:6] = b0[o]
    for j in range(M - 1):
        r0 = 3 + 6 * j
        c0 = 6 * j
        bt = [poly_basis(T[j], o) for o in range(5)]
        A[r0, c0:c0 + 6] = bt[0]
        for o in range(5):
            A[r0 + 1 + o, c0:c0 + 6] = bt[o]
            A[r0 + 1 + o, c0 + 6:c0 + 12] = -b0[o]
    bt = [poly_basis(T[M - 1], o) for o in range(3)]
    for o in range(3):
        A[n - 3 + o, n - 6:n] = bt[o]
    return A


def build_rhs(waypoints: np.ndarray, start_state: np.ndarray, end_state: np.ndarray,
              n_segments: int) -> np.ndarray:
    """Right-hand side (6M, C) from waypoints (M-1, C) and boundary states (3, C)."""
    C = start_state.shape[1]
    n = 6 * n_segments
    b = np.zeros((n, C))
    b[0:3] = start_state
    for j in range(n_segments - 1):
        b[3 + 6 * j] = waypoints[j]
    b[n - 3:n] = end_state
    return b


def solve_coefficients(waypoints: np.ndarray, start_state: np.ndarray,
                       end_state: np.ndarray, durations: np.ndarray,
                       x0: float = 0.0, y0: float = 0.0) -> WholeBodyTrajectory:
    """Solve for the unique C^4 piecewise quintic through the waypoints.

    Parameters
    ----------
    waypoints : (M-1, C) interior junction values per channel.
    start_state : (3, C) value/rate/acceleration of every channel at t = 0.
    end_state : (3, C) value/rate/acceleration at t = sum(durations).
    durations : (M,) positive segment durations.

    The same banded factor pattern serves all C channels (multi-RHS solve) and is
    retained on the returned trajectory for gradient propagation.
    """
    durations = np.asarray(durations, dtype=float)
    M = len(durations)
    if np.any(durations <= 0.0):
        raise ValueError("segment durations must be positive")
    start_state = np.atleast_2d(np.asarray(start_state, dtype=float))
    end_state = np.atleast_2d(np.asarray(end_state, dtype=float))
    waypoints = np.asarray(waypoints, dtype=float).reshape(M - 1, -1) if M > 1 else \
        np.zeros((0, start_state.shape[1]))
    ab, abT = _assemble_band(durations)
    b = build_rhs(waypoints, start_state, end_state, M)
    c = solve_banded((_LB, _UB), ab, b)
    traj = WholeBodyTrajectory(coeffs=c.reshape(M, 6, -1), durations=durations,
                               x0=x0, y0=y0)
    traj._band = (ab, abT)
    return traj


def propagate_gradients(traj: WholeBodyTrajectory, dJ_dc: np.ndarray,
                        dJ_dT_direct: Optional[np.ndarray] = None
                        ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pull a coefficient-space gradient back to (waypoints, end values, durations).

    dJ_dc has shape (M, 6, C); dJ_dT_direct, when given, is the partial derivative
    of the objective at fixed coefficients and is added to the propagated part.
    Returns (dJ_dP (M-1, C), dJ_de (C,), dJ_dT (M,)).
    """
    M = traj.n_segments
    C = traj.n_channels
    n = 6 * M
    if traj._band is None:
        traj._band = _assemble_band(traj.durations)
    _, abT = traj._band
    g = np.asarray(dJ_dc, dtype=float).reshape(n, C)
    lam = solve_banded((_UB, _LB), abT, g)  # transposed system

    dP = np.zeros((M - 1, C))
    for j in range(M - 1):
        dP[j] = lam[3 + 6 * j]
    de = lam[n - 3].copy()

    # dJ/dT_j = -lam^T (dM/dT_j) c  (+ direct part)
    dT = np.zeros(M)
    T = traj.durations
    for j in range(M - 1):
        r0 = 3 + 6 * j
        cj = traj.coeffs[j]  # (6, C)
        rows = [poly_basis(T[j], o) for o in range(1, 7)]
        # row r0 is the waypoint row (order 0 -> derivative order 1);
        # rows r0+1..r0+5 are continuity orders 0..4 -> derivative orders 1..5
        contrib = lam[r0] * (rows[0] @ cj)
        for o in range(5):
            contrib = contrib + lam[r0 + 1 + o] * (rows[o] @ cj)
        dT[j] -= contrib.sum()
    # end rows depend on T_{M-1}
    cj = traj.coeffs[M - 1]
    for o in range(3):
        dT[M - 1] -= np.sum(lam[n - 3 + o] * (poly_basis(T[M - 1], o + 1) @ cj))
    if dJ_dT_direct is not None:
        dT = dT + np.asarray(dJ_dT_direct, dtype=float)
    return dP, de, dT


# ---------- time and joint-range transforms ----------

def _lc2(x):
    """Bijection (0, inf) -> R used by both the duration and joint transforms."""
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0.0):
        raise ValueError("transform domain is x > 0")
    lo = x <= 1.0
    out = np.empty_like(x)
    out[lo] = 1.0 - np.sqrt(2.0 / x[lo] - 1.0)
    out[~lo] = np.sqrt(2.0 * x[~lo] - 1.0) - 1.0
    return out


def _lc2_inv(tau):
    tau = np.asarray(tau, dtype=float)
    neg = tau <= 0.0
    out = np.empty_like(tau)
    out[neg] = 2.0 / ((1.0 - tau[neg]) ** 2 + 1.0)
    out[~neg] = ((tau[~neg] + 1.0) ** 2 + 1.0) / 2.0
    return out


def _lc2_inv_deriv(tau):
    tau = np.asarray(tau, dtype=float)
    neg = tau <= 0.0
    out = np.empty_like(tau)
    om = 1.0 - tau[neg]
    out[neg] = 4.0 * om / (om * om + 1.0) ** 2
    out[~neg] = tau[~neg] + 1.0
    return out


def time_transform(T):
    """Unconstrained representation tau of a positive duration T."""
    return _lc2(T)


def time_transform_inv(tau):
    """Positive duration T from unconstrained tau (inverse of time_transform)."""
    return _lc2_inv(tau)


def time_transform_inv_deriv(tau):
    """dT/dtau of time_transform_inv; positive and C^1 across tau = 0."""
    return _lc2_inv_deriv(tau)


def joint_squash(q, q_max):
    """Unconstrained representation of a joint value strictly inside (-q_max, q_max)."""
    q = np.asarray(q, dtype=float)
    q_max = np.asarray(q_max, dtype=float)
    if np.any(np.abs(q) >= q_max):
        raise ValueError("joint value outside open limit interval")
    return _lc2((q_max + q) / (q_max - q))


def joint_unsquash(v, q_max):
    v = np.asarray(v, dtype=float)
    q_max = np.asarray(q_max, dtype=float)
    r = _lc2_inv(v)
    return q_max * (r - 1.0) / (r + 1.0)


def joint_unsquash_deriv(v, q_max):
    """dq/dv of joint_unsquash; strictly positive (the map is a bijection onto
    the open interval)."""
    v = np.asarray(v, dtype=float)
    q_max = np.asarray(q_max, dtype=float)
    r = _lc2_inv(v)
    return q_max * 2.0 / (r + 1.0) ** 2 * _lc2_inv_deriv(v)
