"""Procedural environments and signed-distance queries.

A scenario is a walled rectangular room plus yaw-rotated box obstacles (desk
grids are emitted as one top slab and four legs per desk). The base is checked
in 2D against a grid ESDF of inflated obstacle footprints; arm spheres are
checked against an analytic 3D field over the boxes.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from . import robot as rb

_FAR = 1.0e6


# ---------- types ----------

@dataclass
class BoxObstacle:
    center: np.ndarray
    half_extents: np.ndarray
    yaw: float
    kind: str = "box"

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.half_extents = np.asarray(self.half_extents, dtype=float)
        self.yaw = float(self.yaw)

    @property
    def z_lo(self) -> float:
        return float(self.center[2] - self.half_extents[2])

    @property
    def z_hi(self) -> float:
        return float(self.center[2] + self.half_extents[2])


@dataclass
class Scenario:
    room: np.ndarray  # (xmin, ymin, xmax, ymax)
    obstacles: list
    seed: int = 0
    _sdf: Optional["SceneSdf"] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.room = np.asarray(self.room, dtype=float)

    def sdf(self) -> "SceneSdf":
        if self._sdf is None:
            self._sdf = SceneSdf(self)
        return self._sdf

    def to_json_dict(self) -> dict:
        return {
            "room": [float(v) for v in self.room],
            "obstacles": [
                {"center": [float(v) for v in o.center],
                 "half_extents": [float(v) for v in o.half_extents],
                 "yaw": float(o.yaw), "kind": o.kind}
                for o in self.obstacles
            ],
            "seed": int(self.seed),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":"))

    @staticmethod
    def from_json_dict(d: dict) -> "Scenario":
        return Scenario(
            room=np.asarray(d["room"], dtype=float),
            obstacles=[BoxObstacle(o["center"], o["half_extents"], o["yaw"],
                                   o.get("kind", "box")) for o in d["obstacles"]],
            seed=int(d.get("seed", 0)))


def load_scenario(path) -> Scenario:
    with open(path) as f:
        return Scenario.from_json_dict(json.load(f))


def save_scenario(s: Scenario, path) -> None:
    with open(path, "w") as f:
        json.dump(s.to_json_dict(), f, indent=2, sort_keys=True)


@dataclass
class ScenarioParams:
    """Knobs for generate_scenario; ranges are (lo, hi) and sampled uniformly."""

    room_w: float = 20.0
    room_h: float = 10.0
    n_desk_grids: int = 10
    n_cuboids: int = 20
    desk_side: tuple = (0.75, 1.25)
    desk_height: tuple = (0.5, 1.5)
    cuboid_side: tuple = (0.2, 0.8)
    cuboid_height: tuple = (0.4, 1.5)
    grid_cols: tuple = (1, 3)
    grid_rows: tuple = (1, 2)
    wall_thickness: float = 0.2
    wall_height: float = 2.0
    top_thickness: float = 0.05
    leg_half: float = 0.03
    max_tries: int = 200


# ---------- 2D rectangle helpers ----------

def _rect_corners(c, half, yaw):
    cy, sy = np.cos(yaw), np.sin(yaw)
    R = np.array([[cy, -sy], [sy, cy]])
    signs = np.array([[1, 1], [1, -1], [-1, -1], [-1, 1]], dtype=float)
    return c + (signs * half) @ R.T


def _rects_overlap(c1, h1, y1, c2, h2, y2) -> bool:
    # separating-axis test for two oriented rectangles
    for (c, h, yw) in ((c1, h1, y1), (c2, h2, y2)):
        cy, sy = np.cos(yw), np.sin(yw)
        axes = np.array([[cy, sy], [-sy, cy]])
        for ax in axes:
            d = abs(float(ax @ (c2 - c1)))
            r1 = h1[0] * abs(float(ax @ [np.cos(y1), np.sin(y1)])) + \
                h1[1] * abs(float(ax @ [-np.sin(y1), np.cos(y1)]))
            r2 = h2[0] * abs(float(ax @ [np.cos(y2), np.sin(y2)])) + \
                h2[1] * abs(float(ax @ [-np.sin(y2), np.cos(y2)]))
            if d > r1 + r2:
                return False
    return True


# ---------- scenario generation ----------

def _wall_boxes(room, t, h) -> list:
    xmin, ymin, xmax, ymax = room
    cx, cy = (xmin + xmax) / 2, (ymin + ymax) / 2
    w2, h2 = (xmax - xmin) / 2, (ymax - ymin) / 2
    z, hz = h / 2, h / 2
    return [
        BoxObstacle([cx, ymin - t / 2, z], [w2 + t, t / 2, hz], 0.0, "wall"),
        BoxObstacle([cx, ymax + t / 2, z], [w2 + t, t / 2, hz], 0.0, "wall"),
        BoxObstacle([xmin - t / 2, cy, z], [t / 2, h2 + t, hz], 0.0, "wall"),
        BoxObstacle([xmax + t / 2, cy, z], [t / 2, h2 + t, hz], 0.0, "wall"),
    ]


def generate_scenario(params: ScenarioParams, seed: int) -> Scenario:
    """Walled room with desk grids (top slab + four legs each) and cuboids.

    Placement is rejection-sampled so desk/cuboid footprints never overlap in 2D
    and nothing lands under a desk top. Deterministic per (params, seed).
    """
    rng = np.random.default_rng(seed)
    room = np.array([0.0, 0.0, params.room_w, params.room_h])
    obstacles = _wall_boxes(room, params.wall_thickness, params.wall_height)
    footprints = []  # (center2, half2, yaw) of desk tops and cuboids

    def room_contains(c, half, yaw) -> bool:
        corners = _rect_corners(c, half, yaw)
        return (np.all(corners[:, 0] > room[0]) and np.all(corners[:, 0] < room[2])
                and np.all(corners[:, 1] > room[1]) and np.all(corners[:, 1] < room[3]))

    def free_spot(c, half, yaw) -> bool:
        if not room_contains(c, half, yaw):
            return False
        return not any(_rects_overlap(c, half, yaw, fc, fh, fy)
                       for fc, fh, fy in footprints)

    for _ in range(params.n_desk_grids):
        placed = False
        for _try in range(params.max_tries):
            dw = rng.uniform(*params.desk_side)
            dd = rng.uniform(*params.desk_side)
            dh = rng.uniform(*params.desk_height)
            cols = int(rng.integers(params.grid_cols[0], params.grid_cols[1] + 1))
            rows = int(rng.integers(params.grid_rows[0], params.grid_rows[1] + 1))
            yaw = rng.uniform(-np.pi, np.pi)
            gc = np.array([rng.uniform(room[0], room[2]), rng.uniform(room[1], room[3])])
            ghalf = np.array([cols * dw / 2, rows * dd / 2])
            if not free_spot(gc, ghalf, yaw):
                continue
            cy, sy = np.cos(yaw), np.sin(yaw)
            R = np.array([[cy, -sy], [sy, cy]])
            tt = params.top_thickness
            lh = params.leg_half
            for i in range(cols):
                for j in range(rows):
                    off = np.array([(i - (cols - 1) / 2) * dw, (j - (rows - 1) / 2) * dd])
                    dc = gc + R @ off
                    obstacles.append(BoxObstacle(
                        [dc[0], dc[1], dh - tt / 2], [dw / 2, dd / 2, tt / 2], yaw,
                        "desk_top"))
                    inset = np.array([dw / 2 - 2 * lh, dd / 2 - 2 * lh])
                    for sx in (-1, 1):
                        for sy_ in (-1, 1):
                            lc = dc + R @ (inset * [sx, sy_])
                            obstacles.append(BoxObstacle(
                                [lc[0], lc[1], (dh - tt) / 2], [lh, lh, (dh - tt) / 2],
                                yaw, "desk_leg"))
                    footprints.append((dc, np.array([dw / 2, dd / 2]), yaw))
            placed = True
            break
        if not placed:
            raise RuntimeError("failed to place a desk grid; room too crowded")

    for _ in range(params.n_cuboids):
        placed = False
        for _try in range(params.max_tries):
            wx = rng.uniform(*params.cuboid_side)
            wy = rng.uniform(*params.cuboid_side)
            hz = rng.uniform(*params.cuboid_height)
            yaw = rng.uniform(-np.pi, np.pi)
            c = np.array([rng.uniform(room[0], room[2]), rng.uniform(room[1], room[3])])
            half = np.array([wx / 2, wy / 2])
            if not free_spot(c, half, yaw):
                continue
            obstacles.append(BoxObstacle([c[0], c[1], hz / 2], [wx / 2, wy / 2, hz / 2],
                                         yaw, "cuboid"))
            footprints.append((c, half, yaw))
            placed = True
            break
        if not placed:
            raise RuntimeError("failed to place a cuboid; room too crowded")

    return Scenario(room=room, obstacles=obstacles, seed=int(seed))


# ---------- grid ESDF ----------

@dataclass
class GridEsdf:
    origin: np.ndarray  # (xmin, ymin)
    resolution: float
    dist: np.ndarray  # (ny, nx), signed, meters

    @property
    def shape(self) -> tuple:
        return self.dist.shape

    def to_csv(self, path) -> None:
        ny, nx = self.dist.shape
        with open(path, "w") as f:
            f.write("# origin_x,origin_y,resolution,nx,ny\n")
            f.write(f"# {self.origin[0]},{self.origin[1]},{self.resolution},{nx},{ny}\n")
            for iy in range(ny):
                f.write(",".join(repr(float(v)) for v in self.dist[iy]) + "\n")


def _footprint_sdf2(px, py, c, half, yaw):
    cy, sy = np.cos(yaw), np.sin(yaw)
    rx = px - c[0]
    ry = py - c[1]
    lx = cy * rx + sy * ry
    ly = -sy * rx + cy * ry
    dx = np.abs(lx) - half[0]
    dy = np.abs(ly) - half[1]
    outside = np.hypot(np.maximum(dx, 0.0), np.maximum(dy, 0.0))
    inside = np.minimum(np.maximum(dx, dy), 0.0)
    return outside + inside


def build_grid_esdf(scenario: Scenario, resolution: float = 0.1,
                    inflation: float = 0.0, z_band=None) -> GridEsdf:
    """Signed 2D Euclidean distance field on cell centers.

    Occupancy marks cells whose center lies within `inflation` of an obstacle
    footprint (exact disc Minkowski sum). With z_band=(lo, hi) only obstacles
    whose vertical extent overlaps the open band contribute; desk tops above a
    low base then leave the under-desk corridor free. The signed field is the
    outside distance minus the inside distance, both between cell centers.
    """
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    xmin, ymin, xmax, ymax = scenario.room
    nx = max(int(round((xmax - xmin) / resolution)), 1)
    ny = max(int(round((ymax - ymin) / resolution)), 1)
    occ = np.zeros((ny, nx), dtype=bool)
    xs = xmin + (np.arange(nx) + 0.5) * resolution
    ys = ymin + (np.arange(ny) + 0.5) * resolution
    for o in scenario.obstacles:
        if z_band is not None and not (o.z_lo < z_band[1] and o.z_hi > z_band[0]):
            continue
        cy, sy = np.cos(o.yaw), np.sin(o.yaw)
        ex = abs(cy) * o.half_extents[0] + abs(sy) * o.half_extents[1] + inflation + resolution
        ey = abs(sy) * o.half_extents[0] + abs(cy) * o.half_extents[1] + inflation + resolution
        i0 = max(int((o.center[0] - ex - xmin) / resolution), 0)
        i1 = min(int((o.center[0] + ex - xmin) / resolution) + 1, nx)
        j0 = max(int((o.center[1] - ey - ymin) / resolution), 0)
        j1 = min(int((o.center[1] + ey - ymin) / resolution) + 1, ny)
        if i0 >= i1 or j0 >= j1:
            continue
        gx, gy = np.meshgrid(xs[i0:i1], ys[j0:j1])
        sd = _footprint_sdf2(gx, gy, o.center[:2], o.half_extents[:2], o.yaw)
        occ[j0:j1, i0:i1] |= sd <= inflation
    if not occ.any():
        dist = np.full((ny, nx), _FAR)
    elif occ.all():
        dist = np.full((ny, nx), -_FAR)
    else:
        d_out = ndimage.distance_transform_edt(~occ, sampling=resolution)
        d_in = ndimage.distance_transform_edt(occ, sampling=resolution)
        dist = d_out - d_in
    return GridEsdf(origin=np.array([xmin, ymin]), resolution=resolution, dist=dist)


def esdf_query_batch(g: GridEsdf, pts: np.ndarray):
    """Bilinear distance and gradient at (n, 2) points.

    Points beyond the outermost cell centers are clamped (flagged in the third
    return) and the clamped axis contributes zero gradient.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    ny, nx = g.dist.shape
    res = g.resolution
    u = (pts[:, 0] - g.origin[0]) / res - 0.5
    v = (pts[:, 1] - g.origin[1]) / res - 0.5
    bad = ~(np.isfinite(u) & np.isfinite(v))
    if np.any(bad):  # non-finite probes count as out of bounds
        u = np.where(bad, -1.0, u)
        v = np.where(bad, -1.0, v)
    oob_u = (u < 0.0) | (u > nx - 1.0)
    oob_v = (v < 0.0) | (v > ny - 1.0)
    uc = np.clip(u, 0.0, nx - 1.0)
    vc = np.clip(v, 0.0, ny - 1.0)
    i0 = np.clip(np.floor(uc).astype(int), 0, max(nx - 2, 0))
    j0 = np.clip(np.floor(vc).astype(int), 0, max(ny - 2, 0))
    i1 = np.minimum(i0 + 1, nx - 1)
    j1 = np.minimum(j0 + 1, ny - 1)
    fu = uc - i0
    fv = vc - j0
    d00 = g.dist[j0, i0]
    d10 = g.dist[j0, i1]
    d01 = g.dist[j1, i0]
    d11 = g.dist[j1, i1]
    val = (d00 * (1 - fu) * (1 - fv) + d10 * fu * (1 - fv)
           + d01 * (1 - fu) * fv + d11 * fu * fv)
    gx = ((d10 - d00) * (1 - fv) + (d11 - d01) * fv) / res
    gy = ((d01 - d00) * (1 - fu) + (d11 - d10) * fu) / res
    gx = np.where(oob_u, 0.0, gx)
    gy = np.where(oob_v, 0.0, gy)
    return val, np.stack([gx, gy], axis=1), oob_u | oob_v


def esdf_query(g: GridEsdf, p) -> tuple[float, np.ndarray]:
    """Signed distance and gradient at one planar point (clamped at the border)."""
    val, grad, _ = esdf_query_batch(g, np.asarray(p, dtype=float)[None, :])
    return float(val[0]), grad[0]


# ---------- 3D box field ----------

class SceneSdf:
    """Vectorized point-to-box distances with a coarse planar culling grid.

    query() is exact everywhere. query_batch(cutoff=...) is exact for any point
    whose true distance is below the cutoff and returns the cutoff (zero
    gradient) otherwise, which is all the penalty terms ever need.
    """

    CELL = 1.0
    PAD = 0.6  # must stay >= any query cutoff for the culling to be exact

    def __init__(self, scenario: Scenario):
        obs = scenario.obstacles
        self.n = len(obs)
        if self.n == 0:
            self.C = np.zeros((0, 3))
            self.H = np.zeros((0, 3))
            self.cy = np.zeros(0)
            self.sy = np.zeros(0)
            return
        self.C = np.array([o.center for o in obs])
        self.H = np.array([o.half_extents for o in obs])
        yaw = np.array([o.yaw for o in obs])
        self.cy = np.cos(yaw)
        self.sy = np.sin(yaw)
        # planar AABB of each box, inflated by PAD, for culling
        ex = np.abs(self.cy) * self.H[:, 0] + np.abs(self.sy) * self.H[:, 1]
        ey = np.abs(self.sy) * self.H[:, 0] + np.abs(self.cy) * self.H[:, 1]
        self.aabb_lo = self.C[:, :2] - np.stack([ex, ey], axis=1) - self.PAD
        self.aabb_hi = self.C[:, :2] + np.stack([ex, ey], axis=1) + self.PAD
        lo = np.min(self.aabb_lo, axis=0)
        hi = np.max(self.aabb_hi, axis=0)
        self.cell_origin = lo
        self.ncx = max(int(np.ceil((hi[0] - lo[0]) / self.CELL)), 1)
        self.ncy = max(int(np.ceil((hi[1] - lo[1]) / self.CELL)), 1)
        cells = [[] for _ in range(self.ncx * self.ncy)]
        for b in range(self.n):
            i0 = int((self.aabb_lo[b, 0] - lo[0]) / self.CELL)
            i1 = min(int((self.aabb_hi[b, 0] - lo[0]) / self.CELL), self.ncx - 1)
            j0 = int((self.aabb_lo[b, 1] - lo[1]) / self.CELL)
            j1 = min(int((self.aabb_hi[b, 1] - lo[1]) / self.CELL), self.ncy - 1)
            for j in range(j0, j1 + 1):
                for i in range(i0, i1 + 1):
                    cells[j * self.ncx + i].append(b)
        kmax = max((len(c) for c in cells), default=1)
        kmax = max(kmax, 1)
        self.cand = np.full((self.ncx * self.ncy, kmax), -1, dtype=int)
        for ci, c in enumerate(cells):
            self.cand[ci, :len(c)] = c

    # distances of pts (P,3) against a (P, B) matrix of box indices (-1 = none)
    def _dist_matrix(self, pts, idx):
        C = self.C[idx]
        H = self.H[idx]
        cy = self.cy[idx]
        sy = self.sy[idx]
        rel = pts[:, None, :] - C
        lx = cy * rel[:, :, 0] + sy * rel[:, :, 1]
        ly = -sy * rel[:, :, 0] + cy * rel[:, :, 1]
        lz = rel[:, :, 2]
        dx = np.abs(lx) - H[:, :, 0]
        dy = np.abs(ly) - H[:, :, 1]
        dz = np.abs(lz) - H[:, :, 2]
        px = np.maximum(dx, 0.0)
        py = np.maximum(dy, 0.0)
        pz = np.maximum(dz, 0.0)
        out = np.sqrt(px * px + py * py + pz * pz)
        inner = np.minimum(np.maximum(np.maximum(dx, dy), dz), 0.0)
        d = out + inner
        d[idx < 0] = _FAR
        return d, (lx, ly, lz, dx, dy, dz, px, py, pz, out, cy, sy)

    def _gradients(self, pick, pts):
        """Gradient of the distance to box `pick[p]` at each point."""
        P = len(pts)
        C = self.C[pick]
        H = self.H[pick]
        cy = self.cy[pick]
        sy = self.sy[pick]
        rel = pts - C
        lx = cy * rel[:, 0] + sy * rel[:, 1]
        ly = -sy * rel[:, 0] + cy * rel[:, 1]
        lz = rel[:, 2]
        l = np.stack([lx, ly, lz], axis=1)
        d = np.abs(l) - H
        pos = np.maximum(d, 0.0)
        nrm = np.sqrt(np.sum(pos * pos, axis=1))
        outside = nrm > 0.0
        g_loc = np.zeros((P, 3))
        safe = np.where(outside, nrm, 1.0)
        g_out = np.sign(l) * pos / safe[:, None]
        ax = np.argmax(d, axis=1)
        g_in = np.zeros((P, 3))
        rows = np.arange(P)
        g_in[rows, ax] = np.sign(l[rows, ax])
        g_loc = np.where(outside[:, None], g_out, g_in)
        gx = cy * g_loc[:, 0] - sy * g_loc[:, 1]
        gy = sy * g_loc[:, 0] + cy * g_loc[:, 1]
        return np.stack([gx, gy, g_loc[:, 2]], axis=1)

    def query_batch(self, pts: np.ndarray, cutoff: Optional[float] = None):
        """(distance, gradient) per point; exact below cutoff when one is given."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        P = len(pts)
        if self.n == 0:
            return np.full(P, _FAR), np.zeros((P, 3))
        if cutoff is None or cutoff > self.PAD:
            idx = np.broadcast_to(np.arange(self.n), (P, self.n))
            d, _ = self._dist_matrix(pts, idx)
            pick = np.argmin(d, axis=1)
            dist = d[np.arange(P), pick]
            grad = self._gradients(pick, pts)
            if cutoff is not None:
                far = dist >= cutoff
                dist = np.where(far, cutoff, dist)
                grad[far] = 0.0
            return dist, grad
        finite = np.all(np.isfinite(pts), axis=1)
        safe = np.where(finite[:, None], pts, 0.0)
        ci = np.clip((safe[:, 0] - self.cell_origin[0]) / self.CELL, 0, self.ncx - 1).astype(int)
        cj = np.clip((safe[:, 1] - self.cell_origin[1]) / self.CELL, 0, self.ncy - 1).astype(int)
        # points outside the culling grid entirely are far from every box
        inside = (finite
                  & (safe[:, 0] >= self.cell_origin[0])
                  & (safe[:, 0] <= self.cell_origin[0] + self.ncx * self.CELL)
                  & (safe[:, 1] >= self.cell_origin[1])
                  & (safe[:, 1] <= self.cell_origin[1] + self.ncy * self.CELL))
        idx = np.where(inside[:, None], self.cand[cj * self.ncx + ci], -1)
        d, _ = self._dist_matrix(pts, idx)
        pick_col = np.argmin(d, axis=1)
        dist = d[np.arange(P), pick_col]
        pick = idx[np.arange(P), pick_col]
        far = dist >= cutoff
        dist = np.where(far, cutoff, dist)
        grad = np.zeros((P, 3))
        if np.any(~far):
            grad[~far] = self._gradients(pick[~far], pts[~far])
        return dist, grad


def sdf3_query(s: Scenario, p) -> tuple[float, np.ndarray]:
    """Exact signed distance to the nearest obstacle box and its gradient.

    The minimum over obstacles breaks ties toward the lowest obstacle index
    (np.argmin convention).
    """
    d, g = s.sdf().query_batch(np.asarray(p, dtype=float)[None, :])
    return float(d[0]), g[0]


# ---------- state sampling ----------

def state_margins(s: Scenario, g: GridEsdf, robot: rb.RobotModel,
                  state: rb.WholeBodyState) -> tuple[float, float, float]:
    """Worst slack of the three feasibility families for a static state.

    Returns (base grid slack, arm sphere slack, self-collision slack); all must
    exceed the desired margin for the state to count as clear. Base slack is
    -inf outside the grid.
    """
    col = robot.collision
    pts = rb.collision_points(robot, (state.x, state.y, state.theta), state.q)
    d, _, oob = esdf_query_batch(g, pts[0:1, :2])
    base = -np.inf if bool(oob[0]) else float(d[0]) - col.r_thr[0]
    if len(col.spheres):
        ds, _ = s.sdf().query_batch(pts[1:])
        arm = float(np.min(ds - col.r_thr[1:]))
    else:
        arm = np.inf
    if col.self_pairs:
        self_m = float(np.min(rb.self_collision_distances(robot, state.q)))
    else:
        self_m = np.inf
    return base, arm, self_m


def sample_free_state(s: Scenario, robot: rb.RobotModel, rng,
                      g: Optional[GridEsdf] = None, margin: float = 0.05,
                      max_tries: int = 2000) -> rb.WholeBodyState:
    """Uniform collision-free whole-body state inside the room.

    Joint values are drawn strictly inside the limits (95%) so downstream
    squashing transforms stay in-domain. Deterministic per rng state.
    """
    if g is None:
        g = build_grid_esdf(s, resolution=0.1, inflation=robot.collision.cylinder_radius,
                            z_band=(0.0, robot.collision.cylinder_height))
    xmin, ymin, xmax, ymax = s.room
    q_max = robot.limits.q_max
    for _ in range(max_tries):
        st = rb.WholeBodyState(
            x=rng.uniform(xmin, xmax), y=rng.uniform(ymin, ymax),
            theta=rng.uniform(-np.pi, np.pi),
            q=rng.uniform(-0.95 * q_max, 0.95 * q_max))
        b, a, sc = state_margins(s, g, robot, st)
        if b >= margin and a >= margin and sc >= margin:
            return st
    raise RuntimeError("failed to sample a collision-free state")
