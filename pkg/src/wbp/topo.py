"""Homotopy-aware base-path candidates on a planar distance grid.

A sparse visibility roadmap (guards see no other guard; connectors link two or
more guards) is grown inside the room, keeping a connector only when it opens a
connection that is not deformable onto one the roadmap already has. Bounded
depth-first search then enumerates short node paths, which are shortcut and
pruned down to one representative per deformation class.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .world import GridEsdf, esdf_query_batch


# ---------- clearance predicates ----------

def segment_clear(g: GridEsdf, p, q, clearance: float = 0.0,
                  step: float = 0.05) -> bool:
    """True when the straight segment keeps at least `clearance` grid distance."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    n = max(int(np.ceil(np.linalg.norm(q - p) / step)) + 1, 2)
    pts = p + np.linspace(0.0, 1.0, n)[:, None] * (q - p)
    d, _, oob = esdf_query_batch(g, pts)
    return bool(np.all(~oob) and np.all(d >= clearance))


def _segments_clear(g: GridEsdf, A, B, clearance: float = 0.0,
                    step: float = 0.05) -> np.ndarray:
    """segment_clear for many segments in one grid query.

    A and B are (n, 2) endpoint arrays; returns a boolean vector. Sampling
    matches segment_clear exactly (inclusive linspace at the same density).
    """
    A = np.asarray(A, dtype=float).reshape(-1, 2)
    B = np.asarray(B, dtype=float).reshape(-1, 2)
    n = len(A)
    if n == 0:
        return np.zeros(0, dtype=bool)
    lens = np.linalg.norm(B - A, axis=1)
    counts = np.maximum(np.ceil(lens / step).astype(int) + 1, 2)
    offs = np.concatenate([[0], np.cumsum(counts)])
    t = np.empty(offs[-1])
    idx = np.empty(offs[-1], dtype=int)
    for i in range(n):
        t[offs[i]:offs[i + 1]] = np.linspace(0.0, 1.0, counts[i])
        idx[offs[i]:offs[i + 1]] = i
    pts = A[idx] + t[:, None] * (B[idx] - A[idx])
    d, _, oob = esdf_query_batch(g, pts)
    ok = (~oob) & (d >= clearance)
    return np.minimum.reduceat(ok, offs[:-1]).astype(bool)


def path_length(pts: np.ndarray) -> float:
    pts = np.asarray(pts, dtype=float)
    if len(pts) < 2:
        return 0.0
    return float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))


def interp_along(pts: np.ndarray, fracs) -> np.ndarray:
    """Points at the given arc-length fractions of a polyline."""
    pts = np.asarray(pts, dtype=float)
    fracs = np.asarray(fracs, dtype=float)
    if len(pts) == 1:
        return np.repeat(pts, len(fracs), axis=0)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if total <= 0.0:
        return np.repeat(pts[:1], len(fracs), axis=0)
    s = np.clip(fracs, 0.0, 1.0) * total
    out = np.empty((len(fracs), pts.shape[1]))
    for k in range(pts.shape[1]):
        out[:, k] = np.interp(s, cum, pts[:, k])
    return out


def uvd_equivalent(g: GridEsdf, path_a, path_b, clearance: float = 0.0,
                   n_checks: int = 32, step: float = 0.05) -> bool:
    """Uniform visibility deformation test between two polylines.

    Both paths are sampled at the same arc-length fractions; they are
    equivalent when every connecting segment between corresponding samples is
    clear, i.e. one path can be slid onto the other without crossing anything.
    """
    fr = np.linspace(0.0, 1.0, n_checks)
    a = interp_along(path_a, fr)
    b = interp_along(path_b, fr)
    return bool(np.all(_segments_clear(g, a, b, clearance, step)))


# ---------- roadmap ----------

@dataclass
class Roadmap:
    nodes: list = field(default_factory=list)   # 2D positions
    kinds: list = field(default_factory=list)   # "guard" | "connector"
    adj: list = field(default_factory=list)     # list of sets of node ids
    start: int = 0
    goal: int = 1

    def add_node(self, p, kind: str) -> int:
        self.nodes.append(np.asarray(p, dtype=float))
        self.kinds.append(kind)
        self.adj.append(set())
        return len(self.nodes) - 1

    def add_edge(self, i: int, j: int) -> None:
        self.adj[i].add(j)
        self.adj[j].add(i)

    def points(self, idx_path) -> np.ndarray:
        return np.array([self.nodes[i] for i in idx_path])


def _passage_seeds(g: GridEsdf, clearance: float, width_max: float = 1.2,
                   dedupe: float = 0.25) -> np.ndarray:
    """Deterministic node seeds inside narrow corridors of the grid.

    Scans rows and columns for short free runs (width <= width_max) and keeps
    the cell of maximum clearance in each. Slot-like passages admit almost no
    straight sightline between their two sides, so uniform sampling alone
    leaves them unconnected; these seeds give the roadmap a node in every
    such throat. Ordered by ascending clearance so the most constricted cell
    of a passage (its throat, which tends to see no guard and so becomes one)
    is offered first; nearby cells within `dedupe` meters are dropped.
    """
    free = g.dist >= clearance
    out = {}
    for axis in (0, 1):
        mask = free if axis == 0 else free.T
        dist = g.dist if axis == 0 else g.dist.T
        for r in range(mask.shape[0]):
            flags = np.concatenate([[0], mask[r].astype(np.int8), [0]])
            idx = np.flatnonzero(np.diff(flags))
            for a, b in zip(idx[::2], idx[1::2]):
                if 0 < (b - a) * g.resolution <= width_max:
                    m = a + int(np.argmax(dist[r, a:b]))
                    cell = (r, m) if axis == 0 else (m, r)
                    out[cell] = float(g.dist[cell])
    if not out:
        return np.empty((0, 2))
    order = sorted(out, key=lambda c: (out[c], c))
    keep = []
    for r, cidx in order:
        p = g.origin + (np.array([cidx, r]) + 0.5) * g.resolution
        if all(np.hypot(*(p - q)) > dedupe for q in keep):
            keep.append(p)
    return np.asarray(keep)


def build_roadmap(g: GridEsdf, start_xy, goal_xy, rng, n_samples: int = 600,
                  clearance: float = 0.0, step: float = 0.05,
                  n_checks: int = 32, bridge_sigma: float = 0.7) -> Roadmap:
    """Grow a visibility roadmap between start and goal.

    Samples that see no guard become guards; samples that see two or more
    become connectors, but only when for some visible guard pair the two-leg
    path through the sample is not deformable onto a two-leg path through an
    existing connector of that pair. Start and goal are the first two guards
    and get a direct edge when they see each other.

    Narrow-corridor cells from _passage_seeds enter the acceptance rule
    first, guaranteeing a node in every grid-visible throat. Rejected
    (blocked) samples then get a bridge test: a second blocked point is drawn
    nearby and the midpoint, when clear, enters the same acceptance rule.
    Uniform sampling alone almost never lands in the visibility lens of a
    narrow passage; seeds and bridge midpoints concentrate exactly there.
    """
    rm = Roadmap()
    rm.add_node(start_xy, "guard")
    rm.add_node(goal_xy, "guard")
    if segment_clear(g, start_xy, goal_xy, clearance, step):
        rm.add_edge(0, 1)
    xmin, ymin = g.origin
    xmax = xmin + g.dist.shape[1] * g.resolution
    ymax = ymin + g.dist.shape[0] * g.resolution

    def blocked(pt) -> bool:
        d, _, oob = esdf_query_batch(g, pt[None])
        return bool(oob[0]) or d[0] < clearance

    def consider(p) -> None:
        guards = [i for i in range(len(rm.nodes)) if rm.kinds[i] == "guard"]
        gpts = np.array([rm.nodes[i] for i in guards])
        ok = _segments_clear(g, np.broadcast_to(p, gpts.shape), gpts,
                             clearance, step)
        vis = [i for i, o in zip(guards, ok) if o]
        if not vis:
            rm.add_node(p, "guard")
            return
        if len(vis) < 2:
            return
        fresh = False
        for a, b in combinations(vis, 2):
            shared = [c for c in rm.adj[a] if c in rm.adj[b]
                      and rm.kinds[c] == "connector"]
            cand = np.array([rm.nodes[a], p, rm.nodes[b]])
            if not any(uvd_equivalent(g, cand,
                                      np.array([rm.nodes[a], rm.nodes[c], rm.nodes[b]]),
                                      clearance, n_checks, step) for c in shared):
                fresh = True
                break
        if fresh:
            idx = rm.add_node(p, "connector")
            for i in vis:
                rm.add_edge(idx, i)

    for p in _passage_seeds(g, clearance):
        if not blocked(p):
            consider(p)
    for _ in range(n_samples):
        p = np.array([rng.uniform(xmin, xmax), rng.uniform(ymin, ymax)])
        if not blocked(p):
            consider(p)
            continue
        p2 = p + rng.normal(0.0, bridge_sigma, 2)
        if not blocked(p2):
            continue
        mid = 0.5 * (p + p2)
        if not blocked(mid):
            consider(mid)
    return rm


# ---------- path enumeration ----------

def _dijkstra_to_goal(rm: Roadmap) -> np.ndarray:
    n = len(rm.nodes)
    dist = np.full(n, np.inf)
    dist[rm.goal] = 0.0
    heap = [(0.0, rm.goal)]
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        for v in sorted(rm.adj[u]):
            w = float(np.linalg.norm(rm.nodes[u] - rm.nodes[v]))
            nd = d + w
            if nd < dist[v] - 1e-12:
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    return dist


def k_paths(rm: Roadmap, k_max: int = 10, detour_ratio: float = 2.0,
            max_expansions: int = 100000) -> list:
    """Loop-free node paths from start to goal, shortest first.

    Depth-first search bounded by the admissible detour: a branch dies once its
    length plus the remaining shortest distance exceeds detour_ratio times the
    overall shortest path. Returns up to 4*k_max raw index paths so that
    deformation pruning still has material to choose from.
    """
    h = _dijkstra_to_goal(rm)
    if not np.isfinite(h[rm.start]):
        return []
    bound = detour_ratio * h[rm.start] + 1e-9
    cap = max(4 * k_max, 16)
    found = []
    on_path = [False] * len(rm.nodes)

    def dfs(u, length, path, budget):
        if budget[0] <= 0 or len(found) >= cap:
            return
        budget[0] -= 1
        if u == rm.goal:
            found.append((length, list(path)))
            return
        nbrs = sorted(rm.adj[u],
                      key=lambda v: (float(np.linalg.norm(rm.nodes[u] - rm.nodes[v])) + h[v], v))
        for v in nbrs:
            if on_path[v]:
                continue
            w = float(np.linalg.norm(rm.nodes[u] - rm.nodes[v]))
            if length + w + h[v] > bound:
                continue
            on_path[v] = True
            path.append(v)
            dfs(v, length + w, path, budget)
            path.pop()
            on_path[v] = False

    on_path[rm.start] = True
    dfs(rm.start, 0.0, [rm.start], [max_expansions])
    found.sort(key=lambda t: (t[0], t[1]))
    return [p for _, p in found]


# ---------- post-processing ----------

def shorten_path(g: GridEsdf, pts: np.ndarray, clearance: float = 0.0,
                 step: float = 0.05, n_checks: int = 32) -> np.ndarray:
    """Greedy line-of-sight shortcut that must stay in the deformation class."""
    pts = np.asarray(pts, dtype=float)
    if len(pts) <= 2:
        return pts
    keep = [0]
    i = 0
    while i < len(pts) - 1:
        j = len(pts) - 1
        while j > i + 1 and not segment_clear(g, pts[i], pts[j], clearance, step):
            j -= 1
        keep.append(j)
        i = j
    out = pts[keep]
    if len(out) == len(pts):
        return pts
    if uvd_equivalent(g, pts, out, clearance, n_checks, step):
        return out
    return pts


def prune_paths(g: GridEsdf, paths: list, clearance: float = 0.0,
                k_max: int = 5, detour_ratio: float = 2.0,
                n_checks: int = 32, step: float = 0.05) -> list:
    """Keep the shortest representative of each deformation class.

    Paths longer than detour_ratio times the shortest survivor are dropped.
    """
    if not paths:
        return []
    order = sorted(range(len(paths)), key=lambda i: (path_length(paths[i]), i))
    kept = []
    best = path_length(paths[order[0]])
    for i in order:
        if len(kept) >= k_max:
            break
        if path_length(paths[i]) > detour_ratio * best + 1e-9:
            break
        if any(uvd_equivalent(g, paths[i], kp, clearance, n_checks, step)
               for kp in kept):
            continue
        kept.append(np.asarray(paths[i], dtype=float))
    return kept


def candidate_paths(g: GridEsdf, start_xy, goal_xy, rng, n_samples: int = 600,
                    clearance: float = 0.0, k_max: int = 5,
                    detour_ratio: float = 2.0, step: float = 0.05,
                    n_checks: int = 32) -> list:
    """Roadmap growth, path enumeration, shortcut, and class pruning in one call.

    Returns up to k_max polylines (n_i, 2), shortest first, one per deformation
    class; empty when start and goal end up in different roadmap components.
    """
    rm = build_roadmap(g, start_xy, goal_xy, rng, n_samples, clearance, step, n_checks)
    idx_paths = k_paths(rm, k_max=k_max, detour_ratio=detour_ratio)
    if not idx_paths:
        return []
    polys = [shorten_path(g, rm.points(p), clearance, step, n_checks)
             for p in idx_paths]
    return prune_paths(g, polys, clearance, k_max, detour_ratio, n_checks, step)
