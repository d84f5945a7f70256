"""Unconstrained and equality-constrained smooth minimization.

lbfgs_minimize is a limited-memory quasi-Newton method with a bisection line
search enforcing the weak Wolfe conditions, which keeps it usable on objectives
that are only piecewise C2 (cubic hinge penalties). alm_minimize wraps it in a
multiplier loop for equality constraints.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


# ---------- L-BFGS ----------

@dataclass
class LbfgsResult:
    x: np.ndarray
    f: float
    g: np.ndarray
    n_iters: int
    n_evals: int
    status: str  # converged | max_iters | line_search_failed | deadline | stalled


def _two_loop(g, s_list, y_list, rho_list):
    q = g.copy()
    alphas = []
    for s, y, rho in zip(reversed(s_list), reversed(y_list), reversed(rho_list)):
        a = rho * float(s @ q)
        alphas.append(a)
        q -= a * y
    if s_list:
        s, y = s_list[-1], y_list[-1]
        q *= float(s @ y) / float(y @ y)
    for (s, y, rho), a in zip(zip(s_list, y_list, rho_list), reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return q


def lbfgs_minimize(fun: Callable, x0, g_tol: float = 1e-6, max_iters: int = 500,
                   memory: int = 16, c1: float = 1e-4, c2: float = 0.9,
                   max_ls: int = 60, deadline: Optional[float] = None,
                   f_tol_rel: float = 0.0) -> LbfgsResult:
    """Minimize fun(x) -> (f, grad) from x0.

    The line search brackets a weak Wolfe step by doubling and bisection; on
    failure the best iterate seen so far is returned. `deadline` is an absolute
    time.monotonic() value checked once per iteration. A positive f_tol_rel
    stops early ("ftol") once an accepted step decreases f by less than
    f_tol_rel relative, useful when gradient norms stay large near the optimum.
    """
    x = np.asarray(x0, dtype=float).copy()
    f, g = fun(x)
    n_evals = 1
    best_x, best_f, best_g = x.copy(), f, g.copy()
    s_list, y_list, rho_list = [], [], []
    status = "max_iters"
    it = 0
    for it in range(1, max_iters + 1):
        if np.max(np.abs(g)) <= g_tol:
            status = "converged"
            break
        if deadline is not None and time.monotonic() >= deadline:
            status = "deadline"
            break
        d = -_two_loop(g, s_list, y_list, rho_list)
        gd = float(g @ d)
        if gd >= 0.0:  # stale curvature; fall back to steepest descent
            s_list, y_list, rho_list = [], [], []
            d = -g
            gd = float(g @ d)
        lo, hi = 0.0, np.inf
        alpha = 1.0
        f_new, g_new = f, g
        f_lo, g_lo = None, None
        ok = False
        for _ in range(max_ls):
            f_new, g_new = fun(x + alpha * d)
            n_evals += 1
            with np.errstate(invalid="ignore", over="ignore"):
                gd_new = float(g_new @ d) if np.isfinite(f_new) else np.nan
            if not np.isfinite(gd_new) or f_new > f + c1 * alpha * gd:
                hi = alpha
            elif gd_new < c2 * gd:
                lo = alpha
                f_lo, g_lo = f_new, g_new
                if alpha > 1e10:  # descent never flattens; treat as unbounded
                    break
            else:
                ok = True
                break
            alpha = (lo + hi) / 2 if np.isfinite(hi) else 2.0 * alpha
        if not ok:
            # a plain-decrease point is still progress even without curvature
            if 0.0 < lo <= 1e10 and f_lo is not None and f_lo < f:
                alpha, f_new, g_new = lo, f_lo, g_lo
            else:
                status = "line_search_failed"
                break
        s = alpha * d
        y = g_new - g
        x = x + s
        f_prev = f
        f, g = f_new, g_new
        if f < best_f:
            best_x, best_f, best_g = x.copy(), f, g.copy()
        if f_tol_rel > 0.0 and f_prev - f <= f_tol_rel * max(1.0, abs(f_prev)):
            status = "ftol"
            break
        sy = float(s @ y)
        if sy > 1e-12 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            s_list.append(s)
            y_list.append(y)
            rho_list.append(1.0 / sy)
            if len(s_list) > memory:
                s_list.pop(0)
                y_list.pop(0)
                rho_list.pop(0)
        if float(np.linalg.norm(s)) <= 1e-14 * max(1.0, float(np.linalg.norm(x))):
            status = "stalled"
            break
    if f < best_f:
        best_x, best_f, best_g = x, f, g
    if status != "converged" and np.max(np.abs(best_g)) <= g_tol:
        status = "converged"
    return LbfgsResult(x=best_x, f=best_f, g=best_g, n_iters=it,
                       n_evals=n_evals, status=status)


# ---------- augmented Lagrangian ----------

@dataclass
class AlmResult:
    x: np.ndarray
    lam: np.ndarray
    sigma: float
    residual: np.ndarray
    n_outer: int
    n_evals: int
    status: str  # converged | max_outer | deadline | inner_failure
    inner_statuses: list = field(default_factory=list)


def alm_minimize(lag_fun: Callable, res_fun: Callable, x0, n_eq: int,
                 lam0=None, sigma0: float = 1e2, sigma_scale: float = 5.0,
                 dec_factor: float = 0.5, eq_tol: float = 1e-4,
                 g_tol: float = 1e-4, max_outer: int = 25,
                 inner_iters: int = 200, memory: int = 16,
                 deadline: Optional[float] = None,
                 inner_f_tol: float = 0.0) -> AlmResult:
    """Equality-constrained minimization by the method of multipliers.

    lag_fun(x, lam, sigma) -> (value, grad) of the augmented Lagrangian
        f(x) + lam . r(x) + sigma/2 |r(x)|^2,
    res_fun(x) -> r(x). Multipliers follow lam += sigma * r; sigma grows by
    sigma_scale whenever the residual norm fails to shrink by dec_factor.
    """
    x = np.asarray(x0, dtype=float).copy()
    lam = np.zeros(n_eq) if lam0 is None else np.asarray(lam0, dtype=float).copy()
    sigma = float(sigma0)
    r = np.asarray(res_fun(x), dtype=float)
    prev_norm = float(np.linalg.norm(r))
    n_evals = 0
    status = "max_outer"
    inner_statuses = []
    outer = 0
    for outer in range(1, max_outer + 1):
        if deadline is not None and time.monotonic() >= deadline:
            status = "deadline"
            break
        res = lbfgs_minimize(lambda v: lag_fun(v, lam, sigma), x, g_tol=g_tol,
                             max_iters=inner_iters, memory=memory,
                             deadline=deadline, f_tol_rel=inner_f_tol)
        n_evals += res.n_evals
        inner_statuses.append(res.status)
        x = res.x
        r = np.asarray(res_fun(x), dtype=float)
        r_norm = float(np.linalg.norm(r))
        if np.max(np.abs(r)) <= eq_tol and res.status in ("converged", "stalled", "ftol"):
            lam = lam + sigma * r
            status = "converged"
            break
        lam = lam + sigma * r
        if r_norm > dec_factor * prev_norm:
            sigma *= sigma_scale
        prev_norm = r_norm
    return AlmResult(x=x, lam=lam, sigma=sigma, residual=r, n_outer=outer,
                     n_evals=n_evals, status=status, inner_statuses=inner_statuses)
