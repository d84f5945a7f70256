import numpy as np

from wbp import optim as op


# ---------- L-BFGS ----------

def _quadratic(A, b):
    def fun(x):
        return 0.5 * float(x @ A @ x) - float(b @ x), A @ x - b
    return fun


def test_lbfgs_quadratic_matches_linear_solve():
    rng = np.random.default_rng(0)
    B = rng.normal(size=(12, 12))
    A = B @ B.T + 12 * np.eye(12)
    b = rng.normal(size=12)
    res = op.lbfgs_minimize(_quadratic(A, b), np.zeros(12), g_tol=1e-8)
    assert res.status == "converged"
    assert np.max(np.abs(res.x - np.linalg.solve(A, b))) < 1e-7


def test_lbfgs_rosenbrock():
    def fun(x):
        f = 100.0 * (x[1] - x[0] ** 2) ** 2 + (1 - x[0]) ** 2
        g = np.array([-400.0 * x[0] * (x[1] - x[0] ** 2) - 2 * (1 - x[0]),
                      200.0 * (x[1] - x[0] ** 2)])
        return f, g

    res = op.lbfgs_minimize(fun, np.array([-1.2, 1.0]), g_tol=1e-8,
                            max_iters=500)
    assert res.status == "converged"
    assert np.max(np.abs(res.x - 1.0)) < 1e-5
    assert res.f < 1e-12


def test_lbfgs_cubic_hinge():
    # piecewise C2 objective of the same family as the penalty terms
    def fun(x):
        h = np.maximum(x - 1.0, 0.0)
        f = float(np.sum(h ** 3)) + float(x @ x)
        g = 3.0 * h ** 2 + 2.0 * x
        return f, g

    res = op.lbfgs_minimize(fun, np.full(5, 3.0), g_tol=1e-9)
    assert res.status == "converged"
    assert np.max(np.abs(res.x)) < 1e-8


def test_lbfgs_high_dimensional_memory_limit():
    rng = np.random.default_rng(3)
    d = rng.uniform(0.5, 50.0, size=60)
    b = rng.normal(size=60)

    def fun(x):
        return 0.5 * float(x @ (d * x)) - float(b @ x), d * x - b

    res = op.lbfgs_minimize(fun, np.zeros(60), g_tol=1e-7, max_iters=2000,
                            memory=16)
    assert res.status == "converged"
    assert np.max(np.abs(res.x - b / d)) < 1e-6


def test_lbfgs_unbounded_reports_failure_without_blowup():
    def fun(x):
        return float(x[0]), np.array([1.0])

    res = op.lbfgs_minimize(fun, np.array([0.0]), max_iters=50)
    assert res.status == "line_search_failed"
    assert np.isfinite(res.f)
    assert res.f <= 0.0  # best iterate, not the start


def test_lbfgs_respects_deadline():
    import time

    def fun(x):
        time.sleep(0.002)
        return float(x @ x), 2 * x

    t0 = time.monotonic()
    res = op.lbfgs_minimize(fun, np.full(4, 10.0), g_tol=1e-16,
                            deadline=t0 + 0.02, max_iters=10000)
    assert res.status in ("deadline", "converged")
    assert time.monotonic() - t0 < 1.0


# ---------- augmented Lagrangian ----------

def test_alm_scalar_equality():
    # min x^2 s.t. x = 1; KKT: x*=1, lambda*=-2
    def lag(x, lam, sigma):
        r = x[0] - 1.0
        f = x[0] ** 2 + lam[0] * r + 0.5 * sigma * r * r
        g = np.array([2 * x[0] + lam[0] + sigma * r])
        return f, g

    res = op.alm_minimize(lag, lambda x: np.array([x[0] - 1.0]),
                          np.array([3.0]), n_eq=1, eq_tol=1e-8, g_tol=1e-10)
    assert res.status == "converged"
    assert abs(res.x[0] - 1.0) < 1e-7
    assert abs(res.lam[0] + 2.0) < 1e-5


def test_alm_plane_constraint():
    # min |x|^2 s.t. x0 + x1 = 2 -> (1, 1)
    def lag(x, lam, sigma):
        r = x[0] + x[1] - 2.0
        f = float(x @ x) + lam[0] * r + 0.5 * sigma * r * r
        g = 2 * x + (lam[0] + sigma * r) * np.array([1.0, 1.0])
        return f, g

    res = op.alm_minimize(lag, lambda x: np.array([x[0] + x[1] - 2.0]),
                          np.zeros(2), n_eq=1, eq_tol=1e-8, g_tol=1e-10)
    assert res.status == "converged"
    assert np.max(np.abs(res.x - 1.0)) < 1e-7


def test_alm_penalty_escalation_from_small_sigma():
    # nonconvex pull away from the constraint needs a few sigma bumps
    def lag(x, lam, sigma):
        r = x[0] - 2.0
        f = -3.0 * x[0] + lam[0] * r + 0.5 * sigma * r * r
        g = np.array([-3.0 + lam[0] + sigma * r])
        return f, g

    res = op.alm_minimize(lag, lambda x: np.array([x[0] - 2.0]),
                          np.array([0.0]), n_eq=1, sigma0=1.0, eq_tol=1e-9,
                          g_tol=1e-11, max_outer=60)
    assert res.status == "converged"
    assert abs(res.x[0] - 2.0) < 1e-8
    assert abs(res.lam[0] - 3.0) < 1e-6  # gradient balance at the optimum


def test_alm_vector_residual():
    # project the origin onto the line x = (1,2,3) + t(1,1,0) under two pins
    def lag(x, lam, sigma):
        r = np.array([x[1] - x[0] - 1.0, x[2] - 3.0])
        f = float(x @ x) + float(lam @ r) + 0.5 * sigma * float(r @ r)
        g = 2 * x.copy()
        g[0] += -(lam[0] + sigma * r[0])
        g[1] += lam[0] + sigma * r[0]
        g[2] += lam[1] + sigma * r[1]
        return f, g

    def res_fun(x):
        return np.array([x[1] - x[0] - 1.0, x[2] - 3.0])

    res = op.alm_minimize(lag, res_fun, np.zeros(3), n_eq=2, eq_tol=1e-9,
                          g_tol=1e-11)
    assert res.status == "converged"
    assert np.max(np.abs(res.x - np.array([-0.5, 0.5, 3.0]))) < 1e-7
