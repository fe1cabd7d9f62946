"""Independent reference computations used only by the tests.

Nothing here imports the code under test beyond plain data containers, so
agreement is a genuine cross-check.
"""

import itertools
import math

import numpy as np
from scipy.optimize import minimize


def straight_line_forward(layers, x):
    """Loop-based forward pass: explicit sums, no matrix products."""
    h = [float(v) for v in x]
    for li, (W, b) in enumerate(layers):
        out = []
        for i in range(len(b)):
            s = float(b[i])
            for j in range(len(h)):
                s += float(W[i][j]) * h[j]
            out.append(s)
        if li < len(layers) - 1:
            out = [v if v > 0 else 0.0 for v in out]
        h = out
    mx = max(h)
    e = [math.exp(v - mx) for v in h]
    tot = sum(e)
    return np.array([v / tot for v in e])


def central_diff(f, theta, h=1e-5):
    theta = np.asarray(theta, dtype=np.float64)
    g = np.zeros_like(theta)
    for i in range(theta.size):
        tp = theta.copy()
        tm = theta.copy()
        tp.flat[i] += h
        tm.flat[i] -= h
        g.flat[i] = (f(tp) - f(tm)) / (2 * h)
    return g


def smooth_diff(f, theta, h=1e-5, kink_tol=1e-4):
    """Central differences plus a mask of coordinates that straddle no kink.

    Along a smooth direction the one-sided slopes differ by ``h * f''``; a
    kink inside ``[-h, h]`` adds the full slope jump. Coordinates whose
    one-sided slopes differ by more than ``kink_tol`` times the gradient
    scale are masked out, since their central difference is unreliable at
    that tolerance.
    """
    theta = np.asarray(theta, dtype=np.float64)
    f0 = f(theta)
    fd = np.zeros_like(theta)
    ok = np.ones(theta.shape, dtype=bool)
    fwd = np.zeros_like(theta)
    bwd = np.zeros_like(theta)
    for i in range(theta.size):
        tp = theta.copy()
        tm = theta.copy()
        tp.flat[i] += h
        tm.flat[i] -= h
        fp, fm = f(tp), f(tm)
        fd.flat[i] = (fp - fm) / (2 * h)
        fwd.flat[i] = (fp - f0) / h
        bwd.flat[i] = (f0 - fm) / h
    scale = max(np.max(np.abs(fd)), 1e-12)
    ok = np.abs(fwd - bwd) <= kink_tol * scale
    return fd, ok


def rel_err_smooth(g, f, theta, h=1e-5):
    """Relative error of ``g`` against central differences on kink-free coordinates."""
    fd, ok = smooth_diff(f, theta, h)
    assert ok.mean() >= 0.8, f"only {ok.mean():.0%} of coordinates are kink-free"
    g = np.asarray(g).reshape(fd.shape)
    scale = max(np.max(np.abs(fd[ok])) if ok.any() else 0.0, 1e-12)
    return float(np.max(np.abs(g[ok] - fd[ok])) / scale) if ok.any() else 0.0


def rel_err(g, fd):
    scale = max(np.max(np.abs(fd)), 1e-12)
    return float(np.max(np.abs(np.asarray(g) - np.asarray(fd))) / scale)


def max_coordinate_on_ball(S, delta, axis):
    """Numerically maximise ``v[axis]`` subject to ``v' S^-1 v <= delta^2``."""
    m = S.shape[0]
    Sinv = np.linalg.inv(S)
    x0 = np.zeros(m)
    x0[axis] = 1e-3 * delta
    cons = {"type": "ineq", "fun": lambda v: delta ** 2 - v @ Sinv @ v, "jac": lambda v: -2 * Sinv @ v}
    res = minimize(lambda v: -v[axis], x0, jac=lambda v: -np.eye(m)[axis], constraints=[cons],
                   method="SLSQP", options={"ftol": 1e-14, "maxiter": 500})
    return -res.fun


def brute_force_mck(vals, cost, Q):
    """Best total over every assignment of one option per row with total cost <= Q."""
    n, K = vals.shape
    best = -np.inf
    for combo in itertools.product(range(K), repeat=n):
        c = sum(int(cost[k]) for k in combo)
        if c <= Q:
            best = max(best, sum(vals[i, k] for i, k in enumerate(combo)))
    return best


def brute_force_wasserstein(X, Z, p=2):
    n = len(X)
    D = np.linalg.norm(X[:, None, :] - Z[None, :, :], axis=-1) ** p
    best = min(sum(D[i, perm[i]] for i in range(n)) for perm in itertools.permutations(range(n)))
    return (best / n) ** (1.0 / p)


def softmax_bound_closed_form(zl, zu):
    """Per-class bounds by the textbook formula, written out term by term."""
    k = len(zl)
    lo, hi = [], []
    for i in range(k):
        den_l = math.exp(zl[i]) + sum(math.exp(zu[j]) for j in range(k) if j != i)
        den_u = math.exp(zu[i]) + sum(math.exp(zl[j]) for j in range(k) if j != i)
        lo.append(math.exp(zl[i]) / den_l)
        hi.append(math.exp(zu[i]) / den_u)
    return np.array(lo), np.array(hi)
