"""Independent reference implementations used to check the package.

Each one is the slow, obvious version of a computation: no shared code with
the package under test.
"""

import itertools
import math

import numpy as np


def union_find_partition(xyz, tol):
    """Connected components of the tolerance graph by O(n^2) pair scanning."""
    n = len(xyz)
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            a = parent[a]
        return a

    for i in range(n):
        for j in range(i + 1, n):
            if math.dist(xyz[i], xyz[j]) <= tol:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[ri] = rj
    groups = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return list(groups.values())


def as_partition(groups):
    return {frozenset(int(i) for i in g) for g in groups}


def kalman_filter(x0, P0, steps, q):
    """Textbook linear KF for the CV model with position measurements.

    ``steps`` is an iterable of (dt, z, R). Returns the list of posteriors.
    """
    x, P = np.array(x0, float), np.array(P0, float)
    out = []
    for dt, z, R in steps:
        F = np.eye(4)
        F[0, 2] = F[1, 3] = dt
        # white-acceleration noise as the continuous-time integral
        Q = q * np.array(
            [
                [dt**3 / 3, 0, dt**2 / 2, 0],
                [0, dt**3 / 3, 0, dt**2 / 2],
                [dt**2 / 2, 0, dt, 0],
                [0, dt**2 / 2, 0, dt],
            ]
        )
        x = F @ x
        P = F @ P @ F.T + Q
        Hm = np.eye(2, 4)
        S = Hm @ P @ Hm.T + R
        K = P @ Hm.T @ np.linalg.inv(S)
        x = x + K @ (np.asarray(z) - Hm @ x)
        IKH = np.eye(4) - K @ Hm
        P = IKH @ P @ IKH.T + K @ R @ K.T
        out.append((x.copy(), P.copy()))
    return out


def jpda_brute_force(likelihood, gated, pd, clutter):
    """Association marginals by listing every feasible joint event.

    An event gives each track either one gated detection (each detection
    used at most once) or nothing. Weight: prod over assigned tracks of
    pd * L / clutter times prod over missed tracks of (1 - pd).
    Returns beta (T, D + 1), last column the miss probability.
    """
    T, D = likelihood.shape
    options = [[None] + [j for j in range(D) if gated[i, j]] for i in range(T)]
    beta = np.zeros((T, D + 1))
    total = 0.0
    for ev in itertools.product(*options):
        used = [j for j in ev if j is not None]
        if len(used) != len(set(used)):
            continue
        w = 1.0
        for i, j in enumerate(ev):
            w *= (1 - pd) if j is None else pd * likelihood[i, j] / clutter
        total += w
        for i, j in enumerate(ev):
            beta[i, D if j is None else j] += w
    return beta / total


def svm_dual_projected_gradient(K, y, C, iters=20000, tol=1e-10):
    """max sum(a) - 1/2 a'Qa  s.t. 0 <= a <= C, y'a = 0, by projected gradient.

    The projection onto the box-and-hyperplane set is computed exactly by
    bisection on the multiplier of the equality constraint.
    """
    Q = (y[:, None] * y[None, :]) * K
    n = len(y)
    a = np.zeros(n)
    L = np.linalg.eigvalsh(Q).max() + 1e-12
    step = 1.0 / L

    def project(v):
        # g(mu) = y'clip(v - mu*y, 0, C) is piecewise linear and non-increasing;
        # evaluate it at every breakpoint and interpolate inside the bracket.
        bp = np.sort(np.concatenate([v * y, (v - C) * y]))
        g = np.clip(v[None, :] - bp[:, None] * y[None, :], 0, C) @ y
        if g[0] <= 0:
            mu = bp[0]
        elif g[-1] >= 0:
            mu = bp[-1]
        else:
            k = np.flatnonzero(g <= 0)[0]
            a, b, ga, gb = bp[k - 1], bp[k], g[k - 1], g[k]
            mu = b if ga == gb else a + (b - a) * ga / (ga - gb)
        return np.clip(v - mu * y, 0, C)

    # accelerated (FISTA) steps
    z, t = a.copy(), 1.0
    prev = -np.inf
    for k in range(iters):
        g = 1 - Q @ z
        a_new = project(z + step * g)
        t_new = (1 + math.sqrt(1 + 4 * t * t)) / 2
        z = a_new + (t - 1) / t_new * (a_new - a)
        a, t = a_new, t_new
        if k % 100 == 0:
            f = a.sum() - 0.5 * a @ Q @ a
            if abs(f - prev) <= tol * max(1.0, abs(f)):
                break
            prev = f
    svm_dual_projected_gradient.iterations = k + 1
    return a, float(a.sum() - 0.5 * a @ Q @ a)


def voxel_iou(a_lo, a_hi, b_lo, b_hi, res=0.001):
    """IoU by counting voxel centres of a ``res`` lattice on each axis.

    The three axes are independent for axis-aligned boxes, so the voxel count
    of each box and of the overlap factors into per-axis lattice counts.
    """

    def count(lo, hi):
        # lattice points k*res + res/2 inside [lo, hi)
        return max(0, math.ceil((hi - res / 2) / res - 1e-12) - math.ceil((lo - res / 2) / res - 1e-12))

    na = nb = ni = 1
    for k in range(3):
        na *= count(a_lo[k], a_hi[k])
        nb *= count(b_lo[k], b_hi[k])
        ni *= count(max(a_lo[k], b_lo[k]), min(a_hi[k], b_hi[k]))
    union = na + nb - ni
    return ni / union if union else 0.0


def human_volume(w, d, h):
    """Direct inequality check for the human-sized box rule."""
    return 0.2 <= w <= 1.0 and 0.2 <= d <= 1.0 and 0.5 <= h <= 2.0
