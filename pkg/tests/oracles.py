"""Independent reference implementations used as test oracles.

Written for clarity, not speed; none of them imports the code under test.
"""

import math

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

NOISE = -1


def naive_vlad(features, centroids):
    """Straight-line VLAD: nearest centroid, residual sums, intra then global L2."""
    n_c, d = len(centroids), len(centroids[0])
    blocks = [[0.0] * d for _ in range(n_c)]
    for x in features:
        best, best_d = 0, math.inf
        for k, c in enumerate(centroids):
            dist = sum((a - b) ** 2 for a, b in zip(x, c))
            if dist < best_d:
                best, best_d = k, dist
        for j in range(d):
            blocks[best][j] += x[j] - centroids[best][j]
    for b in blocks:
        norm = math.sqrt(sum(v * v for v in b))
        if norm > 0:
            for j in range(d):
                b[j] /= norm
    flat = [v for b in blocks for v in b]
    total = math.sqrt(sum(v * v for v in flat))
    return [v / total for v in flat] if total > 0 else flat


def naive_dbscan(xy, eps, min_pts):
    """Reference: core points, union-find components, borders to the lowest adjacent cluster."""
    n = len(xy)
    near = [[j for j in range(n) if np.hypot(*(xy[i] - xy[j])) <= eps] for i in range(n)]
    core = [len(near[i]) >= min_pts for i in range(n)]
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i in range(n):
        for j in near[i]:
            if core[i] and core[j]:
                ri, rj = find(i), find(j)
                parent[max(ri, rj)] = min(ri, rj)
    roots = sorted({find(i) for i in range(n) if core[i]}, key=lambda r: min(i for i in range(n) if core[i] and find(i) == r))
    cid = {r: c for c, r in enumerate(roots)}
    labels = [cid[find(i)] if core[i] else NOISE for i in range(n)]
    for i in range(n):
        if not core[i]:
            adj = [labels[j] for j in near[i] if core[j]]
            if adj:
                labels[i] = min(adj)
    return labels


def oracle_recall(records, n):
    return sum(any(t in set(r.gt_ids) for t in r.retrieved_ids[:n]) for r in records) / len(records)


def oracle_topk(records, k, n):
    count = 0
    for r in records:
        inter = 0
        for t in r.retrieved_ids[:n]:
            for g in r.gt_ids[:n]:
                inter += t == g
        count += inter >= k
    return count / len(records)


def penalized_fit_oracle(local, world, g_local, g_world, weight=1e9, starts=8):
    """Minimize sum |R p + t - q|^2 + weight |R g_l - g_w|^2 over SO(3) x R^3 numerically.

    Multi-start Levenberg-Marquardt over a rotation-vector parameterization,
    each start a different heading about the world vertical.
    """
    local, world = np.asarray(local, float), np.asarray(world, float)
    sw = math.sqrt(weight)

    def residuals(x):
        r = Rotation.from_rotvec(x[:3]).as_matrix()
        return np.concatenate([(local @ r.T + x[3:] - world).ravel(), sw * (r @ g_local - g_world)])

    best = None
    for k in range(starts):
        yaw = 2 * math.pi * k / starts - math.pi
        x0 = np.concatenate([[0.0, 0.0, yaw], world.mean(axis=0) - local.mean(axis=0)])
        sol = least_squares(residuals, x0, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=20000)
        if best is None or sol.cost < best.cost:
            best = sol
    return Rotation.from_rotvec(best.x[:3]).as_matrix(), best.x[3:]


