"""Earth-mover distance between equal-size point clouds.

The distance is the minimum-cost perfect matching under Euclidean cost,
divided by the number of points. Small problems are solved exactly; larger
ones use an epsilon-scaling auction whose result obeys

    optimum <= auction_cost <= optimum * (1 + rel_tol)

because the final epsilon is ``rel_tol * lower_bound / n`` and an auction
that terminates at epsilon is within ``n * epsilon`` of the optimum.
"""
from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment

from .pointcloud import as_cloud, squared_distances

EXACT_MAX = 128


def cost_matrix(a, b) -> np.ndarray:
    return np.sqrt(squared_distances(np.asarray(a, float), np.asarray(b, float)))


def exact_assignment(cost: np.ndarray) -> np.ndarray:
    rows, cols = linear_sum_assignment(cost)
    assign = np.empty(len(rows), dtype=np.int64)
    assign[rows] = cols
    return assign


def auction_assignment(cost: np.ndarray, rel_tol: float = 1e-3) -> np.ndarray:
    """Jacobi-style forward auction with epsilon scaling (minimisation form)."""
    n = cost.shape[0]
    if n == 1:
        return np.zeros(1, dtype=np.int64)
    lower = max(cost.min(axis=1).sum(), cost.min(axis=0).sum())
    # an all-zero lower bound still needs a positive epsilon to terminate
    floor = 1e-12 * max(float(cost.max()), 1.0) * n
    eps_final = rel_tol * max(lower, floor) / n
    benefit = -cost
    prices = np.zeros(n)
    eps = max((cost.max() - cost.min()) / 4.0, eps_final)
    persons = np.arange(n)
    while True:
        owner = np.full(n, -1)
        assign = np.full(n, -1)
        free = persons
        while free.size:
            vals = benefit[free] - prices
            top = np.argpartition(-vals, 1, axis=1)[:, :2]
            v = np.take_along_axis(vals, top, axis=1)
            first = v[:, 0] >= v[:, 1]
            j = np.where(first, top[:, 0], top[:, 1])
            v1 = np.where(first, v[:, 0], v[:, 1])
            v2 = np.where(first, v[:, 1], v[:, 0])
            bids = prices[j] + (v1 - v2) + eps
            # per object: highest bid wins, lowest person index on ties
            order = np.lexsort((free, -bids, j))
            js = j[order]
            head = np.r_[True, js[1:] != js[:-1]]
            win = order[head]
            objs, who = j[win], free[win]
            prev = owner[objs]
            assign[prev[prev >= 0]] = -1
            owner[objs] = who
            assign[who] = objs
            prices[objs] = bids[win]
            free = np.flatnonzero(assign < 0)
        if eps <= eps_final:
            return assign
        eps = max(eps / 5.0, eps_final)


def emd(a, b, method: str = "auto", exact_max: int = EXACT_MAX, rel_tol: float = 1e-3) -> float:
    """Per-point earth-mover distance between two equal-size clouds.

    ``method`` is ``"exact"``, ``"auction"`` or ``"auto"`` (exact up to
    ``exact_max`` points).
    """
    A, B = as_cloud(a, "emd A"), as_cloud(b, "emd B")
    if len(A) != len(B):
        raise ValueError(f"emd: clouds differ in size ({len(A)} vs {len(B)})")
    C = cost_matrix(A, B)
    if method == "auto":
        method = "exact" if len(A) <= exact_max else "auction"
    if method == "exact":
        assign = exact_assignment(C)
    elif method == "auction":
        assign = auction_assignment(C, rel_tol)
    else:
        raise ValueError(f"emd: unknown method {method!r}")
    # summing sorted costs keeps the value independent of point order
    return float(np.sort(C[np.arange(len(A)), assign]).sum() / len(A))
