"""Independent reference computations the tests check the package against."""
from __future__ import annotations

import math

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog


def wasserstein_lp(a, b) -> float:
    """W1 via the minimum-cost transport LP between empirical measures.

    Solver tolerance is ~1e-7, so this is the coarse reference; use
    wasserstein_exact where 1e-9 agreement is asserted.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    n, m = a.size, b.size
    cost = np.abs(a[:, None] - b[None, :]).ravel()
    A_eq = np.zeros((n + m, n * m))
    for i in range(n):
        A_eq[i, i * m : (i + 1) * m] = 1.0
    for j in range(m):
        A_eq[n + j, j::m] = 1.0
    b_eq = np.concatenate([np.full(n, 1.0 / n), np.full(m, 1.0 / m)])
    res = linprog(cost, A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    assert res.status == 0, res.message
    return float(res.fun)


def wasserstein_exact(a, b) -> float:
    """Exact min-cost transport between empirical measures of small multisets.

    Replicates every sample to atoms of equal mass 1/lcm(n, m) and solves
    the resulting assignment problem combinatorially, so the optimum is
    exact up to float summation (no LP solver tolerance involved).
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    n, m = a.size, b.size
    L = math.lcm(n, m)
    a_rep = np.repeat(a, L // n)
    b_rep = np.repeat(b, L // m)
    cost = np.abs(a_rep[:, None] - b_rep[None, :])
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum() / L)


def order_statistic_quantile(scores, alpha) -> float:
    """ceil(alpha*(n+1))-th smallest score, computed the pedestrian way."""
    xs = sorted(scores)
    n = len(xs)
    k = math.ceil(round(alpha * (n + 1), 9))
    if k > n:
        return math.inf
    return xs[k - 1]


def empirical_inf_quantile(values, alpha) -> float:
    """Smallest value whose equal-weight empirical CDF reaches alpha."""
    xs = sorted(values)
    n = len(xs)
    for i, v in enumerate(xs, start=1):
        if i / n >= alpha - 1e-12:
            return v
    return xs[-1]


def replay_outages(depot, coords, speed_kmh, repairs, sequence):
    """Hand-formula accounting replay, independent of the simulator.

    outage(m) = cumulative travel through leg m + repairs of all regions
    up to and including m, with each running sum accumulated left to right.
    """
    cum_travel = 0.0
    cum_repair = 0.0
    pos = tuple(depot)
    outages = {}
    for rid in sequence:
        target = tuple(coords[rid])
        cum_travel = cum_travel + math.hypot(target[0] - pos[0], target[1] - pos[1]) / speed_kmh
        cum_repair = cum_repair + repairs[rid]
        outages[rid] = cum_travel + cum_repair
        pos = target
    return outages, cum_travel + cum_repair
