"""Reference restoration policies: request-volume replay, greedy nearest,
and an open-tour TSP heuristic with service times."""
from __future__ import annotations

import itertools
import math

import numpy as np


def request_volume_sequence(regions, recorded=None) -> list[int]:
    """The current-practice ordering: most repair requests first.

    Ties break by ascending region id; if an actually-recorded sequence is
    supplied (historical replay), it is returned verbatim.
    """
    if recorded is not None:
        return [int(r) for r in recorded]
    return [r.id for r in sorted(regions, key=lambda r: (-r.request_count, r.id))]


def greedy_nearest(state, candidates) -> int:
    """Nearest unrepaired region; ties break by lower id."""
    best = min(candidates, key=lambda c: (c.distance_km, c.region_id))
    return best.region_id


def fixed_sequence_policy(sequence):
    """Adapt a precomputed visiting order to the rollout policy interface."""
    order = {int(rid): pos for pos, rid in enumerate(sequence)}

    def policy(state, candidates):
        return min(candidates, key=lambda c: order[c.region_id]).region_id

    return policy


def _path_length(depot, coords, order) -> float:
    total = 0.0
    pos = depot
    for rid in order:
        nxt = coords[rid]
        total += math.hypot(nxt[0] - pos[0], nxt[1] - pos[1])
        pos = nxt
    return total


def tsp_service_tour(regions, point_estimates, depot=(0.0, 0.0)) -> list[int]:
    """Open tour from the depot minimizing total travel plus repair time.

    The repair-time sum is the same for every visiting order, so the
    objective reduces to the shortest open path; built by nearest-neighbor
    and improved with first-improvement 2-opt segment reversals.
    """
    ids = [r.id for r in regions]
    if any(point_estimates[rid] <= 0 for rid in ids):
        raise ValueError("point estimates must be positive hours")
    coords = {r.id: (float(r.coord[0]), float(r.coord[1])) for r in regions}
    if len(ids) <= 1:
        return list(ids)

    # nearest-neighbor construction
    remaining = set(ids)
    pos = tuple(depot)
    order: list[int] = []
    while remaining:
        nxt = min(
            remaining,
            key=lambda rid: (math.hypot(coords[rid][0] - pos[0], coords[rid][1] - pos[1]), rid),
        )
        order.append(nxt)
        remaining.discard(nxt)
        pos = coords[nxt]

    # 2-opt: reverse order[i:j+1]; repeat until no improving move
    def dist(a, b):
        return math.hypot(a[0] - b[0], a[1] - b[1])

    pts = [tuple(depot)] + [coords[rid] for rid in order]
    improved = True
    while improved:
        improved = False
        n = len(order)
        for i in range(n - 1):
            for j in range(i + 1, n):
                before = dist(pts[i], pts[i + 1])
                after = dist(pts[i], pts[j + 1])
                if j + 2 <= n:
                    before += dist(pts[j + 1], pts[j + 2])
                    after += dist(pts[i + 1], pts[j + 2])
                if after < before - 1e-12:
                    pts[i + 1 : j + 2] = reversed(pts[i + 1 : j + 2])
                    order[i : j + 1] = reversed(order[i : j + 1])
                    improved = True
    return order


def exact_open_tour(regions, depot=(0.0, 0.0)) -> tuple[list[int], float]:
    """Exact shortest open path by exhaustive dynamic programming (N <= 10)."""
    ids = [r.id for r in regions]
    n = len(ids)
    if n > 10:
        raise ValueError("exact solver is limited to 10 regions")
    coords = np.array([[r.coord[0], r.coord[1]] for r in regions], dtype=float)
    depot = np.asarray(depot, dtype=float)
    d0 = np.hypot(*(coords - depot).T)
    dmat = np.hypot(
        coords[:, None, 0] - coords[None, :, 0], coords[:, None, 1] - coords[None, :, 1]
    )
    best = {(1 << i, i): (d0[i], [i]) for i in range(n)}
    for size in range(2, n + 1):
        nxt = {}
        for (mask, last), (cost, path) in best.items():
            if bin(mask).count("1") != size - 1:
                continue
            for j in range(n):
                if mask & (1 << j):
                    continue
                key = (mask | (1 << j), j)
                cand = cost + dmat[last, j]
                if key not in nxt or cand < nxt[key][0]:
                    nxt[key] = (cand, path + [j])
        best.update(nxt)
    full = (1 << n) - 1
    cost, path = min(best[(full, j)] for j in range(n))
    return [ids[i] for i in path], float(cost)


def tour_cost(regions, depot, order) -> float:
    coords = {r.id: (float(r.coord[0]), float(r.coord[1])) for r in regions}
    return _path_length(tuple(depot), coords, order)


def brute_force_open_tour(regions, depot=(0.0, 0.0)) -> tuple[list[int], float]:
    """Full permutation enumeration; only for tiny test instances."""
    ids = [r.id for r in regions]
    best_order, best_cost = None, math.inf
    for perm in itertools.permutations(ids):
        c = tour_cost(regions, depot, perm)
        if c < best_cost:
            best_order, best_cost = list(perm), c
    return best_order, best_cost
