"""Brute-force verifiers for the test suite.

Nothing in here imports the solver, planner or anchor modules; each oracle is a
direct enumeration or textbook relaxation so it can check those paths independently.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class OracleReport:
    oracle_value: float
    system_value: float
    gap: float
    passed: bool

    @classmethod
    def compare(cls, oracle_value: float, system_value: float, bound: float) -> "OracleReport":
        if math.isinf(oracle_value) or math.isinf(system_value):
            gap = 0.0 if oracle_value == system_value else math.inf
        else:
            gap = abs(oracle_value - system_value)
        return cls(float(oracle_value), float(system_value), gap, gap <= bound)


@dataclass(frozen=True)
class Assignment:
    feasible: bool
    cost: float
    landmarks: tuple[int, ...]
    note: str = ""


def exhaustive_assignment(costs, r_loc: float, landmark_positions) -> Assignment:
    """Cheapest query->landmark map whose consecutive landmarks are <= r_loc apart.

    Enumerates all m**q integral assignments. An infeasible result only rules out
    integral matchings; a fractional flow may still satisfy the continuity bound.
    """
    costs = np.asarray(costs, dtype=float)
    pos = np.asarray(landmark_positions, dtype=float)
    q, m = costs.shape
    if q > 6 or m > 5:
        raise ValueError("exhaustive_assignment is capped at q <= 6, m <= 5")
    step = np.sqrt(((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1))
    best_cost, best = math.inf, None
    for combo in itertools.product(range(m), repeat=q):
        if any(step[combo[l], combo[l + 1]] > r_loc for l in range(q - 1)):
            continue
        total = sum(costs[l, combo[l]] for l in range(q))
        if total < best_cost:
            best_cost, best = total, combo
    if best is None:
        return Assignment(False, math.inf, (), "no integral assignment; fractional flows may exist")
    return Assignment(True, float(best_cost), tuple(int(i) for i in best))


def exhaustive_kcenter(points, k: int) -> float:
    """Optimal k-center radius with centers restricted to the input points."""
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    if n > 12 or k > 4:
        raise ValueError("exhaustive_kcenter is capped at n <= 12, k <= 4")
    if k >= n:
        return 0.0
    d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
    best = math.inf
    for centers in itertools.combinations(range(n), k):
        best = min(best, float(d[:, list(centers)].min(axis=1).max()))
    return best


def exhaustive_min_cover_count(points, radius: float, k_max: int = 4) -> int | None:
    """Fewest point-centers covering every point within ``radius`` (None if > k_max)."""
    pts = np.asarray(points, dtype=float)
    for k in range(1, min(k_max, len(pts)) + 1):
        if exhaustive_kcenter(pts, k) <= radius:
            return k
    return None


def bellman_ford(n: int, edges, source: int) -> list[float]:
    """Single-source shortest distances; ``edges`` is an iterable of (u, v, w), w >= 0."""
    edges = list(edges)
    dist = [math.inf] * n
    dist[source] = 0.0
    for _ in range(n - 1):
        changed = False
        for u, v, w in edges:
            if dist[u] + w < dist[v]:
                dist[v] = dist[u] + w
                changed = True
        if not changed:
            break
    return dist
