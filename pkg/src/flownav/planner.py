"""Shortest paths over a landmark map's geometric adjacency."""
from __future__ import annotations

import csv
import heapq
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .map_builder import LandmarkMap


@dataclass(frozen=True)
class PlannedPath:
    """Landmarks are local map indices; ``components`` is filled only when no path exists."""

    landmarks: tuple[int, ...]
    length: float
    hops: tuple[float, ...]
    components: tuple[tuple[int, ...], ...] = ()

    @property
    def found(self) -> bool:
        return bool(self.landmarks)


def _neighbours(lm: LandmarkMap) -> list[list[tuple[int, float]]]:
    nb: list[list[tuple[int, float]]] = [[] for _ in range(len(lm))]
    for a, b, d in lm.adjacency:
        nb[a].append((b, d))
    return nb


def components(lm: LandmarkMap) -> tuple[tuple[int, ...], ...]:
    """Connected components of the adjacency, each sorted, ordered by smallest member."""
    nb = _neighbours(lm)
    seen = [False] * len(lm)
    out = []
    for start in range(len(lm)):
        if seen[start]:
            continue
        seen[start] = True
        stack, comp = [start], []
        while stack:
            v = stack.pop()
            comp.append(v)
            for w, _ in nb[v]:
                if not seen[w]:
                    seen[w] = True
                    stack.append(w)
        out.append(tuple(sorted(comp)))
    return tuple(out)


def plan_path(lm: LandmarkMap, source: int, target: int) -> PlannedPath:
    """Dijkstra from ``source``; among equal-length routes the smallest predecessor wins."""
    n = len(lm)
    for v in (source, target):
        if not 0 <= v < n:
            raise ValueError(f"landmark {v} not in map of {n}")
    dist = [math.inf] * n
    pred = [-1] * n
    dist[source] = 0.0
    heap = [(0.0, source)]
    done = [False] * n
    nb = _neighbours(lm)
    while heap:
        d, v = heapq.heappop(heap)
        if done[v]:
            continue
        done[v] = True
        if v == target:
            break
        for w, step in nb[v]:
            nd = d + step
            if nd < dist[w] or (nd == dist[w] and v < pred[w]):
                dist[w], pred[w] = nd, v
                heapq.heappush(heap, (nd, w))
    if not math.isfinite(dist[target]):
        return PlannedPath((), math.inf, (), components(lm))
    route = [target]
    while route[-1] != source:
        route.append(pred[route[-1]])
    route.reverse()
    hops = tuple(float(np.linalg.norm(lm.positions[b] - lm.positions[a]))
                 for a, b in zip(route, route[1:]))
    return PlannedPath(tuple(route), float(dist[target]), hops)


def write_path(path: str | Path, lm: LandmarkMap, planned: PlannedPath) -> None:
    """CSV ``order,landmark_id,x,y,hop_dist``; ``hop_dist`` is 0 for the first row."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["order", "landmark_id", "x", "y", "hop_dist"])
        for k, v in enumerate(planned.landmarks):
            p = lm.positions[v]
            hop = planned.hops[k - 1] if k else 0.0
            w.writerow([k, int(lm.indices[v]), repr(float(p[0])), repr(float(p[1])), repr(hop)])
