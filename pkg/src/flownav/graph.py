"""Locally connected navigation graph over reference records."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.spatial import cKDTree

from .ingest import ImageRecord, ObstacleSet, features_of, positions_of

logger = logging.getLogger(__name__)


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class GraphParams:
    alpha: float = 2.0
    lambda_x: float = 1.0
    lambda_f: float = 1.0
    eps_f: float | None = None
    use_geodesic: bool = False
    geodesic_step: float | None = None
    obstacles: ObstacleSet | None = None

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if not (self.lambda_x > 0 and self.lambda_f > 0):
            raise ValueError("lambda_x and lambda_f must be > 0")
        if self.eps_f is not None and not self.eps_f > 0:
            raise ValueError("eps_f must be > 0")


@dataclass(frozen=True)
class NavGraph:
    """Directed graph with per-edge arrays; edges sorted by (src, dst).

    ``capacity = lambda_x * geo_dist`` and ``cost = lambda_f / max(feat_dist, eps_f)``.
    """

    positions: np.ndarray
    features: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    geo_dist: np.ndarray
    feat_dist: np.ndarray
    capacity: np.ndarray
    cost: np.ndarray
    alpha: float
    eps_f: float

    @property
    def n_vertices(self) -> int:
        return len(self.positions)

    @property
    def n_edges(self) -> int:
        return len(self.src)

    def out_edges(self, i: int) -> np.ndarray:
        lo, hi = np.searchsorted(self.src, [i, i + 1])
        return np.arange(lo, hi)

    def in_edges(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.dst == i)

    def neighbors(self, i: int) -> np.ndarray:
        return self.dst[self.out_edges(i)]

    def incidence(self) -> sparse.csr_matrix:
        """Vertex-by-edge matrix with +1 at the tail and -1 at the head (net outflow)."""
        m = self.n_edges
        rows = np.concatenate([self.src, self.dst])
        cols = np.concatenate([np.arange(m), np.arange(m)])
        vals = np.concatenate([np.ones(m), -np.ones(m)])
        return sparse.csr_matrix((vals, (rows, cols)), shape=(self.n_vertices, m))

    def components(self) -> list[list[int]]:
        adj = sparse.coo_matrix((np.ones(self.n_edges), (self.src, self.dst)),
                                shape=(self.n_vertices,) * 2)
        n_comp, labels = csgraph.connected_components(adj, directed=True, connection="weak")
        return [np.flatnonzero(labels == c).tolist() for c in range(n_comp)]


# -- geometry ---------------------------------------------------------------

def _orient(a, b, c) -> int:
    """Sign of the cross product (b - a) x (c - a), exact."""
    d1x, d1y = b[0] - a[0], b[1] - a[1]
    d2x, d2y = c[0] - a[0], c[1] - a[1]
    det = d1x * d2y - d1y * d2x
    bound = 1e-12 * (abs(d1x * d2y) + abs(d1y * d2x))
    if abs(det) > bound:
        return 1 if det > 0 else -1
    fa = [Fraction(float(v)) for v in a]
    fb = [Fraction(float(v)) for v in b]
    fc = [Fraction(float(v)) for v in c]
    exact = (fb[0] - fa[0]) * (fc[1] - fa[1]) - (fb[1] - fa[1]) * (fc[0] - fa[0])
    return (exact > 0) - (exact < 0)


def _on_segment(a, b, p) -> bool:
    return (min(a[0], b[0]) <= p[0] <= max(a[0], b[0])
            and min(a[1], b[1]) <= p[1] <= max(a[1], b[1]))


def segments_intersect(a1, a2, b1, b2) -> bool:
    """True iff the closed segments a1-a2 and b1-b2 share at least one point."""
    o1 = _orient(a1, a2, b1)
    o2 = _orient(a1, a2, b2)
    o3 = _orient(b1, b2, a1)
    o4 = _orient(b1, b2, a2)
    if o1 * o2 < 0 and o3 * o4 < 0:
        return True
    if o1 == 0 and _on_segment(a1, a2, b1):
        return True
    if o2 == 0 and _on_segment(a1, a2, b2):
        return True
    if o3 == 0 and _on_segment(b1, b2, a1):
        return True
    if o4 == 0 and _on_segment(b1, b2, a2):
        return True
    return False


def _blocked(p: np.ndarray, q: np.ndarray, obstacles: ObstacleSet | None) -> bool:
    if obstacles is None:
        return False
    return any(segments_intersect(p, q, w[0], w[1]) for w in obstacles.segments)


class GeodesicDistances:
    """Shortest-path lengths over the Euclidean proximity graph (edges of length <= step)."""

    def __init__(self, positions: np.ndarray, step: float, limit: float = np.inf,
                 obstacles: ObstacleSet | None = None):
        self.positions = np.asarray(positions, dtype=float)
        n = len(self.positions)
        pairs = cKDTree(self.positions).query_pairs(step, output_type="ndarray")
        if obstacles is not None and len(pairs):
            keep = [not _blocked(self.positions[i], self.positions[j], obstacles) for i, j in pairs]
            pairs = pairs[np.array(keep, dtype=bool)]
        w = np.linalg.norm(self.positions[pairs[:, 0]] - self.positions[pairs[:, 1]], axis=1) \
            if len(pairs) else np.zeros(0)
        # csgraph treats explicit zeros as missing edges
        w = np.maximum(w, np.finfo(float).tiny)
        adj = sparse.coo_matrix((w, (pairs[:, 0], pairs[:, 1])), shape=(n, n)).tocsr() \
            if len(pairs) else sparse.csr_matrix((n, n))
        self.matrix = csgraph.dijkstra(adj, directed=False, limit=limit)
        self.matrix[self.matrix <= np.finfo(float).tiny * n] = 0.0
        np.fill_diagonal(self.matrix, 0.0)

    def __call__(self, i: int, j: int) -> float:
        return float(self.matrix[i, j])


def geodesic_distances(records: Sequence[ImageRecord] | np.ndarray, step: float,
                       limit: float = np.inf) -> GeodesicDistances:
    pos = records if isinstance(records, np.ndarray) else positions_of(records)
    return GeodesicDistances(pos, step, limit)


# -- construction -----------------------------------------------------------

def default_eps_f(feat_dist: np.ndarray) -> float:
    nz = feat_dist[feat_dist > 0]
    if nz.size == 0:
        return 1e-6
    return 1e-6 * float(np.median(nz))


def build_graph(records: Sequence[ImageRecord], params: GraphParams) -> NavGraph:
    if len(records) == 0:
        raise GraphError("empty record list")
    if len(records) < 2:
        raise GraphError("need at least 2 records to build a graph")
    pos = positions_of(records)
    feats = features_of(records)

    if params.use_geodesic:
        step = params.geodesic_step
        if step is None:
            nn, _ = cKDTree(pos).query(pos, k=2)
            step = 1.5 * float(nn[:, 1].max())
        geo = GeodesicDistances(pos, step, limit=params.alpha, obstacles=params.obstacles)
        ii, jj = np.nonzero(np.triu(geo.matrix <= params.alpha, k=1))
        gd = geo.matrix[ii, jj]
    else:
        pairs = cKDTree(pos).query_pairs(params.alpha * (1 + 1e-9), output_type="ndarray")
        pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))] if len(pairs) else pairs.reshape(0, 2)
        ii, jj = (pairs[:, 0], pairs[:, 1]) if len(pairs) else (np.zeros(0, int), np.zeros(0, int))
        gd = np.linalg.norm(pos[ii] - pos[jj], axis=1)
        # the kd-tree radius test is not bit-exact; re-check the limit directly
        keep = gd <= params.alpha
        ii, jj, gd = ii[keep], jj[keep], gd[keep]

    keep = gd > 0
    if params.obstacles is not None:
        keep &= np.array([not _blocked(pos[i], pos[j], params.obstacles)
                          for i, j in zip(ii, jj)], dtype=bool).reshape(-1)
    ii, jj, gd = ii[keep], jj[keep], gd[keep]
    if len(ii) == 0:
        raise GraphError("no edges: every record is isolated under the navigation radius")

    fd = np.linalg.norm(feats[ii] - feats[jj], axis=1)
    eps_f = params.eps_f if params.eps_f is not None else default_eps_f(fd)

    src = np.concatenate([ii, jj])
    dst = np.concatenate([jj, ii])
    order = np.lexsort((dst, src))
    src, dst = src[order].astype(np.int64), dst[order].astype(np.int64)
    gd = np.concatenate([gd, gd])[order]
    fd = np.concatenate([fd, fd])[order]
    graph = NavGraph(
        positions=pos, features=feats, src=src, dst=dst, geo_dist=gd, feat_dist=fd,
        capacity=params.lambda_x * gd, cost=params.lambda_f / np.maximum(fd, eps_f),
        alpha=params.alpha, eps_f=eps_f,
    )
    comps = graph.components()
    if len(comps) > 1:
        logger.warning("navigation graph has %d weakly connected components: %s",
                       len(comps), [c[:5] + (["..."] if len(c) > 5 else []) for c in comps])
    return graph


def dump_graph(path: str | Path, graph: NavGraph, rho: np.ndarray | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j", "geo_dist", "feat_dist", "u", "c", "rho"])
        for e in range(graph.n_edges):
            w.writerow([int(graph.src[e]), int(graph.dst[e]), repr(float(graph.geo_dist[e])),
                        repr(float(graph.feat_dist[e])), repr(float(graph.capacity[e])),
                        repr(float(graph.cost[e])), "" if rho is None else repr(float(rho[e]))])
