"""Sequence localization as a bipartite min-cost flow with continuity cones.

A source feeds every landmark, every landmark may send one unit to every query
image and every query drains one unit into the sink. Matching a landmark to a query
costs the Huber loss of their feature distance. Each query's location is the
flow-weighted mean of landmark positions, and consecutive locations may not be
further apart than ``r_loc``; that second-order cone is what lets the sequence
overrule an isolated bad match.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist, pdist

from . import conic
from .conic import Affine, ConicProgram, ProgramBuilder
from .ingest import QuerySequence
from .map_builder import LandmarkMap

logger = logging.getLogger(__name__)

TIE_TOL = 1e-9


class LocalizationError(RuntimeError):
    """Raised when the continuity constraints cannot all be met."""

    def __init__(self, message: str, pair: int | None = None, min_radius: float = math.nan):
        super().__init__(message)
        self.pair = pair
        self.min_radius = min_radius


def huber(d, delta: float):
    """Quadratic below ``delta``, linear above, continuous with matching slope."""
    if not delta > 0:
        raise ValueError("delta must be > 0")
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("distances must be >= 0")
    out = np.where(d <= delta, 0.5 * d * d, delta * (d - 0.5 * delta))
    return float(out) if out.ndim == 0 else out


def default_delta(landmarks: LandmarkMap, queries: QuerySequence | None = None) -> float:
    """Median pairwise landmark feature distance (query-to-landmark median as fallback)."""
    if len(landmarks) > 1:
        d = pdist(landmarks.features)
        d = d[d > 0]
        if d.size:
            return float(np.median(d))
    if queries is not None:
        d = cdist(queries.features, landmarks.features).ravel()
        d = d[d > 0]
        if d.size:
            return float(np.median(d))
    return 1.0


def default_continuity_radius(landmarks: LandmarkMap, queries: QuerySequence) -> float:
    """1.5 x the query stride.

    The stride is the median step between consecutive known query positions; without
    them it falls back to the median nearest-neighbour spacing of the landmarks.
    """
    if queries.has_truth and len(queries) > 1:
        step = np.linalg.norm(np.diff(queries.positions, axis=0), axis=1)
        stride = float(np.median(step))
    elif len(landmarks) > 1:
        d = cdist(landmarks.positions, landmarks.positions)
        np.fill_diagonal(d, np.inf)
        stride = float(np.median(d.min(axis=1)))
    else:
        stride = 1.0
    return 1.5 * stride


@dataclass(frozen=True)
class LocalizationLayout:
    """Column layout: source->landmark, landmark->query (query-major), query->sink."""

    n_landmarks: int
    n_queries: int

    @property
    def n_vars(self) -> int:
        m, q = self.n_landmarks, self.n_queries
        return m + m * q + q

    def source(self, x: np.ndarray) -> np.ndarray:
        return x[: self.n_landmarks]

    def match(self, x: np.ndarray) -> np.ndarray:
        """(q, m) matrix of landmark-to-query flows."""
        m, q = self.n_landmarks, self.n_queries
        return x[m: m + m * q].reshape(q, m)

    def sink(self, x: np.ndarray) -> np.ndarray:
        m, q = self.n_landmarks, self.n_queries
        return x[m + m * q:]

    def match_col(self, query: int, landmark: int) -> int:
        return self.n_landmarks + query * self.n_landmarks + landmark


def assemble_localization_program(landmarks: LandmarkMap, queries: QuerySequence,
                                  r_loc: float, delta: float,
                                  radius_var: bool = False) -> tuple[ConicProgram, LocalizationLayout]:
    """Bipartite flow program with one continuity cone per consecutive query pair.

    With ``radius_var`` the continuity radius becomes a variable bounded below by
    ``r_loc`` and minimized instead of the matching cost; used to diagnose
    infeasible instances.
    """
    m, q = len(landmarks), len(queries)
    if m < 1:
        raise ValueError("need at least one landmark")
    if q < 1:
        raise ValueError("need at least one query")
    if not r_loc >= 0:
        raise ValueError("r_loc must be >= 0")
    if queries.features.shape[1] != landmarks.features.shape[1]:
        raise ValueError("query and landmark feature dimensions differ")
    lay = LocalizationLayout(m, q)
    cost = huber(cdist(queries.features, landmarks.features), delta)   # (q, m)

    b = ProgramBuilder()
    # Only the query->sink capacities are stated as bounds. Conservation then
    # implies y <= 1 on every match edge and y <= q on every source edge; repeating
    # those bounds doubles the solver's constraint count for nothing.
    src = b.add_vars(m, cost=0.0, lb=0.0)
    match = b.add_vars(m * q, cost=0.0 if radius_var else cost.ravel(), lb=0.0)
    sink = b.add_vars(q, cost=0.0, lb=0.0, ub=1.0)
    match = match.reshape(q, m)

    # conservation: the source emits q, the sink absorbs q, all else balances
    b.add_eq([(int(v), 1.0) for v in src], float(q))
    for i in range(m):
        b.add_eq([(int(src[i]), 1.0)] + [(int(v), -1.0) for v in match[:, i]], 0.0)
    for l in range(q):
        b.add_eq([(int(v), 1.0) for v in match[l]] + [(int(sink[l]), -1.0)], 0.0)
    b.add_eq([(int(v), -1.0) for v in sink], -float(q))

    if radius_var:
        r = int(b.add_vars(1, cost=1.0, lb=r_loc)[0])
        radius = Affine.of({r: 1.0})
    else:
        radius = Affine.of((), r_loc)
    pos = landmarks.positions
    for l in range(q - 1):
        vec = []
        for axis in range(2):
            terms = [(int(v), float(c)) for v, c in zip(match[l + 1], pos[:, axis])]
            terms += [(int(v), -float(c)) for v, c in zip(match[l], pos[:, axis])]
            vec.append(Affine.of(terms))
        b.add_soc(radius, vec)
    return b.build(), lay


@dataclass(frozen=True)
class LocalizationResult:
    locations: np.ndarray        # (q, 2)
    weights: np.ndarray          # (q, m) flow from each landmark into each query
    top1: np.ndarray             # local landmark index per query
    top1_flow: np.ndarray
    landmark_ids: np.ndarray     # reference-record id of each local landmark
    objective: float
    continuity_slack: np.ndarray  # r_loc - step, one per consecutive pair
    r_loc: float
    delta: float
    seq_id: int = 0

    @property
    def top1_ids(self) -> np.ndarray:
        return self.landmark_ids[self.top1]

    def errors(self, truth: np.ndarray) -> np.ndarray:
        return np.linalg.norm(self.locations - np.asarray(truth, float), axis=1)


def top1_from_weights(weights: np.ndarray) -> np.ndarray:
    """Argmax per row; values within ``TIE_TOL`` of the maximum tie, lowest index wins."""
    w = np.asarray(weights, float)
    best = w.max(axis=1, keepdims=True)
    return np.argmax(w >= best - TIE_TOL, axis=1)


def _diagnose(landmarks: LandmarkMap, queries: QuerySequence, r_loc: float, delta: float,
              tol: float) -> LocalizationError:
    prog, lay = assemble_localization_program(landmarks, queries, r_loc, delta, radius_var=True)
    res = conic.solve(prog, tol=tol)
    if not res.optimal:
        return LocalizationError(f"continuity program is infeasible for r_loc={r_loc:g} "
                                 f"(diagnosis solve: {res.status}); increase r_loc")
    need = float(res.x[-1])
    loc = lay.match(res.x) @ landmarks.positions
    step = np.linalg.norm(np.diff(loc, axis=0), axis=1)
    pair = int(np.argmax(step))
    return LocalizationError(
        f"continuity radius r_loc={r_loc:g} cannot be met: query pair ({pair}, {pair + 1}) "
        f"needs at least {need:.6g}; increase r_loc", pair, need)


def localize(landmarks: LandmarkMap, queries: QuerySequence, r_loc: float | None = None,
             delta: float | None = None, tol: float = conic.DEFAULT_TOL) -> LocalizationResult:
    delta = default_delta(landmarks, queries) if delta is None else float(delta)
    r_loc = default_continuity_radius(landmarks, queries) if r_loc is None else float(r_loc)
    prog, lay = assemble_localization_program(landmarks, queries, r_loc, delta)
    res = conic.solve(prog, tol=tol)
    if res.status == conic.INFEASIBLE:
        raise _diagnose(landmarks, queries, r_loc, delta, tol)
    if not res.optimal:
        raise LocalizationError(f"localization solve failed: {res.status}: {res.message}")
    w = lay.match(res.x).copy()
    loc = w @ landmarks.positions
    top = top1_from_weights(w)
    step = np.linalg.norm(np.diff(loc, axis=0), axis=1)
    logger.info("localized %d queries on %d landmarks, objective %.6g",
                len(queries), len(landmarks), res.objective)
    return LocalizationResult(loc, w, top, w[np.arange(len(top)), top],
                              np.asarray(landmarks.indices, dtype=np.int64), res.objective,
                              r_loc - step, r_loc, delta, queries.seq_id)


# -- output -----------------------------------------------------------------

def write_results(path: str | Path, results: list[LocalizationResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seq_id", "order", "x", "y", "top1_landmark", "top1_flow"])
        for r in results:
            for l, (p, lm, f) in enumerate(zip(r.locations, r.top1_ids, r.top1_flow)):
                w.writerow([r.seq_id, l, repr(float(p[0])), repr(float(p[1])), int(lm),
                            repr(float(f))])


def write_flows_json(path: str | Path, results: list[LocalizationResult]) -> None:
    """Full flow distributions; near-zero flows are dropped to keep the file readable."""
    out = []
    for r in results:
        rows = []
        for l in range(len(r.locations)):
            keep = np.flatnonzero(r.weights[l] > 1e-9)
            rows.append({"order": l,
                         "landmarks": [int(r.landmark_ids[i]) for i in keep],
                         "flows": [float(r.weights[l, i]) for i in keep]})
        out.append({"seq_id": r.seq_id, "r_loc": r.r_loc, "delta": r.delta,
                    "objective": r.objective, "queries": rows})
    Path(path).write_text(json.dumps(out, indent=1) + "\n")
