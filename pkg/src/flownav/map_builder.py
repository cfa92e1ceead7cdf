"""Landmark selection by congestion-aware min-cost flow.

Flow is pushed from source to target vertices of the navigation graph. Edge
capacity grows with geometric distance and the base rate shrinks with feature
distance, so flow favours long hops between visually distinct images. A per-edge
congestion term ``z >= rho * y**2 / (1 - y/u)`` (a rotated cone) spreads flow before
the cheapest edges saturate, and anchor floors force flow through every region of
the map. Vertices whose absolute flow reaches ``tau`` become landmarks.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import conic
from .anchors import AnchorSet, select_anchors
from .conic import Affine, ConicProgram, ProgramBuilder, SolveResult
from .graph import GraphParams, NavGraph, build_graph
from .ingest import ImageRecord, ObstacleSet

logger = logging.getLogger(__name__)

RHO_MIN = 1e-3
LAMBDA_G = 0.1
T_G_MODES = ("objective", "fixed", "relative")


class MapBuildError(RuntimeError):
    pass


@dataclass(frozen=True)
class SensitivityField:
    rho: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.rho)):
            raise ValueError("sensitivity must be finite")


@dataclass(frozen=True)
class InjectionSpec:
    sources: dict[int, float]
    targets: dict[int, float]

    def __post_init__(self):
        if set(self.sources) & set(self.targets):
            raise ValueError("source and target sets overlap")
        if any(v <= 0 for v in self.sources.values()) or any(v <= 0 for v in self.targets.values()):
            raise ValueError("source outflows and target inflows must be positive")
        total_s, total_t = sum(self.sources.values()), sum(self.targets.values())
        if not math.isclose(total_s, total_t, rel_tol=1e-12, abs_tol=1e-15):
            raise ValueError(f"unbalanced injections: {total_s} out vs {total_t} in")

    @property
    def total(self) -> float:
        return sum(self.sources.values())

    def scaled(self, y_total: float) -> "InjectionSpec":
        f = y_total / self.total
        return InjectionSpec({k: v * f for k, v in self.sources.items()},
                             {k: v * f for k, v in self.targets.items()})

    def net(self, n_vertices: int) -> np.ndarray:
        out = np.zeros(n_vertices)
        for k, v in self.sources.items():
            out[k] += v
        for k, v in self.targets.items():
            out[k] -= v
        return out


@dataclass(frozen=True)
class LandmarkMap:
    """Selected landmarks with a geometric planning adjacency.

    ``indices`` are reference-record ids; ``adjacency`` holds (a, b, dist) over
    positions in ``indices`` (local numbering), both directions present.
    """

    indices: np.ndarray
    positions: np.ndarray
    features: np.ndarray
    abs_flow: np.ndarray
    tau: float
    alpha: float
    adjacency: tuple[tuple[int, int, float], ...]
    y_total: float = math.nan
    trace: tuple[tuple[float, int, str], ...] = ()

    def __len__(self) -> int:
        return len(self.indices)

    def local(self, vertex_id: int) -> int:
        hit = np.flatnonzero(self.indices == vertex_id)
        if hit.size == 0:
            raise KeyError(f"vertex {vertex_id} is not a landmark")
        return int(hit[0])


def landmark_adjacency(positions: np.ndarray, alpha: float) -> tuple[tuple[int, int, float], ...]:
    d = np.linalg.norm(positions[:, None, :] - positions[None, :, :], axis=-1)
    out = []
    for a in range(len(positions)):
        for b in range(len(positions)):
            if a != b and d[a, b] <= alpha:
                out.append((a, b, float(d[a, b])))
    return tuple(out)


def make_landmark_map(positions: np.ndarray, features: np.ndarray, indices, alpha: float,
                      abs_flow: np.ndarray | None = None, tau: float = math.nan,
                      y_total: float = math.nan, trace=()) -> LandmarkMap:
    idx = np.asarray(indices, dtype=np.int64)
    pos = np.asarray(positions, float)[idx]
    flow = np.full(len(idx), math.nan) if abs_flow is None else np.asarray(abs_flow, float)[idx]
    return LandmarkMap(idx, pos, np.asarray(features, float)[idx], flow, tau, alpha,
                       landmark_adjacency(pos, alpha), y_total, tuple(trace))


# -- sensitivity --------------------------------------------------------------

def compute_sensitivity(graph: NavGraph, rho_min: float = RHO_MIN) -> SensitivityField:
    """``rho_ij = 1 - d(f_i, f_j) / sum_k d(f_i, f_k)`` over out-neighbours k of i."""
    denom = np.zeros(graph.n_vertices)
    np.add.at(denom, graph.src, graph.feat_dist)
    d = denom[graph.src]
    with np.errstate(divide="ignore", invalid="ignore"):
        rho = np.where(d > 0, 1.0 - graph.feat_dist / d, rho_min)
    return SensitivityField(np.clip(rho, rho_min, 1.0))


# -- injections -------------------------------------------------------------

def graph_distances_from(graph: NavGraph, source: int) -> np.ndarray:
    from scipy import sparse
    from scipy.sparse import csgraph

    adj = sparse.csr_matrix((graph.geo_dist, (graph.src, graph.dst)),
                            shape=(graph.n_vertices,) * 2)
    return csgraph.dijkstra(adj, indices=source)


def default_injection(graph: NavGraph, y_total: float = 1.0,
                      closed: bool | None = None) -> InjectionSpec:
    """Start -> end for open trajectories; start -> graph-farthest vertex for loops."""
    n = graph.n_vertices
    if closed is None:
        closed = float(np.linalg.norm(graph.positions[0] - graph.positions[-1])) <= graph.alpha
    if closed:
        dist = graph_distances_from(graph, 0)
        dist[~np.isfinite(dist)] = -1.0
        target = int(np.argmax(dist))
    else:
        target = n - 1
    if target == 0:
        raise MapBuildError("source and target coincide; graph too small or disconnected")
    return InjectionSpec({0: y_total}, {target: y_total})


# -- program ----------------------------------------------------------------

@dataclass(frozen=True)
class MapProgramLayout:
    """Column layout of the map program: y first, then z, then the optional floor."""

    n_edges: int
    floor_var: int | None
    capacity: np.ndarray | None = None
    rho: np.ndarray | None = None

    def flows(self, x: np.ndarray) -> np.ndarray:
        return x[: self.n_edges]

    def congestion(self, x: np.ndarray) -> np.ndarray:
        return x[self.n_edges: 2 * self.n_edges]

    def floor(self, x: np.ndarray) -> float | None:
        return None if self.floor_var is None else float(x[self.floor_var])

    def polish(self, x: np.ndarray) -> np.ndarray:
        """Clip flows into their bounds and set each z to the smallest value its cone allows."""
        if self.capacity is None or self.rho is None:
            return x
        x = x.copy()
        m, u = self.n_edges, self.capacity
        y = np.clip(x[:m], 0.0, u)
        x[:m] = y
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(self.rho > 0, self.rho * u * y * y / (u - y), 0.0)
        # at saturation the cone has no finite z; keep the solver's value
        x[m: 2 * m] = np.where(np.isfinite(z), z, x[m: 2 * m])
        return x


def assemble_map_program(graph: NavGraph, sensitivity: SensitivityField | None,
                         anchors: AnchorSet | None, inj: InjectionSpec,
                         t_g: float | None = None,
                         lambda_g: float = LAMBDA_G) -> tuple[ConicProgram, MapProgramLayout]:
    """Build the landmark flow program.

    ``sensitivity=None`` drops the congestion term (plain LP); ``anchors=None`` drops
    the floors. With ``t_g=None`` the common floor is a variable rewarded by
    ``lambda_g`` in the objective, otherwise every anchor neighbourhood must carry
    absolute flow of at least ``t_g``.
    """
    m = graph.n_edges
    cap = graph.capacity
    rho = np.zeros(m) if sensitivity is None else np.asarray(sensitivity.rho, float)
    if rho.shape != (m,):
        raise ValueError("sensitivity must have one entry per edge")
    active = rho > 0

    b = ProgramBuilder()
    # the cone already forces y <= u; repeating it as a bound makes the program
    # degenerate and stalls the interior-point solver
    y = b.add_vars(m, cost=graph.cost, lb=0.0, ub=np.where(active, math.inf, cap))
    z = b.add_vars(m, cost=1.0, lb=0.0, ub=np.where(active, math.inf, 0.0))
    for e in np.flatnonzero(active):
        # (u - y) * z >= rho * u * y^2, the congestion epigraph scaled by rho * u.
        # The first two factors are rebalanced by k so that all three cone entries
        # are of the same order when flows are of order min(Y, u).
        k = min(inj.total, cap[e]) * math.sqrt(rho[e] / cap[e])
        b.add_rsoc(Affine.of({int(y[e]): -k}, k * cap[e]),
                   Affine.of({int(z[e]): 1.0 / k}),
                   Affine.of({int(y[e]): math.sqrt(rho[e] * cap[e])}))

    net = inj.net(graph.n_vertices)
    inc = graph.incidence().tocsr()
    for v in range(graph.n_vertices):
        lo, hi = inc.indptr[v], inc.indptr[v + 1]
        b.add_eq(zip(y[inc.indices[lo:hi]], inc.data[lo:hi]), net[v])

    floor_var = None
    if anchors is not None and len(anchors):
        if t_g is None:
            floor_var = int(b.add_vars(1, cost=-lambda_g, lb=0.0)[0])
        for nb in anchors.neighborhoods:
            member = np.zeros(graph.n_vertices, dtype=bool)
            member[nb] = True
            coef = member[graph.src].astype(float) + member[graph.dst].astype(float)
            terms = [(int(y[e]), coef[e]) for e in np.flatnonzero(coef)]
            if floor_var is None:
                b.add_ineq(terms, ">=", t_g)
            else:
                b.add_ineq(terms + [(floor_var, -1.0)], ">=", 0.0)
    return b.build(), MapProgramLayout(m, floor_var, graph.capacity.copy(), rho)


def plain_flow_program(graph: NavGraph, inj: InjectionSpec) -> ConicProgram:
    """The bare min-cost flow LP: linear cost, capacity bounds and conservation."""
    b = ProgramBuilder()
    y = b.add_vars(graph.n_edges, cost=graph.cost, lb=0.0, ub=graph.capacity)
    net = inj.net(graph.n_vertices)
    for v in range(graph.n_vertices):
        terms = [(int(y[e]), 1.0) for e in graph.out_edges(v)]
        terms += [(int(y[e]), -1.0) for e in graph.in_edges(v)]
        b.add_eq(terms, net[v])
    return b.build()


def max_flow_value(graph: NavGraph, inj: InjectionSpec, tol: float = conic.DEFAULT_TOL) -> float:
    """Largest total injection the capacities admit, keeping the template's proportions."""
    b = ProgramBuilder()
    y = b.add_vars(graph.n_edges, cost=0.0, lb=0.0, ub=graph.capacity)
    scale = b.add_vars(1, cost=-1.0, lb=0.0)[0]
    net = inj.scaled(1.0).net(graph.n_vertices)
    for v in range(graph.n_vertices):
        terms = [(int(y[e]), 1.0) for e in graph.out_edges(v)]
        terms += [(int(y[e]), -1.0) for e in graph.in_edges(v)]
        terms.append((int(scale), -net[v]))
        b.add_eq(terms, 0.0)
    res = conic.solve(b.build(), tol=tol)
    if not res.optimal:
        raise MapBuildError(f"max-flow computation failed: {res.status}")
    return float(res.x[scale])


def absolute_flow(graph: NavGraph, flows: np.ndarray) -> np.ndarray:
    hat = np.zeros(graph.n_vertices)
    np.add.at(hat, graph.src, flows)
    np.add.at(hat, graph.dst, flows)
    return hat


def extract_landmarks(graph: NavGraph, result: SolveResult, tau: float,
                      layout: MapProgramLayout | None = None) -> LandmarkMap:
    if not result.optimal:
        raise MapBuildError(f"cannot extract landmarks from a {result.status} solve")
    flows = result.x[: graph.n_edges] if layout is None else layout.flows(result.x)
    hat = absolute_flow(graph, flows)
    chosen = np.flatnonzero(hat >= tau)
    if chosen.size == 0:
        raise MapBuildError(
            f"no vertex reaches absolute flow tau={tau:g} (max {hat.max():.3g}); "
            "lower tau or increase the injected flow Y_G"
        )
    return make_landmark_map(graph.positions, graph.features, chosen, graph.alpha, hat, tau)


# -- compactness ------------------------------------------------------------

@dataclass
class _Probe:
    y_total: float
    status: str
    count: int
    result: SolveResult | None = None
    layout: MapProgramLayout | None = None


@dataclass
class CompactnessSearch:
    graph: NavGraph
    sensitivity: SensitivityField | None
    anchors: AnchorSet | None
    inj_template: InjectionSpec
    t_g: float | None
    tau: float
    max_landmarks: int
    lambda_g: float = LAMBDA_G
    tol: float = conic.DEFAULT_TOL
    relative: bool = False
    relative_t_g: bool | None = None
    probes: list[_Probe] = field(default_factory=list)

    def thresholds(self, y_total: float) -> tuple[float | None, float]:
        """Absolute (t_g, tau) at ``y_total``; relative values are fractions of Y_G."""
        rel_t_g = self.relative if self.relative_t_g is None else self.relative_t_g
        t_g = self.t_g
        if rel_t_g and t_g is not None:
            t_g = t_g * y_total
        return t_g, self.tau * y_total if self.relative else self.tau

    def probe(self, y_total: float) -> _Probe:
        t_g, tau = self.thresholds(y_total)
        prog, layout = assemble_map_program(self.graph, self.sensitivity, self.anchors,
                                            self.inj_template.scaled(y_total), t_g,
                                            self.lambda_g)
        res = conic.solve(prog, tol=self.tol, polish=layout.polish)
        count = -1
        if res.optimal:
            hat = absolute_flow(self.graph, layout.flows(res.x))
            count = int(np.count_nonzero(hat >= tau))
        p = _Probe(y_total, res.status, count, res, layout)
        self.probes.append(p)
        logger.info("Y_G=%.6g status=%s landmarks=%d", y_total, res.status, count)
        return p

    @property
    def trace(self) -> tuple[tuple[float, int, str], ...]:
        return tuple((p.y_total, p.count, p.status) for p in self.probes)

    def monotonicity_violations(self) -> list[tuple[float, float]]:
        ok = sorted((p.y_total, p.count) for p in self.probes if p.status == conic.OPTIMAL)
        return [(a[0], b[0]) for a, b in zip(ok, ok[1:]) if b[1] < a[1]]


def compactness_search(graph: NavGraph, sensitivity: SensitivityField | None,
                       anchors: AnchorSet | None, inj_template: InjectionSpec,
                       t_g: float | None, tau: float, max_landmarks: int, *,
                       lambda_g: float = LAMBDA_G, y_lo: float = 1e-3,
                       y_hi: float | None = None, max_iter: int = 30,
                       rel_tol: float = 1e-2, tol: float = conic.DEFAULT_TOL,
                       relative: bool = False, relative_t_g: bool | None = None) -> LandmarkMap:
    """Largest total flow Y_G whose landmark set has at most ``max_landmarks`` vertices.

    Bisection over ``[y_lo, y_hi]`` (``y_hi`` defaults to just under the max-flow
    value, where the congestion cones still admit a finite cost). With ``relative``
    both ``tau`` and ``t_g`` are fractions of Y_G; ``relative_t_g`` overrides that
    for ``t_g`` alone.
    """
    if max_landmarks < 1:
        raise ValueError("max_landmarks must be >= 1")
    search = CompactnessSearch(graph, sensitivity, anchors, inj_template, t_g, tau,
                               max_landmarks, lambda_g, tol, relative, relative_t_g)
    if y_hi is None:
        y_hi = max_flow_value(graph, inj_template, tol) * (1 - 1e-2)

    def good(p: _Probe) -> bool:
        return p.status == conic.OPTIMAL and p.count <= max_landmarks

    lo = search.probe(y_lo)
    if lo.status != conic.OPTIMAL:
        raise MapBuildError(
            f"map program infeasible even at Y_G={y_lo:g} ({lo.status}); the anchor floors "
            f"cannot be met below the max-flow value {y_hi:.4g} - lower t_g or the anchor radius"
        )
    best = lo if good(lo) else None
    hi = search.probe(y_hi)
    if good(hi):
        best = hi
    else:
        a, b = y_lo, y_hi
        if not good(lo):
            # even the smallest flow selects too many vertices; nothing to bisect toward
            a = b
        for _ in range(max_iter):
            if b - a <= rel_tol * b:
                break
            # flows span orders of magnitude, so halve the interval in log space
            mid = math.sqrt(a * b)
            p = search.probe(mid)
            if good(p):
                a, best = mid, p
            else:
                b = mid

    viol = search.monotonicity_violations()
    if viol:
        logger.warning("landmark count decreased with Y_G between %s", viol)

    if best is None or best.count <= 0:
        feasible = [p for p in search.probes if p.status == conic.OPTIMAL and p.count > 0]
        if not feasible:
            raise MapBuildError(
                f"no Y_G in [{y_lo:g}, {y_hi:.4g}] gives any vertex absolute flow >= tau={tau:g}; "
                "lower tau"
            )
        best = min(feasible, key=lambda p: (p.count, -p.y_total))
        if best.count > max_landmarks:
            logger.warning("landmark budget %d unreachable; smallest feasible map has %d",
                           max_landmarks, best.count)
    _, tau_abs = search.thresholds(best.y_total)
    lm = extract_landmarks(graph, best.result, tau_abs, best.layout)
    return LandmarkMap(lm.indices, lm.positions, lm.features, lm.abs_flow, tau_abs, lm.alpha,
                       lm.adjacency, best.y_total, search.trace)


# -- pipeline ---------------------------------------------------------------

@dataclass(frozen=True)
class MapParams:
    """Tunables of the full selection pipeline.

    ``t_g_mode``: ``objective`` rewards a common anchor floor with ``lambda_g``;
    ``fixed`` requires an absolute floor ``t_g``; ``relative`` requires ``t_g * Y_G``.
    ``tau`` is a fraction of Y_G; ``None`` picks ``0.1 / expected hops`` where the
    expected hop count is the source-target graph distance over ``alpha``.
    """

    alpha: float = 10.0
    anchor_radius: float = 24.0
    lambda_x: float = 1.0
    lambda_f: float = 1.0
    lambda_g: float = LAMBDA_G
    t_g_mode: str = "relative"
    t_g: float = 0.5
    tau: float | None = None
    n_landmarks: int = 25
    tol: float = conic.DEFAULT_TOL
    sensitivity: bool = True
    anchors: bool = True

    def __post_init__(self):
        if self.t_g_mode not in T_G_MODES:
            raise ValueError(f"t_g_mode must be one of {T_G_MODES}, got {self.t_g_mode!r}")
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if not (self.lambda_x > 0 and self.lambda_f > 0):
            raise ValueError("lambda_x and lambda_f must be > 0")
        if not self.anchor_radius > 0:
            raise ValueError("anchor_radius must be > 0")
        if not self.t_g >= 0:
            raise ValueError("t_g must be >= 0")
        if self.tau is not None and not self.tau > 0:
            raise ValueError("tau must be > 0")
        if self.n_landmarks < 1:
            raise ValueError("n_landmarks must be >= 1")
        if not self.lambda_g >= 0:
            raise ValueError("lambda_g must be >= 0")


def default_tau_fraction(graph: NavGraph, inj: InjectionSpec) -> float:
    dist = graph_distances_from(graph, next(iter(inj.sources)))
    reach = [dist[t] for t in inj.targets if math.isfinite(dist[t])]
    hops = max(1.0, max(reach, default=graph.alpha) / graph.alpha)
    return 0.1 / hops


def build_map(records: list[ImageRecord], params: MapParams = MapParams(),
              obstacles: ObstacleSet | None = None,
              injection: InjectionSpec | None = None) -> LandmarkMap:
    """Graph, sensitivity, anchors, injections and compactness search in one call."""
    graph = build_graph(records, GraphParams(alpha=params.alpha, lambda_x=params.lambda_x,
                                             lambda_f=params.lambda_f, obstacles=obstacles))
    sens = compute_sensitivity(graph) if params.sensitivity else None
    anchors = select_anchors(graph.positions, params.anchor_radius) if params.anchors else None
    inj = injection or default_injection(graph)
    tau = default_tau_fraction(graph, inj) if params.tau is None else params.tau
    t_g = None if params.t_g_mode == "objective" else params.t_g
    logger.info("graph: %d vertices, %d edges; %s anchors; tau fraction %.4g",
                graph.n_vertices, graph.n_edges, len(anchors) if anchors else "no", tau)
    return compactness_search(graph, sens, anchors, inj, t_g, tau, params.n_landmarks,
                              lambda_g=params.lambda_g, tol=params.tol, relative=True,
                              relative_t_g=params.t_g_mode == "relative")


# -- output -----------------------------------------------------------------

def write_landmarks(path: str | Path, lm: LandmarkMap) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["vertex_id", "x", "y", "abs_flow"])
        for i, p, f in zip(lm.indices, lm.positions, lm.abs_flow):
            w.writerow([int(i), repr(float(p[0])), repr(float(p[1])), repr(float(f))])


def read_landmarks(path: str | Path, positions: np.ndarray, features: np.ndarray,
                   alpha: float) -> LandmarkMap:
    ids, flows = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            ids.append(int(row["vertex_id"]))
            flows.append(float(row["abs_flow"]))
    full = np.full(len(positions), math.nan)
    full[ids] = flows
    return make_landmark_map(positions, features, ids, alpha, full)


def write_trace(path: str | Path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["Y_G", "n_landmarks", "status"])
        for y_total, count, status in trace:
            w.writerow([repr(float(y_total)), count, status])
