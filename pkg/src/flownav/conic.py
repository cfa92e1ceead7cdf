"""Conic program container and solver contract.

Every optimization in the package (plain min-cost flow LP, the congestion-aware map
program, the localization SOCP) is expressed as a :class:`ConicProgram`: a linear
objective over bounded variables with linear (in)equalities, rotated second-order
cones ``u * v >= w**2, u, v >= 0`` and second-order cones ``||vec|| <= radius``, all
with affine arguments. :func:`solve` hands the program to Clarabel's interior-point
method and re-checks the returned point against the program data itself.
"""
from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import clarabel
import numpy as np
from scipy import sparse

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
NUMERICAL_FAILURE = "numerical-failure"


class ProgramError(ValueError):
    pass


@dataclass(frozen=True)
class Affine:
    """``const + sum(coef[k] * x[idx[k]])`` with sorted, duplicate-free ``idx``."""

    idx: tuple[int, ...] = ()
    coef: tuple[float, ...] = ()
    const: float = 0.0

    @classmethod
    def of(cls, terms: Mapping[int, float] | Iterable[tuple[int, float]] = (),
           const: float = 0.0) -> "Affine":
        acc: dict[int, float] = {}
        items = terms.items() if isinstance(terms, Mapping) else terms
        for i, a in items:
            acc[int(i)] = acc.get(int(i), 0.0) + float(a)
        keys = sorted(k for k, v in acc.items() if v != 0.0)
        return cls(tuple(keys), tuple(acc[k] for k in keys), float(const))

    def value(self, x: np.ndarray) -> float:
        if not self.idx:
            return self.const
        return self.const + float(np.dot(self.coef, x[list(self.idx)]))

    def to_json(self) -> dict:
        return {"idx": list(self.idx), "coef": list(self.coef), "const": self.const}

    @classmethod
    def from_json(cls, d: dict) -> "Affine":
        return cls(tuple(d["idx"]), tuple(float(v) for v in d["coef"]), float(d["const"]))


@dataclass(frozen=True)
class RotatedCone:
    u: Affine
    v: Affine
    w: Affine


@dataclass(frozen=True)
class SecondOrderCone:
    radius: Affine
    vec: tuple[Affine, ...]


def _canonical(mat, n: int) -> sparse.csr_matrix:
    m = sparse.csr_matrix(mat, dtype=float)
    if m.shape[1] != n:
        raise ProgramError(f"constraint matrix has {m.shape[1]} columns, expected {n}")
    m.sum_duplicates()
    m.sort_indices()
    return m


@dataclass(frozen=True)
class ConicProgram:
    n: int
    c: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    A_eq: sparse.csr_matrix
    b_eq: np.ndarray
    A_in: sparse.csr_matrix
    b_in: np.ndarray
    sense: tuple[str, ...]
    rsoc: tuple[RotatedCone, ...] = ()
    soc: tuple[SecondOrderCone, ...] = ()

    def __post_init__(self):
        n = self.n
        object.__setattr__(self, "c", np.asarray(self.c, dtype=float).reshape(n))
        object.__setattr__(self, "lb", np.asarray(self.lb, dtype=float).reshape(n))
        object.__setattr__(self, "ub", np.asarray(self.ub, dtype=float).reshape(n))
        object.__setattr__(self, "A_eq", _canonical(self.A_eq, n))
        object.__setattr__(self, "A_in", _canonical(self.A_in, n))
        object.__setattr__(self, "b_eq", np.asarray(self.b_eq, dtype=float).reshape(-1))
        object.__setattr__(self, "b_in", np.asarray(self.b_in, dtype=float).reshape(-1))
        object.__setattr__(self, "sense", tuple(self.sense))
        if np.any(self.lb > self.ub):
            bad = int(np.flatnonzero(self.lb > self.ub)[0])
            raise ProgramError(f"variable {bad}: lower bound exceeds upper bound")
        if self.A_eq.shape[0] != len(self.b_eq) or self.A_in.shape[0] != len(self.b_in):
            raise ProgramError("constraint rows and rhs lengths differ")
        if len(self.sense) != len(self.b_in) or not set(self.sense) <= {"<=", ">="}:
            raise ProgramError("each inequality needs a sense of '<=' or '>='")
        for expr in self._affines():
            if expr.idx and (expr.idx[0] < 0 or expr.idx[-1] >= n):
                raise ProgramError("cone expression references an unknown variable")
            if list(expr.idx) != sorted(set(expr.idx)):
                raise ProgramError("cone expression indices must be sorted and unique")

    def _affines(self):
        for k in self.rsoc:
            yield from (k.u, k.v, k.w)
        for k in self.soc:
            yield k.radius
            yield from k.vec

    @property
    def rhs_norm(self) -> float:
        parts = [np.abs(self.b_eq), np.abs(self.b_in)]
        parts += [np.abs(b[np.isfinite(b)]) for b in (self.lb, self.ub)]
        return float(max((p.max() for p in parts if p.size), default=0.0))

    # -- residuals ----------------------------------------------------------

    def residuals(self, x: np.ndarray) -> dict[str, float]:
        """Worst violation of each constraint family at ``x`` (0 when satisfied)."""
        x = np.asarray(x, dtype=float)
        res = {"eq": 0.0, "ineq": 0.0, "bounds": 0.0, "cone": 0.0, "rsoc_product": 0.0}
        if self.A_eq.shape[0]:
            res["eq"] = float(np.abs(self.A_eq @ x - self.b_eq).max())
        if self.A_in.shape[0]:
            gx = self.A_in @ x - self.b_in
            sign = np.where(np.array(self.sense) == "<=", 1.0, -1.0)
            res["ineq"] = float(max(0.0, (sign * gx).max()))
        res["bounds"] = float(max(0.0, (self.lb - x).max(initial=0.0), (x - self.ub).max(initial=0.0)))
        worst = product = 0.0
        for k in self.rsoc:
            # distance form ||(u - v, 2 w)|| <= u + v; the product form u v >= w^2 is
            # reported separately because it scales with the size of u and v
            u, v, w = k.u.value(x), k.v.value(x), k.w.value(x)
            worst = max(worst, math.hypot(u - v, 2 * w) - (u + v), -u, -v)
            product = max(product, w * w - u * v)
        for k in self.soc:
            r = k.radius.value(x)
            worst = max(worst, math.hypot(*[e.value(x) for e in k.vec]) - r if k.vec else -r)
        res["cone"] = float(max(0.0, worst))
        res["rsoc_product"] = float(product)
        return res

    # -- debug dump ---------------------------------------------------------

    def to_json(self) -> str:
        def rows(mat, rhs, sense=None):
            out = []
            for r in range(mat.shape[0]):
                lo, hi = mat.indptr[r], mat.indptr[r + 1]
                row = {"idx": mat.indices[lo:hi].tolist(), "coef": mat.data[lo:hi].tolist(),
                       "rhs": float(rhs[r])}
                if sense is not None:
                    row["sense"] = sense[r]
                out.append(row)
            return out

        def bound(v):
            return None if math.isinf(v) else float(v)

        doc = {
            "n": self.n,
            "c": self.c.tolist(),
            "bounds": [[bound(a), bound(b)] for a, b in zip(self.lb, self.ub)],
            "eq": rows(self.A_eq, self.b_eq),
            "ineq": rows(self.A_in, self.b_in, self.sense),
            "rsoc": [{"u": k.u.to_json(), "v": k.v.to_json(), "w": k.w.to_json()} for k in self.rsoc],
            "soc": [{"radius": k.radius.to_json(), "vec": [e.to_json() for e in k.vec]}
                    for k in self.soc],
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ConicProgram":
        doc = json.loads(text)
        n = doc["n"]

        def mat(rows):
            data, ind, ptr = [], [], [0]
            for r in rows:
                ind += r["idx"]
                data += r["coef"]
                ptr.append(len(ind))
            return sparse.csr_matrix((data, ind, ptr), shape=(len(rows), n))

        lb = [-math.inf if b[0] is None else b[0] for b in doc["bounds"]]
        ub = [math.inf if b[1] is None else b[1] for b in doc["bounds"]]
        return cls(
            n=n, c=doc["c"], lb=lb, ub=ub,
            A_eq=mat(doc["eq"]), b_eq=[r["rhs"] for r in doc["eq"]],
            A_in=mat(doc["ineq"]), b_in=[r["rhs"] for r in doc["ineq"]],
            sense=[r["sense"] for r in doc["ineq"]],
            rsoc=tuple(RotatedCone(*(Affine.from_json(k[s]) for s in "uvw")) for k in doc["rsoc"]),
            soc=tuple(SecondOrderCone(Affine.from_json(k["radius"]),
                                      tuple(Affine.from_json(e) for e in k["vec"]))
                      for k in doc["soc"]),
        )


class ProgramBuilder:
    """Incremental assembly of a :class:`ConicProgram`."""

    def __init__(self):
        self._c: list[float] = []
        self._lb: list[float] = []
        self._ub: list[float] = []
        self._eq: list[tuple[Affine, float]] = []
        self._in: list[tuple[Affine, str, float]] = []
        self._rsoc: list[RotatedCone] = []
        self._soc: list[SecondOrderCone] = []

    @property
    def n(self) -> int:
        return len(self._c)

    def add_vars(self, count: int, cost=0.0, lb=0.0, ub=math.inf) -> np.ndarray:
        start = self.n
        self._c += list(np.broadcast_to(np.asarray(cost, float), (count,)))
        self._lb += list(np.broadcast_to(np.asarray(lb, float), (count,)))
        self._ub += list(np.broadcast_to(np.asarray(ub, float), (count,)))
        return np.arange(start, start + count)

    def add_eq(self, terms, rhs: float) -> None:
        self._eq.append((Affine.of(terms), float(rhs)))

    def add_ineq(self, terms, sense: str, rhs: float) -> None:
        self._in.append((Affine.of(terms), sense, float(rhs)))

    def add_rsoc(self, u: Affine, v: Affine, w: Affine) -> None:
        self._rsoc.append(RotatedCone(u, v, w))

    def add_soc(self, radius: Affine, vec: Iterable[Affine]) -> None:
        self._soc.append(SecondOrderCone(radius, tuple(vec)))

    @staticmethod
    def _matrix(rows: list[Affine], n: int) -> sparse.csr_matrix:
        data, ind, ptr = [], [], [0]
        for a in rows:
            ind += a.idx
            data += a.coef
            ptr.append(len(ind))
        return sparse.csr_matrix((data, ind, ptr), shape=(len(rows), n))

    def build(self) -> ConicProgram:
        n = self.n
        return ConicProgram(
            n=n, c=self._c, lb=self._lb, ub=self._ub,
            A_eq=self._matrix([a for a, _ in self._eq], n), b_eq=[b for _, b in self._eq],
            A_in=self._matrix([a for a, _, _ in self._in], n), b_in=[b for _, _, b in self._in],
            sense=[s for _, s, _ in self._in], rsoc=tuple(self._rsoc), soc=tuple(self._soc),
        )


@dataclass
class SolveResult:
    status: str
    x: np.ndarray | None
    objective: float
    iterations: int
    residuals: dict[str, float] = field(default_factory=dict)
    duality_gap: float = math.nan
    message: str = ""

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL

    @property
    def primal_residual(self) -> float:
        return max(self.residuals.values(), default=0.0)


def _affine_rows(exprs: list[Affine], n: int, sign: float = -1.0):
    """(A, b) with rows ``sign * coef`` and ``b = const`` so that ``b - A x`` = expr."""
    data, ind, ptr, b = [], [], [0], []
    for e in exprs:
        ind += e.idx
        data += [sign * v for v in e.coef]
        ptr.append(len(ind))
        b.append(e.const)
    return sparse.csr_matrix((data, ind, ptr), shape=(len(exprs), n)), np.array(b, dtype=float)


def _to_clarabel(p: ConicProgram):
    n = p.n
    blocks_A, blocks_b, cones = [], [], []
    eye = sparse.identity(n, format="csr")

    fixed = np.flatnonzero(p.lb == p.ub)
    n_zero = p.A_eq.shape[0] + len(fixed)
    if n_zero:
        blocks_A += [p.A_eq, eye[fixed]]
        blocks_b += [p.b_eq, p.lb[fixed]]
        cones.append(clarabel.ZeroConeT(n_zero))

    free_lb = np.flatnonzero(np.isfinite(p.lb) & (p.lb != p.ub))
    free_ub = np.flatnonzero(np.isfinite(p.ub) & (p.lb != p.ub))
    sign = np.where(np.array(p.sense, dtype=object) == "<=", 1.0, -1.0)
    n_pos = p.A_in.shape[0] + len(free_lb) + len(free_ub)
    if n_pos:
        blocks_A += [sparse.diags(sign) @ p.A_in if len(sign) else p.A_in,
                     -eye[free_lb], eye[free_ub]]
        blocks_b += [sign * p.b_in, -p.lb[free_lb], p.ub[free_ub]]
        cones.append(clarabel.NonnegativeConeT(n_pos))

    cone_rows: list[Affine] = []
    for k in p.rsoc:
        # u v >= w^2, u, v >= 0  <=>  ||(u - v, 2 w)|| <= u + v
        cone_rows.append(Affine.of(list(zip(k.u.idx, k.u.coef)) + list(zip(k.v.idx, k.v.coef)),
                                   k.u.const + k.v.const))
        cone_rows.append(Affine.of(list(zip(k.u.idx, k.u.coef))
                                   + [(i, -a) for i, a in zip(k.v.idx, k.v.coef)],
                                   k.u.const - k.v.const))
        cone_rows.append(Affine.of([(i, 2 * a) for i, a in zip(k.w.idx, k.w.coef)], 2 * k.w.const))
        cones.append(clarabel.SecondOrderConeT(3))
    for k in p.soc:
        cone_rows += [k.radius, *k.vec]
        cones.append(clarabel.SecondOrderConeT(1 + len(k.vec)))
    if cone_rows:
        A, b = _affine_rows(cone_rows, n)
        blocks_A.append(A)
        blocks_b.append(b)

    if blocks_A:
        A = sparse.vstack(blocks_A, format="csc")
        b = np.concatenate(blocks_b)
    else:
        A, b = sparse.csc_matrix((0, n)), np.zeros(0)
    return A, b, cones


# Clarabel occasionally stalls a digit short on degenerate flow programs; these
# settings are tried in order and the first result meeting the contract wins.
_ATTEMPTS = (
    {},
    {"tighten": 0.1},
    {"tighten": 0.01},
    {"max_step_fraction": 0.95},
    {"static_regularization_proportional": 1e-20, "iterative_refinement_max_iter": 50},
    {"equilibrate_enable": False},
)


def _run_clarabel(program: ConicProgram, A, b, cones, tol: float, max_iter: int, extra: dict):
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.max_iter = max_iter
    settings.tol_feas = tol
    settings.tol_gap_abs = tol
    settings.tol_gap_rel = tol
    settings.presolve_enable = False
    # the single-threaded LDL backend keeps results bit-reproducible across runs
    settings.direct_solve_method = "qdldl"
    for k, v in extra.items():
        if k == "tighten":
            settings.tol_feas = settings.tol_gap_abs = settings.tol_gap_rel = tol * v
        else:
            setattr(settings, k, v)
    P = sparse.csc_matrix((program.n, program.n))
    return clarabel.DefaultSolver(P, program.c, A, b, cones, settings).solve()


def solve(program: ConicProgram, tol: float = DEFAULT_TOL, max_iter: int = 200,
          polish: Callable[[np.ndarray], np.ndarray] | None = None) -> SolveResult:
    """Minimize the program.

    ``status == "optimal"`` guarantees that the returned point violates no
    constraint by more than ``tol * (1 + rhs_norm)``, that every rotated cone holds
    in product form ``u v >= w**2 - tol`` and that the duality gap is at most
    ``tol * (1 + |objective|)``; anything weaker is reported as a numerical failure
    together with the best diagnostics seen.

    ``polish`` may repair the raw interior-point iterate (e.g. snap epigraph
    variables onto their cones). The contract is checked on the polished point and
    the gap is measured against the solver's dual objective, so a polish that
    hurts optimality is caught.
    """
    A, b, cones = _to_clarabel(program)
    limit = tol * (1.0 + program.rhs_norm)
    iters = 0
    msg = ""
    res: dict[str, float] = {}
    gap = math.nan
    for extra in _ATTEMPTS:
        sol = _run_clarabel(program, A, b, cones, tol, max_iter, extra)
        status = str(sol.status)
        iters += int(sol.iterations)
        if status in ("PrimalInfeasible", "AlmostPrimalInfeasible"):
            return SolveResult(INFEASIBLE, None, math.inf, iters, message=status)
        if status in ("DualInfeasible", "AlmostDualInfeasible"):
            return SolveResult(UNBOUNDED, None, -math.inf, iters, message=status)
        x = np.array(sol.x, dtype=float)
        if polish is not None:
            x = polish(x)
        res = program.residuals(x)
        obj = float(program.c @ x)
        gap = abs(obj - float(sol.obj_val_dual))
        linear = max(v for k, v in res.items() if k != "rsoc_product")
        if (status in ("Solved", "AlmostSolved") and linear <= limit
                and res["rsoc_product"] <= tol
                and gap <= tol * (1.0 + abs(obj))):
            return SolveResult(OPTIMAL, x, obj, iters, res, gap, status)
        msg = (f"solver status {status}; worst residual {linear:.3e} "
               f"(limit {limit:.3e}); cone product residual {res['rsoc_product']:.3e}; "
               f"duality gap {gap:.3e}")
        logger.debug("retrying after: %s", msg)
    logger.warning("numerical failure: %s", msg)
    return SolveResult(NUMERICAL_FAILURE, None, math.nan, iters, res, gap, msg)


# -- verification oracle for plain min-cost flow -----------------------------

def brute_force_min_cost_flow(n_vertices: int, edges, injections: Mapping[int, float],
                              grid: float = 0.25):
    """Exhaustive min-cost flow over grid-valued edge flows.

    ``edges`` holds ``(tail, head, capacity, cost)``; ``injections`` maps a vertex to
    its net outflow (negative at sinks). Returns ``(objective, flows)`` or
    ``(math.inf, None)`` when no grid flow conserves the injections.
    """
    edges = list(edges)
    if len(edges) > 6:
        raise ValueError("brute force is limited to 6 edges")
    levels = []
    for _, _, cap, _ in edges:
        k = cap / grid
        if abs(k - round(k)) > 1e-9:
            raise ValueError(f"capacity {cap} is not a multiple of the grid step {grid}")
        levels.append(np.arange(int(round(k)) + 1) * grid)
    target = np.zeros(n_vertices)
    for v, s in injections.items():
        target[v] = s
    flows = np.array(list(itertools.product(*levels)), dtype=float).reshape(-1, len(edges))
    net = np.zeros((len(flows), n_vertices))
    for e, (t, h, _, _) in enumerate(edges):
        net[:, t] += flows[:, e]
        net[:, h] -= flows[:, e]
    ok = np.all(np.abs(net - target) <= 1e-9, axis=1)
    if not ok.any():
        return math.inf, None
    cost = flows[ok] @ np.array([e[3] for e in edges], dtype=float)
    k = int(np.argmin(cost))
    return float(cost[k]), flows[ok][k]
