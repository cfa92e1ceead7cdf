import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flownav import conic
from flownav.conic import Affine, ConicProgram, ProgramBuilder, brute_force_min_cost_flow


def flow_program(n, edges, injections):
    b = ProgramBuilder()
    y = b.add_vars(len(edges), cost=[e[3] for e in edges], lb=0.0, ub=[e[2] for e in edges])
    for v in range(n):
        terms = [(int(y[k]), 1.0) for k, e in enumerate(edges) if e[0] == v]
        terms += [(int(y[k]), -1.0) for k, e in enumerate(edges) if e[1] == v]
        b.add_eq(terms, injections.get(v, 0.0))
    return b.build()


DIAMOND = [(0, 1, 1.0, 1.0), (1, 3, 1.0, 0.0), (0, 2, 1.0, 3.0), (2, 3, 1.0, 0.0)]


def test_one_dimensional_lp():
    b = ProgramBuilder()
    y = b.add_vars(1, cost=1.0, lb=-math.inf)
    b.add_ineq([(int(y[0]), 1.0)], ">=", 3.0)
    b.add_ineq([(int(y[0]), 1.0)], "<=", 10.0)
    res = conic.solve(b.build())
    assert res.optimal
    assert res.x[0] == pytest.approx(3.0, abs=1e-7)


def test_chain_flow_unique():
    edges = [(0, 1, 1.0, 2.0), (1, 2, 1.0, 5.0)]
    res = conic.solve(flow_program(3, edges, {0: 1.0, 2: -1.0}))
    assert res.optimal
    np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-7)
    assert res.objective == pytest.approx(7.0, abs=1e-6)


def test_rotated_cone_binding():
    # min z  s.t. (1 - y) z >= y^2, y = 0.5
    b = ProgramBuilder()
    y, z = b.add_vars(2, cost=[0.0, 1.0], lb=[-math.inf, 0.0])
    b.add_eq([(int(y), 1.0)], 0.5)
    b.add_rsoc(Affine.of({int(y): -1.0}, 1.0), Affine.of({int(z): 1.0}), Affine.of({int(y): 1.0}))
    res = conic.solve(b.build())
    assert res.optimal
    assert res.x[1] == pytest.approx(0.5, abs=1e-7)


def test_soc_projection():
    # min -x0 s.t. ||(x0, x1)|| <= 2, x1 = 1  ->  x0 = sqrt(3)
    b = ProgramBuilder()
    x = b.add_vars(2, cost=[-1.0, 0.0], lb=-math.inf)
    b.add_eq([(int(x[1]), 1.0)], 1.0)
    b.add_soc(Affine.of((), 2.0), [Affine.of({int(x[0]): 1.0}), Affine.of({int(x[1]): 1.0})])
    res = conic.solve(b.build())
    assert res.optimal
    assert res.x[0] == pytest.approx(math.sqrt(3.0), abs=1e-7)


def test_infeasible_and_unbounded():
    b = ProgramBuilder()
    y = b.add_vars(1, lb=0.0, ub=1.0)
    b.add_eq([(int(y[0]), 1.0)], 2.0)
    res = conic.solve(b.build())
    assert res.status == conic.INFEASIBLE and res.x is None

    b = ProgramBuilder()
    b.add_vars(1, cost=-1.0, lb=0.0)
    res = conic.solve(b.build())
    assert res.status == conic.UNBOUNDED and res.x is None


def test_capacity_cut_infeasible():
    res = conic.solve(flow_program(4, DIAMOND, {0: 3.0, 3: -3.0}))
    assert res.status == conic.INFEASIBLE
    obj, flows = brute_force_min_cost_flow(4, DIAMOND, {0: 3.0, 3: -3.0})
    assert obj == math.inf and flows is None


def test_brute_force_diamond():
    obj, flows = brute_force_min_cost_flow(4, DIAMOND, {0: 1.0, 3: -1.0})
    assert obj == 1.0
    np.testing.assert_allclose(flows, [1, 1, 0, 0])
    obj, flows = brute_force_min_cost_flow(4, DIAMOND, {0: 2.0, 3: -2.0})
    assert obj == 4.0
    np.testing.assert_allclose(flows, [1, 1, 1, 1])


def test_brute_force_rejects_off_grid_and_large():
    with pytest.raises(ValueError):
        brute_force_min_cost_flow(2, [(0, 1, 0.3, 1.0)], {0: 0.25, 1: -0.25})
    with pytest.raises(ValueError):
        brute_force_min_cost_flow(2, [(0, 1, 1.0, 1.0)] * 7, {})


def random_network(rng):
    n = int(rng.integers(3, 6))
    pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
    pick = rng.choice(len(pairs), size=min(6, len(pairs)), replace=False)
    edges = []
    for k in sorted(pick):
        i, j = pairs[k]
        edges.append((i, j, 0.25 * int(rng.integers(1, 9)), float(rng.integers(0, 10))))
    supply = 0.25 * int(rng.integers(1, 7))
    return n, edges, {0: supply, n - 1: -supply}


def test_solver_matches_brute_force_on_seeded_networks():
    rng = np.random.default_rng(1)
    feasible = 0
    for _ in range(20):
        n, edges, inj = random_network(rng)
        oracle, _ = brute_force_min_cost_flow(n, edges, inj)
        res = conic.solve(flow_program(n, edges, inj))
        if math.isinf(oracle):
            assert res.status == conic.INFEASIBLE
            continue
        feasible += 1
        # capacities and supplies on the grid make the LP optimum grid-valued
        assert res.optimal
        assert abs(res.objective - oracle) <= 1e-4
    assert feasible >= 5


def test_residuals_reported_match_recomputation():
    prog = flow_program(4, DIAMOND, {0: 1.5, 3: -1.5})
    res = conic.solve(prog)
    assert res.optimal
    again = prog.residuals(res.x)
    for k, v in res.residuals.items():
        assert abs(v - again[k]) <= 1e-8
    assert res.primal_residual <= 1e-8 * (1 + prog.rhs_norm)


def test_json_roundtrip():
    b = ProgramBuilder()
    y, z = b.add_vars(2, cost=[1.0, 1.0], lb=[0.0, 0.0], ub=[1.0, math.inf])
    b.add_eq([(int(y), 1.0)], 0.5)
    b.add_ineq([(int(y), 1.0), (int(z), 2.0)], ">=", 0.1)
    b.add_rsoc(Affine.of({int(y): -1.0}, 1.0), Affine.of({int(z): 1.0}), Affine.of({int(y): 1.0}))
    b.add_soc(Affine.of((), 3.0), [Affine.of({int(y): 1.0})])
    prog = b.build()
    back = ConicProgram.from_json(prog.to_json())
    assert back.to_json() == prog.to_json()
    assert conic.solve(back).objective == pytest.approx(conic.solve(prog).objective, abs=1e-9)


def test_program_validation():
    with pytest.raises(conic.ProgramError):
        ConicProgram(n=1, c=[0.0], lb=[1.0], ub=[0.0], A_eq=np.zeros((0, 1)), b_eq=[],
                     A_in=np.zeros((0, 1)), b_in=[], sense=[])
    b = ProgramBuilder()
    b.add_vars(1)
    b.add_rsoc(Affine.of({5: 1.0}), Affine.of({0: 1.0}), Affine.of({0: 1.0}))
    with pytest.raises(conic.ProgramError):
        b.build()


def test_deterministic():
    prog = flow_program(4, DIAMOND, {0: 1.5, 3: -1.5})
    a, b = conic.solve(prog), conic.solve(prog)
    assert np.array_equal(a.x, b.x) and a.objective == b.objective


@settings(max_examples=25, deadline=None)
@given(st.floats(0.05, 0.95), st.floats(0.1, 5.0))
def test_rotated_cone_holds_at_optimum(y_val, scale):
    # min z  s.t. (scale - y) z >= y^2 with y fixed: z* = y^2 / (scale - y)
    y_fix = y_val * scale
    b = ProgramBuilder()
    y, z = b.add_vars(2, cost=[0.0, 1.0], lb=[-math.inf, 0.0])
    b.add_eq([(int(y), 1.0)], y_fix)
    b.add_rsoc(Affine.of({int(y): -1.0}, scale), Affine.of({int(z): 1.0}), Affine.of({int(y): 1.0}))
    res = conic.solve(b.build())
    assert res.optimal
    u, v, w = scale - res.x[0], res.x[1], res.x[0]
    assert u >= -1e-8 and v >= -1e-8
    assert u * v >= w * w - 1e-8
    assert res.x[1] == pytest.approx(y_fix ** 2 / (scale - y_fix), rel=1e-6, abs=1e-8)
