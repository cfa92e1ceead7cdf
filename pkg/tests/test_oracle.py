import math

import numpy as np
import pytest

from flownav.conic import brute_force_min_cost_flow
from flownav.oracle import (OracleReport, bellman_ford, exhaustive_assignment,
                            exhaustive_kcenter, exhaustive_min_cover_count)


def test_report_compare():
    assert OracleReport.compare(1.0, 1.0 + 1e-9, 1e-6).passed
    assert not OracleReport.compare(1.0, 1.1, 1e-6).passed
    assert OracleReport.compare(math.inf, math.inf, 0.0).passed
    r = OracleReport.compare(math.inf, 2.0, 1e6)
    assert r.gap == math.inf and not r.passed


def test_assignment_hand_example():
    costs = np.array([[0.0, 5.0], [5.0, 0.0]])
    pos = np.array([[0.0, 0.0], [3.0, 0.0]])
    assert exhaustive_assignment(costs, 10.0, pos).landmarks == (0, 1)
    tight = exhaustive_assignment(costs, 1.0, pos)
    assert tight.feasible and tight.cost == 5.0 and tight.landmarks == (0, 0)


def test_assignment_caps():
    with pytest.raises(ValueError):
        exhaustive_assignment(np.zeros((7, 2)), 1.0, np.zeros((2, 2)))


def test_kcenter_line():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [10.0, 0.0]])
    assert exhaustive_kcenter(pts, 1) == pytest.approx(8.0)
    assert exhaustive_kcenter(pts, 2) == pytest.approx(1.0)
    assert exhaustive_kcenter(pts, 4) == 0.0
    assert exhaustive_min_cover_count(pts, 1.0) == 2
    assert exhaustive_min_cover_count(pts, 0.5, k_max=3) is None


def test_bellman_ford_small():
    d = bellman_ford(4, [(0, 1, 1.0), (1, 2, 1.0), (0, 2, 3.0)], 0)
    assert d == [0.0, 1.0, 2.0, math.inf]


def test_brute_force_flow_hand_example():
    # two parallel routes 0->1, the cheaper one saturates first
    edges = [(0, 1, 1.0, 1.0), (0, 1, 2.0, 3.0)]
    cost, flows = brute_force_min_cost_flow(2, edges, {0: 2.0, 1: -2.0})
    assert cost == pytest.approx(1.0 + 3.0)
    np.testing.assert_allclose(flows, [1.0, 1.0])
    cost, _ = brute_force_min_cost_flow(2, edges, {0: 4.0, 1: -4.0})
    assert cost == math.inf
