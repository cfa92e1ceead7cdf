import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flownav.graph import (GraphError, GraphParams, build_graph, dump_graph, geodesic_distances,
                           segments_intersect)
from flownav.ingest import ObstacleSet, make_records, positions_of

from conftest import chain_records


def test_two_records_one_edge_pair():
    recs = make_records([[0.0, 0.0], [1.0, 0.0]], [[0.0], [0.5]])
    g = build_graph(recs, GraphParams(alpha=2.0))
    assert g.n_edges == 2
    assert sorted(zip(g.src.tolist(), g.dst.tolist())) == [(0, 1), (1, 0)]
    np.testing.assert_allclose(g.capacity, 1.0)
    np.testing.assert_allclose(g.cost, 2.0)


def test_no_edges_is_fatal():
    recs = make_records([[0.0, 0.0], [3.0, 0.0]], [[0.0], [1.0]])
    with pytest.raises(GraphError, match="no edges"):
        build_graph(recs, GraphParams(alpha=2.0))
    with pytest.raises(GraphError):
        build_graph([], GraphParams())


def test_wall_blocks_edge():
    recs = chain_records([0.0, 10.0, 20.0])
    wall = ObstacleSet(np.array([[[5.0, -1.0], [5.0, 1.0]]]))
    g = build_graph(recs, GraphParams(alpha=12.0, obstacles=wall))
    pairs = {(int(a), int(b)) for a, b in zip(g.src, g.dst)}
    # brute-force: keep a pair iff within alpha and its segment misses the wall
    pos = positions_of(recs)
    expect = set()
    for i in range(3):
        for j in range(3):
            if i != j and np.linalg.norm(pos[i] - pos[j]) <= 12.0 and not segments_intersect(
                    pos[i], pos[j], wall.segments[0, 0], wall.segments[0, 1]):
                expect.add((i, j))
    assert pairs == expect == {(1, 2), (2, 1)}


@pytest.mark.parametrize("a1,a2,b1,b2,hit", [
    ((0, 0), (2, 0), (1, -1), (1, 1), True),
    ((0, 0), (1, 0), (2, 0), (3, 0), False),
    ((0, 0), (2, 2), (0, 2), (2, 0), True),
    ((0, 0), (1, 0), (1, 0), (2, 5), True),     # touching endpoint
    ((0, 0), (2, 0), (1, 0), (3, 0), True),     # collinear overlap
    ((0, 0), (1, 1), (0, 1), (0.4, 0.6), False),
])
def test_segments_intersect(a1, a2, b1, b2, hit):
    assert segments_intersect(a1, a2, b1, b2) is hit
    assert segments_intersect(b1, b2, a1, a2) is hit


def test_geodesic_chain():
    pos = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    assert geodesic_distances(pos, 1.1)(0, 2) == pytest.approx(2.0)
    assert geodesic_distances(pos, 0.9)(0, 2) == math.inf


def test_geodesic_u_corridor():
    # up one side, across, down the other: ends 1 m apart, 10 m of corridor between
    pts = [(0.0, float(y)) for y in range(5)] + [(0.5, 4.5)] + [(1.0, float(y)) for y in range(4, -1, -1)]
    pos = np.array(pts)
    seg = np.linalg.norm(np.diff(pos, axis=0), axis=1)
    walk = float(seg.sum())
    wall = ObstacleSet(np.array([[[0.5, -1.0], [0.5, 4.2]]]))
    from flownav.graph import GeodesicDistances
    geo = GeodesicDistances(pos, 1.05, obstacles=wall)
    assert np.linalg.norm(pos[0] - pos[-1]) == pytest.approx(1.0)
    assert geo(0, len(pos) - 1) == pytest.approx(walk)


def test_geodesic_not_shorter_than_euclid():
    rng = np.random.default_rng(0)
    pos = rng.uniform(0, 10, size=(40, 2))
    geo = geodesic_distances(pos, 3.0)
    eu = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
    finite = np.isfinite(geo.matrix)
    assert np.all(geo.matrix[finite] >= eu[finite] - 1e-12)
    assert np.allclose(geo.matrix, geo.matrix.T)


def test_geodesic_graph_option():
    pts = [(0.0, float(y)) for y in range(5)] + [(1.0, 4.0)] + [(2.0, float(y)) for y in range(4, -1, -1)]
    recs = make_records(np.array(pts), np.arange(11.0)[:, None])
    g = build_graph(recs, GraphParams(alpha=3.0, use_geodesic=True, geodesic_step=1.01))
    # 0 and 10 are 2 m apart in the plane but 10 m along the corridor
    pairs = {(int(a), int(b)) for a, b in zip(g.src, g.dst)}
    assert (0, 10) not in pairs
    euclid = build_graph(recs, GraphParams(alpha=3.0))
    assert (0, 10) in set(zip(euclid.src.tolist(), euclid.dst.tolist()))
    assert np.all(g.geo_dist <= 3.0)


def test_identical_features_use_floor():
    recs = make_records([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], [[0.0], [0.0], [1.0]])
    g = build_graph(recs, GraphParams(alpha=1.5))
    assert np.all(np.isfinite(g.cost))
    assert g.eps_f == pytest.approx(1e-6 * 1.0)


def test_coincident_positions_dropped():
    recs = make_records([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0]], [[0.0], [1.0], [2.0]])
    g = build_graph(recs, GraphParams(alpha=2.0))
    assert np.all(g.geo_dist > 0)
    assert g.n_edges == 4


def test_disconnected_warns(caplog):
    recs = chain_records([0.0, 1.0, 10.0, 11.0])
    g = build_graph(recs, GraphParams(alpha=2.0))
    assert "2 weakly connected components" in caplog.text
    assert len(g.components()) == 2


def test_dump(tmp_path):
    g = build_graph(chain_records([0.0, 1.0, 2.0]), GraphParams(alpha=1.5))
    dump_graph(tmp_path / "g.csv", g)
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert lines[0] == "i,j,geo_dist,feat_dist,u,c,rho"
    assert len(lines) == 1 + g.n_edges


@settings(max_examples=25, deadline=None)
@given(st.integers(3, 25), st.integers(0, 2 ** 31), st.floats(0.5, 4.0), st.floats(0.2, 3.0),
       st.floats(0.2, 3.0))
def test_graph_invariants(n, seed, alpha, lx, lf):
    rng = np.random.default_rng(seed)
    pos = rng.uniform(0, 6, size=(n, 2))
    feat = rng.normal(size=(n, 3))
    try:
        g = build_graph(make_records(pos, feat), GraphParams(alpha=alpha, lambda_x=lx, lambda_f=lf))
    except GraphError:
        return
    assert np.all(g.src != g.dst)
    assert np.all(g.geo_dist <= alpha)
    np.testing.assert_allclose(g.capacity / lx, g.geo_dist, rtol=1e-12)
    np.testing.assert_allclose(g.cost * np.maximum(g.feat_dist, g.eps_f), lf, rtol=1e-12)
    fwd = set(zip(g.src.tolist(), g.dst.tolist()))
    assert fwd == {(b, a) for a, b in fwd}

    # permutation equivariance
    perm = rng.permutation(n)
    g2 = build_graph(make_records(pos[perm], feat[perm]), GraphParams(alpha=alpha, lambda_x=lx, lambda_f=lf))
    mapped = {(int(perm[a]), int(perm[b])) for a, b in zip(g2.src, g2.dst)}
    assert mapped == fwd
