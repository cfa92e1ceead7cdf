import numpy as np
import pytest

from flownav.ingest import SynthConfig, generate_synthetic, make_records


def chain_records(xs, feats=None):
    """Records on the x axis; default features make every neighbour pair distinct."""
    xs = np.asarray(xs, dtype=float)
    pos = np.column_stack([xs, np.zeros_like(xs)])
    if feats is None:
        feats = np.column_stack([np.arange(len(xs)) ** 1.5, np.zeros(len(xs))])
    return make_records(pos, np.asarray(feats, dtype=float))


def conservation_residual(graph, flows, inj):
    """Worst |net outflow - injection| over all vertices."""
    net = np.zeros(graph.n_vertices)
    np.add.at(net, graph.src, flows)
    np.add.at(net, graph.dst, -flows)
    return float(np.abs(net - inj.net(graph.n_vertices)).max())


@pytest.fixture(scope="session")
def small_loop():
    records, queries = generate_synthetic(SynthConfig(n_points=60, aliasing_pairs=1, noise=0.3,
                                                      query_count=12, query_stride=3, seed=3))
    return records, queries


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
