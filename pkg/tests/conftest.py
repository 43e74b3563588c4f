import numpy as np
import pytest

from nars.hetgraph import HeteroGraph


def dense_weights(n, edges):
    """Brute-force row-normalised symmetric adjacency from a list of (u, v) pairs."""
    a = np.zeros((n, n))
    for u, v in edges:
        a[u, v] = 1.0
        a[v, u] = 1.0
    deg = a.sum(1, keepdims=True)
    return np.divide(a, deg, out=np.zeros_like(a), where=deg > 0)


def mag_graph(n_paper=6, n_author=4, n_field=3, n_inst=2, seed=0):
    """OGB-MAG-shaped toy: writes(A,P), has_topic(P,F), cites(P,P), affiliated(A,I)."""
    rng = np.random.default_rng(seed)

    def rand_edges(ns, nd, m):
        return rng.integers(0, ns, m), rng.integers(0, nd, m)

    rels = []
    for name, s, d, ns, nd in [("writes", "author", "paper", n_author, n_paper),
                               ("has_topic", "paper", "field", n_paper, n_field),
                               ("cites", "paper", "paper", n_paper, n_paper),
                               ("affiliated", "author", "institution", n_author, n_inst)]:
        src, dst = rand_edges(ns, nd, 2 * max(ns, nd))
        rels.append((name, s, d, src, dst))
    return HeteroGraph.from_edges(
        [("paper", n_paper), ("author", n_author), ("field", n_field), ("institution", n_inst)],
        rels,
    )


@pytest.fixture
def toy_graph():
    """P:3 then A:2 with writes(A,P) = {(0,0), (1,2)}."""
    return HeteroGraph.from_edges([("paper", 3), ("author", 2)],
                                  [("writes", "author", "paper", [0, 1], [0, 2])])


@pytest.fixture
def mag():
    return mag_graph()


def random_typed_graph(rng, max_nodes=50, max_rel=4):
    n_types = int(rng.integers(1, 4))
    counts = rng.integers(1, max(2, max_nodes // n_types) + 1, n_types)
    types = [(f"t{i}", int(c)) for i, c in enumerate(counts)]
    rels = []
    for r in range(int(rng.integers(1, max_rel + 1))):
        s, d = rng.integers(0, n_types, 2)
        m = int(rng.integers(0, 3 * (counts[s] + counts[d])))
        rels.append((f"r{r}", f"t{s}", f"t{d}",
                     rng.integers(0, counts[s], m), rng.integers(0, counts[d], m)))
    return HeteroGraph.from_edges(types, rels)


def global_edges(g, rel_ids):
    out = []
    for r in rel_ids:
        rel = g.relations[r]
        s, d = g.edges(r)
        out += list(zip((s + g.offsets[rel.src]).tolist(), (d + g.offsets[rel.dst]).tolist()))
    return out


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
