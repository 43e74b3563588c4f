import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nars.hetgraph import (
    FeatureMatrix,
    GraphFormatError,
    HeteroGraph,
    global_id,
    load_features,
    load_graph,
    load_labels,
    local_id,
    read_nfeat,
    save_features,
    save_graph,
    write_nfeat,
)

from conftest import random_typed_graph


def write_toy(d, edges="0\t0\n1\t2\n"):
    (d / "graph.meta").write_text("node paper 3\nnode author 2\nrelation writes author paper writes.tsv\n")
    (d / "writes.tsv").write_text(edges)


def test_load_toy_graph(tmp_path):
    write_toy(tmp_path)
    g = load_graph(tmp_path)
    assert g.num_nodes == 5
    assert g.num_edges(0) == 2


def test_duplicate_edges_are_merged(tmp_path):
    write_toy(tmp_path, "# comment\n0\t0\n0\t0\n1\t2\n")
    assert load_graph(tmp_path).num_edges(0) == 2


def test_endpoint_out_of_range(tmp_path):
    write_toy(tmp_path, "5\t0\n")
    with pytest.raises(GraphFormatError, match="endpoint out of range"):
        load_graph(tmp_path)


def test_malformed_line_reports_location(tmp_path):
    write_toy(tmp_path, "0\t0\nbogus\n")
    with pytest.raises(GraphFormatError, match=r"writes\.tsv:2"):
        load_graph(tmp_path)


def test_missing_edge_file(tmp_path):
    (tmp_path / "graph.meta").write_text("node paper 3\nrelation cites paper paper cites.tsv\n")
    with pytest.raises(FileNotFoundError):
        load_graph(tmp_path)


def test_global_id(toy_graph):
    assert global_id(toy_graph, 0, 0) == 0
    assert global_id(toy_graph, 1, 0) == 3
    with pytest.raises(IndexError):
        global_id(toy_graph, 1, 2)


def test_global_id_bijection(mag):
    seen = set()
    for t in mag.node_types:
        for i in range(t.count):
            gid = global_id(mag, t.id, i)
            assert local_id(mag, gid) == (t.id, i)
            seen.add(gid)
    assert seen == set(range(mag.num_nodes))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_csr_invariants(seed):
    g = random_typed_graph(np.random.default_rng(seed))
    for r in g.relations:
        f, b = g.forward[r.id], g.reverse[r.id]
        assert np.diff(f.indptr).sum() == np.diff(b.indptr).sum() == g.num_edges(r.id)
        assert (f != b.T).nnz == 0
        for row in range(f.shape[0]):
            cols = f.indices[f.indptr[row]:f.indptr[row + 1]]
            assert np.all(np.diff(cols) > 0)  # sorted, no duplicates


def test_save_graph_round_trip(tmp_path, mag):
    save_graph(mag, tmp_path / "a")
    g2 = load_graph(tmp_path / "a")
    save_graph(g2, tmp_path / "b")
    for r in mag.relations:
        a = (tmp_path / "a" / f"{r.name}.tsv").read_bytes()
        assert a == (tmp_path / "b" / f"{r.name}.tsv").read_bytes()
        np.testing.assert_array_equal(mag.edges(r.id), g2.edges(r.id))


def test_features_zero_file(tmp_path, toy_graph):
    write_nfeat(tmp_path / "p.nfeat", np.zeros((3, 2)))
    fm = load_features(toy_graph, "paper", tmp_path / "p.nfeat")
    assert fm.dim == 2 and not fm.data.any()


def test_features_row_mismatch(tmp_path, toy_graph):
    write_nfeat(tmp_path / "p.nfeat", np.zeros((4, 2)))
    with pytest.raises(ValueError, match="mismatch"):
        load_features(toy_graph, "paper", tmp_path / "p.nfeat")


def test_features_non_finite(tmp_path, toy_graph):
    x = np.zeros((3, 2))
    x[1, 1] = np.nan
    write_nfeat(tmp_path / "p.nfeat", x)
    with pytest.raises(ValueError):
        load_features(toy_graph, "paper", tmp_path / "p.nfeat")


def test_features_tsv_fallback(tmp_path, toy_graph):
    (tmp_path / "a.tsv").write_text("1\t2\n3\t4\n")
    fm = load_features(toy_graph, "author", tmp_path / "a.tsv")
    np.testing.assert_array_equal(fm.data, [[1, 2], [3, 4]])


def test_nfeat_truncated_and_bad_magic(tmp_path):
    p = tmp_path / "x.nfeat"
    write_nfeat(p, np.ones((3, 2)))
    raw = p.read_bytes()
    p.write_bytes(raw[:-3])
    with pytest.raises(GraphFormatError, match="payload"):
        read_nfeat(p)
    p.write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(GraphFormatError, match="magic"):
        read_nfeat(p)


def test_nfeat_row_range(tmp_path):
    x = np.arange(12, dtype=np.float32).reshape(4, 3)
    write_nfeat(tmp_path / "x.nfeat", x)
    np.testing.assert_array_equal(read_nfeat(tmp_path / "x.nfeat", slice(1, 3)), x[1:3])
    save_features(FeatureMatrix(0, x), tmp_path / "y.nfeat")
    assert read_nfeat(tmp_path / "y.nfeat").tobytes() == x.tobytes()


def test_multilabel_parse(tmp_path, toy_graph):
    (tmp_path / "labels.tsv").write_text("0: 1,3\n1\t2\n")
    (tmp_path / "train.txt").write_text("0\n")
    (tmp_path / "test.txt").write_text("1\n")
    ls = load_labels(toy_graph, tmp_path / "labels.tsv", "paper")
    assert ls.multilabel
    assert ls.label_sets([0, 1]) == [{1, 3}, {2}]


def test_labels_split_errors(tmp_path, toy_graph):
    (tmp_path / "labels.tsv").write_text("0\t1\n1\t0\n")
    (tmp_path / "train.txt").write_text("0\n")
    (tmp_path / "valid.txt").write_text("0\n")
    with pytest.raises(GraphFormatError, match="overlap"):
        load_labels(toy_graph, tmp_path / "labels.tsv", "paper")
    (tmp_path / "valid.txt").write_text("2\n")
    with pytest.raises(GraphFormatError, match="unlabeled"):
        load_labels(toy_graph, tmp_path / "labels.tsv", "paper")
    (tmp_path / "valid.txt").write_text("7\n")
    with pytest.raises(GraphFormatError, match="unknown node id"):
        load_labels(toy_graph, tmp_path / "labels.tsv", "paper")
    (tmp_path / "valid.txt").write_text("1\n")
    with pytest.raises(GraphFormatError, match="num_classes"):
        load_labels(toy_graph, tmp_path / "labels.tsv", "paper", num_classes=1)


def test_drop_relations(mag):
    g = mag.with_relations_dropped(["cites"])
    assert g.num_edges(g.relation_id("cites")) == 0
    assert g.num_edges(g.relation_id("writes")) == mag.num_edges(mag.relation_id("writes"))
    with pytest.raises(KeyError):
        mag.with_relations_dropped(["nope"])


def test_bad_node_type_declarations():
    with pytest.raises(GraphFormatError):
        HeteroGraph.from_edges([("a", 1), ("a", 2)], [])
    with pytest.raises(GraphFormatError):
        HeteroGraph.from_edges([("a", 0)], [])
