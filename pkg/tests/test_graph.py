import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gfl_recon.graph import (
    Graph,
    GraphFormatError,
    generate_sbm,
    load_graph,
    make_split,
    normalized_adjacency,
    partition_from_sets,
    partition_graph,
    sample_non_edges,
    write_graph,
)

from conftest import random_graph


def _write(tmp_path, nodes_text, edges_text):
    n, e = tmp_path / "nodes.txt", tmp_path / "edges.txt"
    n.write_text(nodes_text)
    e.write_text(edges_text)
    return n, e


NODES3 = "#nodes N=3 L=2 C=2\n0\t0\t0.5,1.0\n1\t1\t-1.0,2.0\n2\t0\t0.0,0.0\n"


class TestLoadGraph:
    def test_basic(self, tmp_path):
        g = load_graph(*_write(tmp_path, NODES3, "0\t1\n"))
        assert (g.num_nodes, g.num_edges, g.feature_dim) == (3, 1, 2)
        assert g.labels.tolist() == [0, 1, 0]

    def test_self_loop_rejected(self, tmp_path):
        with pytest.raises(GraphFormatError, match="self-loop") as info:
            load_graph(*_write(tmp_path, NODES3, "0\t1\n0\t0\n"))
        assert info.value.lineno == 2

    def test_reverse_duplicate_collapses(self, tmp_path):
        g = load_graph(*_write(tmp_path, NODES3, "# comment\n0\t1\n1\t0\n"))
        assert g.num_edges == 1
        assert g.edges.tolist() == [[0, 1]]

    def test_unknown_node_in_edge(self, tmp_path):
        with pytest.raises(GraphFormatError, match="unknown node"):
            load_graph(*_write(tmp_path, NODES3, "0\t7\n"))

    def test_noncontiguous_ids(self, tmp_path):
        text = "#nodes N=3 L=2 C=2\n0\t0\t0.5,1.0\n1\t1\t-1.0,2.0\n"
        with pytest.raises(GraphFormatError, match="contiguous"):
            load_graph(*_write(tmp_path, text, ""))

    def test_label_out_of_range(self, tmp_path):
        text = NODES3.replace("1\t1\t", "1\t5\t")
        with pytest.raises(GraphFormatError, match="label") as info:
            load_graph(*_write(tmp_path, text, ""))
        assert info.value.lineno == 3

    def test_non_finite_feature(self, tmp_path):
        text = NODES3.replace("0.0,0.0", "nan,0.0")
        with pytest.raises(GraphFormatError, match="non-finite"):
            load_graph(*_write(tmp_path, text, ""))

    def test_malformed_line_reports_location(self, tmp_path):
        n, e = _write(tmp_path, NODES3, "0\t1\n0 1 2\n")
        with pytest.raises(GraphFormatError) as info:
            load_graph(n, e)
        assert str(e) in str(info.value) and ":2:" in str(info.value)

    def test_missing_header(self, tmp_path):
        with pytest.raises(GraphFormatError, match="header"):
            load_graph(*_write(tmp_path, "0\t0\t1.0\n", ""))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_graph(tmp_path / "a", tmp_path / "b")


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), blocks=st.integers(1, 4), dim=st.integers(1, 6))
def test_write_load_round_trip_bit_exact(tmp_path_factory, seed, blocks, dim):
    g = generate_sbm(blocks, 6, 0.5, 0.1, dim, 1.3, seed)
    d = tmp_path_factory.mktemp("rt")
    write_graph(g, d / "n.txt", d / "e.txt")
    h = load_graph(d / "n.txt", d / "e.txt")
    assert h == g
    assert h.features.tobytes() == g.features.tobytes()


class TestGraphInvariants:
    def test_rejects_self_loop(self):
        with pytest.raises(ValueError):
            Graph(2, [[1, 1]], np.zeros((2, 1)), [0, 0], 1)

    def test_rejects_bad_label(self):
        with pytest.raises(ValueError):
            Graph(2, [], np.zeros((2, 1)), [0, 2], 2)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            Graph(1, [], np.array([[np.inf]]), [0], 1)

    def test_arrays_read_only(self, small_graph):
        with pytest.raises(ValueError):
            small_graph.features[0, 0] = 1.0


class TestGenerateSBM:
    def test_forced_cliques(self):
        g = generate_sbm(2, 5, 1.0, 0.0, 3, 1.0, seed=0)
        assert g.num_edges == 20
        assert all(g.labels[u] == g.labels[v] for u, v in g.edges)

    def test_intra_edge_count_within_binomial_band(self):
        g = generate_sbm(2, 50, 0.2, 0.02, 8, 1.0, seed=7)
        intra = int((g.labels[g.edges[:, 0]] == g.labels[g.edges[:, 1]]).sum())
        trials = 2 * (50 * 49 // 2)
        mean, sd = trials * 0.2, np.sqrt(trials * 0.2 * 0.8)
        assert mean == pytest.approx(490.0)
        assert abs(intra - mean) <= 5 * sd

    def test_same_seed_identical(self):
        assert generate_sbm(3, 10, 0.3, 0.05, 4, 1.0, 11) == generate_sbm(3, 10, 0.3, 0.05, 4, 1.0, 11)

    def test_block_mean_offset_magnitude(self):
        g = generate_sbm(4, 400, 0.0, 0.0, 8, 1.0, seed=1)
        for b in range(4):
            m = g.features[g.labels == b].mean(axis=0)
            assert np.allclose(np.abs(m), 1.0, atol=0.2)

    def test_bad_probabilities(self):
        with pytest.raises(ValueError):
            generate_sbm(2, 5, 0.1, 0.5, 2, 1.0, 0)


class TestPartition:
    def test_round_robin_sizes(self):
        g = random_graph(10, seed=1)
        part = partition_graph(g, 2, 0.0, 0, seed=1)
        assert part.client_sizes == [5, 5]

    def test_path_graph_lost_edge(self):
        g = Graph(4, [[0, 1], [1, 2], [2, 3]], np.zeros((4, 1)), [0, 0, 0, 0], 1)
        part = partition_from_sets(g, [[0, 1], [2, 3]])
        assert part.client_subgraphs[0].edges.tolist() == [[0, 1]]
        assert part.client_subgraphs[1].edges.tolist() == [[0, 1]]
        assert part.lost_edges.tolist() == [[1, 2]]

    def test_overlap_counts(self):
        g = random_graph(10, seed=2)
        part = partition_graph(g, 2, 0.5, 0, seed=3)
        assert part.client_sizes == [8, 8]  # 5 + round_half_up(2.5)

    def test_k_larger_than_n(self):
        with pytest.raises(ValueError):
            partition_graph(random_graph(3), 4)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 1000), k=st.integers(2, 6), n=st.integers(6, 40))
    def test_edges_accounted_exactly(self, seed, k, n):
        g = random_graph(n, seed=seed, p=0.3)
        part = partition_graph(g, k, 0.0, 0, seed)
        assert sum(part.client_sizes) == n
        covered = np.zeros(n, dtype=int)
        for nodes in part.client_nodes:
            covered[nodes] += 1
        assert (covered == 1).all()
        inside = sum(s.num_edges for s in part.client_subgraphs)
        assert inside + len(part.lost_edges) == g.num_edges
        for nodes, sub in zip(part.client_nodes, part.client_subgraphs):
            for u, v in sub.edges:
                assert g.has_edge(nodes[u], nodes[v])

    def test_pure_function_of_seed(self):
        g = random_graph(30, seed=4)
        a, b = partition_graph(g, 3, 0.2, 1, 9), partition_graph(g, 3, 0.2, 1, 9)
        assert all(np.array_equal(x, y) for x, y in zip(a.client_nodes, b.client_nodes))


class TestSplit:
    def test_sizes(self):
        g = Graph(100, [], np.zeros((100, 1)), np.arange(100) % 4, 4)
        s = make_split(g, 0.6, 0.2, seed=0)
        assert (len(s.train), len(s.val), len(s.test)) == (60, 20, 20)
        assert not (set(s.train) & set(s.val)) and not (set(s.val) & set(s.test))

    def test_stratified(self):
        g = Graph(100, [], np.zeros((100, 1)), np.arange(100) % 4, 4)
        s = make_split(g, 0.6, 0.2, seed=0)
        assert np.bincount(g.labels[s.train]).tolist() == [15] * 4

    def test_deterministic(self):
        g = random_graph(30)
        a, b = make_split(g, 0.5, 0.2, 5), make_split(g, 0.5, 0.2, 5)
        assert np.array_equal(a.train, b.train) and np.array_equal(a.test, b.test)

    def test_bad_fractions(self):
        with pytest.raises(ValueError):
            make_split(random_graph(30), 0.9, 0.2, 0)

    def test_tiny_class(self):
        g = Graph(5, [], np.zeros((5, 1)), [0, 0, 0, 1, 1], 2)
        with pytest.raises(ValueError, match="fewer than 3"):
            make_split(g, 0.4, 0.2, 0)


class TestNormalizedAdjacency:
    def test_single_node(self):
        g = Graph(1, [], np.zeros((1, 1)), [0], 1)
        assert normalized_adjacency(g).tolist() == [[1.0]]

    def test_single_edge(self):
        g = Graph(2, [[0, 1]], np.zeros((2, 1)), [0, 0], 1)
        assert np.allclose(normalized_adjacency(g), 0.5, atol=1e-15)

    def test_isolated_node_identity_row(self):
        g = Graph(3, [[0, 1]], np.zeros((3, 1)), [0, 0, 0], 1)
        assert normalized_adjacency(g)[2].tolist() == [0.0, 0.0, 1.0]

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 1000), n=st.integers(1, 25))
    def test_symmetric_rows_bounded(self, seed, n):
        a = normalized_adjacency(random_graph(n, seed=seed, p=0.3))
        assert np.abs(a - a.T).max() <= 1e-12
        rows = a.sum(axis=1)
        # D^-1/2 (A+I) D^-1/2 row sums can exceed 1 when neighbours have lower degree;
        # the bounded quantity is the random-walk-normalised row sum.
        assert (rows > 0).all()
        d = np.sqrt((random_graph(n, seed=seed, p=0.3).adjacency() + np.eye(n)).sum(axis=1))
        assert np.allclose((a * d[None, :] / d[:, None]).sum(axis=1), 1.0)

    def test_row_sum_can_exceed_one(self):
        # star graph: hub row = 1/4 + 3/sqrt(8) > 1
        g = Graph(4, [[0, 1], [0, 2], [0, 3]], np.zeros((4, 1)), [0] * 4, 1)
        assert normalized_adjacency(g).sum(axis=1)[0] == pytest.approx(0.25 + 3 / np.sqrt(8))


class TestSampleNonEdges:
    def test_no_edges_and_unique(self):
        g = random_graph(15, seed=3, p=0.3)
        s = sample_non_edges(g, 30, np.random.default_rng(0))
        assert len({tuple(p) for p in s.tolist()}) == 30
        assert not any(g.has_edge(u, v) for u, v in s)
        assert (s[:, 0] < s[:, 1]).all()

    def test_too_many(self):
        g = Graph(3, [[0, 1]], np.zeros((3, 1)), [0, 0, 0], 1)
        with pytest.raises(ValueError):
            sample_non_edges(g, 3, np.random.default_rng(0))
