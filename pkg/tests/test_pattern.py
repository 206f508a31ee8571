"""Pattern extraction, aggregation, edge filtering and exports."""

import numpy as np
import pytest

from glam.assignment import SoftAssignment
from glam.attention import ForwardTrace, GlamParameters, NetworkConfig
from glam.pattern import (LearntPattern, aggregate_category,
                          extract_sample_adjacency, export_heatmap,
                          filter_top_edges, pattern_recovery_score)
from glam.synthdata import make_template


def trace_with_heads(heads_a, heads_b=None):
    return ForwardTrace(
        assignment=SoftAssignment(scores=np.eye(len(heads_a[0]))),
        self_attn=[{"A": heads_a, "B": heads_b or heads_a}],
    )


class TestExtractSampleAdjacency:
    def test_single_head_passthrough(self):
        m = np.array([[0.7, 0.3], [0.4, 0.6]])
        trace = trace_with_heads([m])
        np.testing.assert_array_equal(extract_sample_adjacency(trace), m)

    def test_two_head_average(self):
        trace = trace_with_heads([np.eye(2), np.array([[0.0, 1.0], [1.0, 0.0]])])
        np.testing.assert_array_equal(extract_sample_adjacency(trace),
                                      np.full((2, 2), 0.5))

    def test_rows_sum_to_one_on_random_traces(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            rows = rng.uniform(0.1, 1.0, size=(2, 4, 4))
            heads = [r / r.sum(axis=1, keepdims=True) for r in rows]
            out = extract_sample_adjacency(trace_with_heads(heads), "B")
            np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)

    def test_missing_self_attention_rejected(self):
        trace = ForwardTrace(assignment=SoftAssignment(scores=np.eye(2)))
        with pytest.raises(ValueError, match="self-attention"):
            extract_sample_adjacency(trace)

    def test_last_layer_is_used(self):
        first = [np.eye(2)]
        last = [np.full((2, 2), 0.5)]
        trace = ForwardTrace(
            assignment=SoftAssignment(scores=np.eye(2)),
            self_attn=[{"A": first, "B": first}, {"A": last, "B": last}],
        )
        np.testing.assert_array_equal(extract_sample_adjacency(trace),
                                      last[0])


class TestAggregateCategory:
    def test_single_full_sample(self):
        m = np.arange(9.0).reshape(3, 3)
        pattern = aggregate_category([(m, [0, 1, 2])], ["a", "b", "c"])
        np.testing.assert_array_equal(pattern.adjacency, m)
        np.testing.assert_array_equal(pattern.counts, np.ones((3, 3), int))

    def test_disjoint_subsets_form_blocks(self):
        m1 = np.full((2, 2), 2.0)
        m2 = np.full((2, 2), 4.0)
        pattern = aggregate_category(
            [(m1, [0, 1]), (m2, [2, 3])], ["a", "b", "c", "d"])
        np.testing.assert_array_equal(pattern.adjacency[:2, :2], m1)
        np.testing.assert_array_equal(pattern.adjacency[2:, 2:], m2)
        assert pattern.counts[0, 1] == 1 and pattern.counts[2, 3] == 1
        assert pattern.counts[0, 2] == 0 and pattern.adjacency[0, 2] == 0.0

    def test_order_invariance(self):
        rng = np.random.default_rng(1)
        entries = [(rng.random((2, 2)), [0, 1]),
                   (rng.random((2, 2)), [1, 2]),
                   (rng.random((3, 3)), [0, 1, 2])]
        p1 = aggregate_category(entries, ["a", "b", "c"])
        p2 = aggregate_category(entries[::-1], ["a", "b", "c"])
        np.testing.assert_allclose(p1.adjacency, p2.adjacency, atol=1e-15)
        np.testing.assert_array_equal(p1.counts, p2.counts)

    def test_overlapping_cells_averaged(self):
        p = aggregate_category(
            [(np.array([[0.0, 1.0], [1.0, 0.0]]), [0, 1]),
             (np.array([[0.0, 3.0], [3.0, 0.0]]), [0, 1])], ["a", "b"])
        assert p.adjacency[0, 1] == 2.0
        assert p.counts[0, 1] == 2

    def test_unknown_index_rejected(self):
        with pytest.raises(ValueError, match="universe"):
            aggregate_category([(np.ones((2, 2)), [0, 5])], ["a", "b"])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="index map"):
            aggregate_category([(np.ones((2, 2)), [0, 1, 2])], ["a", "b", "c"])


def pattern_from(adj, counts=None, labels=None):
    adj = np.asarray(adj, dtype=float)
    n = adj.shape[0]
    if counts is None:
        counts = np.ones((n, n), dtype=int)
        np.fill_diagonal(counts, 0)
    if labels is None:
        labels = [f"k{i}" for i in range(n)]
    return LearntPattern(adjacency=adj, counts=counts, labels=labels)


class TestFilterTopEdges:
    def test_keep_all_is_identity(self):
        rng = np.random.default_rng(2)
        adj = rng.random((4, 4))
        pattern = pattern_from(adj)
        out = filter_top_edges(pattern, 1.0)
        np.testing.assert_array_equal(out.adjacency, adj)

    def test_rank_arithmetic(self):
        # a 5-clique has 10 edges; weights 1..10, keep 0.7 -> 4..10 survive
        n = 5
        adj = np.zeros((n, n))
        w = 1.0
        for i in range(n):
            for j in range(i + 1, n):
                adj[i, j] = adj[j, i] = w
                w += 1.0
        out = filter_top_edges(pattern_from(adj), 0.7)
        kept = sorted(out.adjacency[np.triu_indices(n, 1)])
        assert kept[:3] == [0.0, 0.0, 0.0]
        assert kept[3:] == [4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0]

    def test_ties_at_cut_all_kept(self):
        n = 4  # 6 edges
        adj = np.zeros((n, n))
        weights = [5.0, 5.0, 5.0, 5.0, 1.0, 1.0]
        k = 0
        for i in range(n):
            for j in range(i + 1, n):
                adj[i, j] = adj[j, i] = weights[k]
                k += 1
        # keep 0.5 of 6 edges = 3, but four weigh 5.0: all four stay
        out = filter_top_edges(pattern_from(adj), 0.5)
        assert (out.adjacency == 5.0).sum() == 8  # both directions
        assert (out.adjacency == 1.0).sum() == 0

    def test_never_drops_stronger_edge_for_weaker(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            adj = rng.random((5, 5))
            np.fill_diagonal(adj, 0.0)
            out = filter_top_edges(pattern_from(adj), 0.6)
            sym_in = np.maximum(adj, adj.T)
            sym_out = np.maximum(out.adjacency, out.adjacency.T)
            iu = np.triu_indices(5, 1)
            kept = sym_out[iu] > 0
            dropped = ~kept
            if kept.any() and dropped.any():
                assert sym_in[iu][kept].min() >= sym_in[iu][dropped].max()

    def test_asymmetric_values_preserved_on_kept_edges(self):
        adj = np.array([[0.0, 0.9], [0.2, 0.0]])
        out = filter_top_edges(pattern_from(adj), 1.0)
        assert out.adjacency[0, 1] == 0.9 and out.adjacency[1, 0] == 0.2

    def test_fraction_bounds(self):
        with pytest.raises(ValueError):
            filter_top_edges(pattern_from(np.zeros((2, 2))), 0.0)


class TestExportHeatmap:
    def test_csv_round_trip(self, tmp_path):
        adj = np.array([[0.0, 0.125], [0.6875, 0.0]])
        pattern = pattern_from(adj, labels=["left", "right"])
        csv_path, _ = export_heatmap(pattern, tmp_path / "p")
        lines = open(csv_path).read().splitlines()
        assert lines[0] == "left,right"
        parsed = np.array([[float(v) for v in line.split(",")]
                           for line in lines[1:]])
        np.testing.assert_array_equal(parsed, adj)

    def test_intensity_anchors(self, tmp_path):
        adj = np.array([[0.0, 1.0], [0.5, 0.0]])
        _, pgm_path = export_heatmap(pattern_from(adj), tmp_path / "p")
        lines = open(pgm_path).read().split()
        assert lines[0] == "P2" and lines[3] == "255"
        pixels = np.array([int(v) for v in lines[4:]]).reshape(2, 2)
        assert pixels[0, 1] == 0      # max cell darkest
        assert pixels[0, 0] == 255    # zero cell lightest
        assert pixels[1, 0] == 128

    def test_constant_matrix_is_mid_gray(self, tmp_path):
        _, pgm_path = export_heatmap(pattern_from(np.full((2, 2), 0.4)),
                                     tmp_path / "p")
        pixels = [int(v) for v in open(pgm_path).read().split()[4:]]
        assert pixels == [128, 128, 128, 128]


class TestPatternRecoveryScore:
    def test_perfect_recovery(self):
        t = make_template(8, 8, seed=0)
        pattern = pattern_from(t.planted_adjacency)
        assert pattern_recovery_score(pattern, t) == pytest.approx(1.0)

    def test_anti_recovery(self):
        t = make_template(8, 8, seed=1)
        inverted = 1.0 - t.planted_adjacency
        np.fill_diagonal(inverted, 0.0)
        pattern = pattern_from(inverted)
        assert pattern_recovery_score(pattern, t) == pytest.approx(-1.0)

    def test_random_patterns_center_on_zero(self):
        t = make_template(10, 8, seed=2)
        rng = np.random.default_rng(3)
        scores = []
        for _ in range(1000):
            adj = rng.random((10, 10))
            np.fill_diagonal(adj, 0.0)
            scores.append(pattern_recovery_score(pattern_from(adj), t))
        assert abs(np.mean(scores)) < 0.1

    def test_zero_variance_rejected(self):
        t = make_template(5, 8, seed=4)
        with pytest.raises(ValueError, match="variance"):
            pattern_recovery_score(pattern_from(np.zeros((5, 5))), t)
