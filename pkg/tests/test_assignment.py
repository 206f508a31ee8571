"""Sinkhorn, Hungarian, padding, QAP diagnostic and accuracy."""

import itertools

import numpy as np
import pytest

from glam.assignment import (Permutation, gt_matrix, hungarian,
                             matching_accuracy, pad_to_common_size, qap_score,
                             sinkhorn_array, sinkhorn_converged)
from glam.attention import PointFeatureSet


def brute_force_best(scores):
    n = scores.shape[0]
    best = -np.inf
    for perm in itertools.permutations(range(n)):
        total = scores[np.arange(n), perm].sum()
        if total > best:
            best = total
    return best


class TestSinkhorn:
    def test_uniform_fixed_point(self):
        m = np.full((4, 4), 0.25)
        np.testing.assert_allclose(sinkhorn_array(m, 5), m, atol=1e-15)

    def test_1x1_normalizes(self):
        np.testing.assert_allclose(sinkhorn_array([[0.3]], 1), [[1.0]])

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = rng.integers(2, 9)
            m = rng.uniform(0.1, 2.0, size=(n, n))
            out = sinkhorn_array(m, 5)
            np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)

    def test_convergence_oracle_distance_trend(self):
        # symmetric case: one alternation already reaches the limit
        m = np.array([[2.0, 1.0], [1.0, 2.0]])
        limit = sinkhorn_converged(m, tol=1e-12)
        np.testing.assert_allclose(limit.sum(axis=0), 1.0, atol=1e-9)
        assert np.abs(sinkhorn_array(m, 5) - limit).max() < 1e-12
        # asymmetric case: distance to the limit shrinks with iterations
        rng = np.random.default_rng(7)
        m = rng.uniform(0.1, 3.0, size=(4, 4))
        limit = sinkhorn_converged(m, tol=1e-14)
        dists = [np.abs(sinkhorn_array(m, k) - limit).max() for k in (1, 2, 5, 10)]
        assert all(d2 <= d1 + 1e-15 for d1, d2 in zip(dists, dists[1:]))
        assert dists[-1] < dists[0]

    def test_converged_doubly_stochastic(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            n = rng.integers(2, 9)
            out = sinkhorn_converged(rng.uniform(0.05, 3.0, size=(n, n)))
            np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)
            np.testing.assert_allclose(out.sum(axis=0), 1.0, atol=1e-9)

    def test_scale_invariance(self):
        rng = np.random.default_rng(2)
        m = rng.uniform(0.2, 1.5, size=(5, 5))
        base = sinkhorn_array(m, 5)
        for k in (1e-3, 7.0, 1e4):
            np.testing.assert_allclose(sinkhorn_array(k * m, 5), base, atol=1e-12)

    def test_nonpositive_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            sinkhorn_array(np.array([[1.0, 0.0], [1.0, 1.0]]), 3)


class TestHungarian:
    def test_identity_dominant(self):
        assert hungarian(np.eye(3)).assign == [0, 1, 2]

    def test_3x3_vs_exhaustive(self):
        scores = np.array([[1, 2, 3], [3, 1, 2], [2, 3, 1]], dtype=float)
        perm = hungarian(scores)
        total = scores[np.arange(3), perm.assign].sum()
        assert total == brute_force_best(scores)

    def test_all_equal_gives_identity(self):
        assert hungarian(np.ones((4, 4))).assign == [0, 1, 2, 3]

    def test_brute_force_agreement(self):
        rng = np.random.default_rng(3)
        for n in range(2, 7):
            for _ in range(60):
                scores = rng.normal(size=(n, n))
                perm = hungarian(scores)
                total = scores[np.arange(n), perm.assign].sum()
                assert total == pytest.approx(brute_force_best(scores), abs=1e-9)

    def test_row_column_shift_invariance(self):
        rng = np.random.default_rng(4)
        scores = rng.normal(size=(5, 5))
        base = hungarian(scores)
        base_total = scores[np.arange(5), base.assign].sum()
        shifted = scores.copy()
        shifted[2, :] += 3.7
        shifted[:, 4] -= 1.2
        perm = hungarian(shifted)
        assert perm.assign == base.assign
        total = shifted[np.arange(5), perm.assign].sum()
        assert total == pytest.approx(base_total + 3.7 - 1.2, abs=1e-9)

    def test_rejects_nonsquare_and_nonfinite(self):
        with pytest.raises(ValueError):
            hungarian(np.ones((2, 3)))
        with pytest.raises(ValueError):
            hungarian(np.array([[np.nan, 1.0], [1.0, 0.0]]))


class TestPermutation:
    def test_bijection_enforced(self):
        with pytest.raises(ValueError):
            Permutation([0, 0, 1])

    def test_matrix_form(self):
        m = Permutation([1, 0]).as_matrix()
        np.testing.assert_array_equal(m, [[0, 1], [1, 0]])


def _point_set(n, d, seed):
    rng = np.random.default_rng(seed)
    return PointFeatureSet(features=rng.normal(size=(n, d)),
                           positions=rng.random((n, 2)),
                           labels=[f"p{i}" for i in range(n)])


class TestPadding:
    def test_equal_sizes_untouched(self):
        a = _point_set(4, 3, 0)
        b = _point_set(4, 3, 1)
        gt = [(0, 1)]
        a2, b2, gt2, mask = pad_to_common_size(a, b, gt)
        assert a2 is a and b2 is b and gt2 == gt and mask is None

    def test_pads_smaller_side(self):
        a = _point_set(3, 3, 0)
        b = _point_set(5, 3, 1)
        a2, b2, _, mask = pad_to_common_size(a, b, [(0, 0)])
        assert a2.size == 5 and b2.size == 5
        assert mask.shape == (5, 5)
        assert mask[3:, :].all() and not mask[:3, :3].any()
        np.testing.assert_array_equal(a2.features[3:], 0.0)
        np.testing.assert_allclose(a2.positions[3], a.positions.mean(axis=0))
        assert a2.labels[3:] == ["_pad0", "_pad1"]

    def test_accuracy_matches_unpadded_evaluation(self):
        # same correct/incorrect pattern scored with and without dummies
        a = _point_set(3, 3, 2)
        b = _point_set(5, 3, 3)
        gt = [(0, 0), (1, 1), (2, 2)]
        _, _, _, mask = pad_to_common_size(a, b, gt)
        pred_padded = Permutation([0, 1, 3, 2, 4])  # 2 of 3 real matches
        acc = matching_accuracy(pred_padded, gt_matrix(gt, 5), mask)
        # unpadded equivalent: restrict to the 3 real keypoints of each side
        pred_small = Permutation([0, 1, 2])
        gt_small = gt_matrix([(0, 0), (1, 1)], 3)  # the two reproduced matches
        acc_small = matching_accuracy(pred_small, gt_small)
        assert acc == pytest.approx(2 / 3)
        assert acc_small == 1.0
        assert acc * 3 == pytest.approx(acc_small * 2)


class TestQapScore:
    def test_zero_pairwise_is_trace(self):
        unary = np.diag([1.0, 2.0, 3.0])
        perm = Permutation([0, 1, 2])
        assert qap_score(perm, unary) == 6.0

    def test_hand_summed_n2(self):
        unary = np.array([[1.0, 2.0], [3.0, 4.0]])
        d = {(0, 1, 0, 1): 0.5, (0, 1, 1, 0): 1.5,
             (1, 0, 0, 1): 2.5, (1, 0, 1, 0): 3.5}

        def pairwise(i, a, j, b):
            return d.get((i, a, j, b), 0.0)

        perm = Permutation([1, 0])
        # unary: 2 + 3; pairwise over all ordered pairs incl. i == j
        expected = 2.0 + 3.0 + 0.5 + 1.5 + 2.5 + 3.5
        assert qap_score(perm, unary, pairwise) == pytest.approx(expected)

    def test_all_zero(self):
        perm = Permutation([0, 1])
        assert qap_score(perm, np.zeros((2, 2)), lambda *a: 0.0) == 0.0

    def test_linear_case_maximized_by_hungarian(self):
        rng = np.random.default_rng(5)
        for n in range(2, 6):
            unary = rng.normal(size=(n, n))
            perm = hungarian(unary)
            best = max(qap_score(Permutation(list(p)), unary)
                       for p in itertools.permutations(range(n)))
            assert qap_score(perm, unary) == pytest.approx(best, abs=1e-9)


class TestMatchingAccuracy:
    def test_exact_match(self):
        gt = gt_matrix([(0, 1), (1, 0)], 2)
        assert matching_accuracy(Permutation([1, 0]), gt) == 1.0

    def test_total_disagreement(self):
        gt = gt_matrix([(0, 1), (1, 0)], 2)
        assert matching_accuracy(Permutation([0, 1]), gt) == 0.0

    def test_half(self):
        gt = gt_matrix([(0, 0), (1, 1)], 3)
        assert matching_accuracy(Permutation([0, 2, 1]), gt) == 0.5

    def test_empty_gt_rejected(self):
        with pytest.raises(ValueError):
            matching_accuracy(Permutation([0, 1]), np.zeros((2, 2)))
