"""Assignment-space machinery: Sinkhorn normalization, Hungarian decoding,
dummy-keypoint padding, a quadratic-consistency diagnostic and accuracy.

Sinkhorn runs through the diffcore tape so gradients flow into the
attention stack; a plain-array wrapper and a run-to-convergence oracle are
provided for tests and diagnostics.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import diffcore as dc
from .diffcore import Tape, Tensor


@dataclass
class SoftAssignment:
    """Soft match scores between two keypoint sets, entries in (0, 1].

    `mask`, when present, is a boolean matrix with True on cells whose row
    or column belongs to a padded dummy keypoint.
    """

    scores: np.ndarray
    mask: Optional[np.ndarray] = None


@dataclass
class Permutation:
    """A bijective row-to-column assignment."""

    assign: list

    def __post_init__(self):
        n = len(self.assign)
        if sorted(self.assign) != list(range(n)):
            raise ValueError("assignment is not a bijection")

    def as_matrix(self):
        m = np.zeros((len(self.assign), len(self.assign)))
        m[np.arange(len(self.assign)), self.assign] = 1.0
        return m


def sinkhorn_normalize(tape, m, iters):
    """Alternate row then column normalization `iters` times, then one more
    row normalization so the result is exactly row-stochastic.

    `m` is a strictly positive square Tensor; the output stays on the tape.
    """
    if iters < 1:
        raise ValueError("sinkhorn_normalize needs iters >= 1")
    if np.any(m.values <= 0.0):
        raise ValueError("sinkhorn_normalize requires strictly positive entries")
    x = m
    for _ in range(iters):
        x = dc.row_normalize(tape, x)
        x = dc.transpose(tape, dc.row_normalize(tape, dc.transpose(tape, x)))
    return dc.row_normalize(tape, x)


def sinkhorn_array(m, iters):
    """Array-in, array-out wrapper around sinkhorn_normalize."""
    return sinkhorn_normalize(Tape(), Tensor(m), iters).values


def sinkhorn_converged(m, tol=1e-12, max_iters=100_000):
    """Iterate row/column normalization until both marginals deviate from 1
    by less than `tol`. Test oracle; plain array arithmetic.
    """
    x = np.array(m, dtype=np.float64)
    if np.any(x <= 0.0):
        raise ValueError("sinkhorn_converged requires strictly positive entries")
    for _ in range(max_iters):
        x = x / x.sum(axis=1, keepdims=True)
        x = x / x.sum(axis=0, keepdims=True)
        if (np.abs(x.sum(axis=1) - 1.0).max() < tol
                and np.abs(x.sum(axis=0) - 1.0).max() < tol):
            return x
    raise RuntimeError(f"sinkhorn did not converge within {max_iters} iterations")


def hungarian(scores):
    """Maximum-score bijective assignment via shortest augmenting paths.

    Deterministic: rows are matched in index order and equal-cost columns
    resolve to the lowest index, so an all-equal matrix yields identity.
    """
    a = np.asarray(scores, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"hungarian expects a square matrix, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("hungarian requires finite scores")
    n = a.shape[0]
    cost = a.max() - a  # minimization form

    # Potentials over rows/columns with a virtual column 0.
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=int)  # match[j] = row occupying column j
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        way = np.zeros(n + 1, dtype=int)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            free = ~used[1:]
            cur = cost[i0 - 1, :] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            free_idx = np.flatnonzero(free) + 1
            j1 = free_idx[np.argmin(minv[free_idx])]
            delta = minv[j1]
            u[match[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    assign = [0] * n
    for j in range(1, n + 1):
        assign[match[j] - 1] = j - 1
    return Permutation(assign)


def pad_to_common_size(a, b, gt_pairs=None):
    """Pad the smaller keypoint set with dummy rows so both have equal size.

    Dummy rows carry zero features and sit at the set's position centroid.
    Returns (a, b, gt_pairs, mask) where mask is None when no padding was
    needed, else a boolean matrix with True on dummy rows/columns.
    """
    n_a, n_b = a.features.shape[0], b.features.shape[0]
    if n_a == n_b:
        return a, b, gt_pairs, None
    n = max(n_a, n_b)
    a2 = _pad_set(a, n)
    b2 = _pad_set(b, n)
    mask = np.zeros((n, n), dtype=bool)
    mask[n_a:, :] = True
    mask[:, n_b:] = True
    return a2, b2, gt_pairs, mask


def _pad_set(s, n):
    from .attention import PointFeatureSet  # local import to avoid a cycle

    k = s.features.shape[0]
    if k == n:
        return s
    extra = n - k
    feats = np.vstack([s.features, np.zeros((extra, s.features.shape[1]))])
    centroid = s.positions.mean(axis=0)
    pos = np.vstack([s.positions, np.tile(centroid, (extra, 1))])
    labels = None
    if s.labels is not None:
        labels = list(s.labels) + [f"_pad{i}" for i in range(extra)]
    return PointFeatureSet(features=feats, positions=pos, labels=labels)


def gt_matrix(gt_pairs, n):
    """Binary n x n matrix with ones at ground-truth (row, col) matches."""
    m = np.zeros((n, n))
    for i, j in gt_pairs:
        m[i, j] = 1.0
    return m


def qap_score(x, unary, pairwise=None):
    """Global consistency of a discrete assignment: the sum of matched unary
    similarities plus, when given, pairwise affinities over all ordered
    keypoint pairs (including i == j). Diagnostic only.
    """
    unary = np.asarray(unary, dtype=np.float64)
    n = len(x.assign)
    if unary.shape != (n, n):
        raise ValueError(f"unary shape {unary.shape} does not match n={n}")
    h = float(unary[np.arange(n), x.assign].sum())
    if pairwise is not None:
        for i in range(n):
            for j in range(n):
                h += float(pairwise(i, x.assign[i], j, x.assign[j]))
    return h


def matching_accuracy(pred, gt, mask=None):
    """Fraction of non-dummy ground-truth matches reproduced by `pred`.

    `gt` is a binary matrix; cells marked True in `mask` are ignored.
    """
    gt = np.asarray(gt)
    rows, cols = np.nonzero(gt)
    total = 0
    correct = 0
    for i, j in zip(rows, cols):
        if mask is not None and mask[i, j]:
            continue
        total += 1
        if pred.assign[i] == j:
            correct += 1
    if total == 0:
        raise ValueError("matching_accuracy: no non-dummy ground-truth matches")
    return correct / total
