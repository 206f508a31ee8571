"""Category-level graph patterns from trained models.

The last layer's self-attention maps, averaged over heads, act as a learnt
weighted adjacency per image. Per-sample matrices are expanded to the full
keypoint universe (dummy rows/columns for absent keypoints), averaged
cellwise over the samples that observed each cell, optionally pruned to
the strongest edges, and exported as CSV plus a portable graymap.
"""

import math
from dataclasses import dataclass

import numpy as np

from .assignment import pad_to_common_size
from .attention import forward


@dataclass
class LearntPattern:
    """Aggregated adjacency over a category's keypoint universe.

    counts[i, j] is the number of samples contributing to cell (i, j);
    cells never observed hold value 0.
    """

    adjacency: np.ndarray
    counts: np.ndarray
    labels: list


def extract_sample_adjacency(trace, image="A"):
    """Head-averaged last-layer self-attention of one image; row-stochastic."""
    if not trace.self_attn:
        raise ValueError("trace holds no self-attention (network run without it)")
    heads = trace.self_attn[-1][image]
    return np.mean(heads, axis=0)


def aggregate_category(per_sample, labels):
    """Average per-sample adjacencies scattered into the label universe.

    `per_sample` is a list of (matrix, index map) pairs, the map giving the
    universe index of every matrix row/column.
    """
    n = len(labels)
    total = np.zeros((n, n))
    counts = np.zeros((n, n), dtype=int)
    for matrix, idx in per_sample:
        matrix = np.asarray(matrix)
        idx = np.asarray(idx, dtype=int)
        if matrix.shape != (len(idx), len(idx)):
            raise ValueError(
                f"adjacency shape {matrix.shape} does not match index map "
                f"of length {len(idx)}")
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise ValueError(f"index map refers outside the {n}-label universe")
        total[np.ix_(idx, idx)] += matrix
        counts[np.ix_(idx, idx)] += 1
    adjacency = np.divide(total, counts, out=np.zeros_like(total),
                          where=counts > 0)
    return LearntPattern(adjacency=adjacency, counts=counts, labels=list(labels))


def filter_top_edges(pattern, keep_fraction=0.7):
    """Keep the strongest `keep_fraction` of undirected edges, zero the rest.

    Candidate edges are observed off-diagonal cells ranked by the max of
    their two directed weights; ties at the cut weight are all kept, and
    retained cells keep their original (possibly asymmetric) values.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError("keep_fraction must be in (0, 1]")
    n = pattern.adjacency.shape[0]
    candidates = []
    for i in range(n):
        for j in range(i + 1, n):
            if pattern.counts[i, j] > 0 or pattern.counts[j, i] > 0:
                candidates.append(
                    (max(pattern.adjacency[i, j], pattern.adjacency[j, i]), i, j))
    if not candidates:
        return LearntPattern(pattern.adjacency.copy(), pattern.counts.copy(),
                             list(pattern.labels))
    keep = math.ceil(keep_fraction * len(candidates))
    weights = sorted((w for w, _, _ in candidates), reverse=True)
    threshold = weights[keep - 1]
    adjacency = pattern.adjacency.copy()
    for w, i, j in candidates:
        if w < threshold:
            adjacency[i, j] = 0.0
            adjacency[j, i] = 0.0
    return LearntPattern(adjacency=adjacency, counts=pattern.counts.copy(),
                         labels=list(pattern.labels))


def export_heatmap(pattern, path_stem):
    """Write `<stem>.csv` (labels header, full-precision rows) and
    `<stem>.pgm` (P2 graymap, darkest pixel = largest cell).

    Returns the two paths. A constant matrix maps to uniform mid-gray.
    """
    csv_path = f"{path_stem}.csv"
    pgm_path = f"{path_stem}.pgm"
    n = pattern.adjacency.shape[0]
    with open(csv_path, "w") as fh:
        fh.write(",".join(pattern.labels) + "\n")
        for row in pattern.adjacency:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    vmax = float(pattern.adjacency.max())
    vmin = float(pattern.adjacency.min())
    if vmax - vmin < 1e-15:
        intensities = np.full((n, n), 128, dtype=int)
    else:
        intensities = np.rint(255.0 * (1.0 - pattern.adjacency / vmax)).astype(int)
        intensities = np.clip(intensities, 0, 255)
    with open(pgm_path, "w") as fh:
        fh.write(f"P2\n{n} {n}\n255\n")
        for row in intensities:
            fh.write(" ".join(str(int(v)) for v in row) + "\n")
    return csv_path, pgm_path


def pattern_recovery_score(pattern, template):
    """Pearson correlation between the symmetrized learnt pattern and the
    planted adjacency, over off-diagonal cells."""
    if pattern.adjacency.shape != template.planted_adjacency.shape:
        raise ValueError("pattern and template sizes differ")
    sym = np.maximum(pattern.adjacency, pattern.adjacency.T)
    iu = np.triu_indices(sym.shape[0], k=1)
    x = sym[iu]
    y = template.planted_adjacency[iu]
    if x.std() == 0.0 or y.std() == 0.0:
        raise ValueError("recovery score undefined for zero-variance input")
    return float(np.corrcoef(x, y)[0, 1])


def collect_patterns(params, config, samples, labels, max_pairs=None, rng=None):
    """Run forwards over samples of one category and aggregate both images'
    adjacencies into a LearntPattern.

    When `max_pairs` is given, that many samples are chosen (at random when
    an rng is supplied, else the first ones). Padded dummy rows added for
    the forward pass are dropped before aggregation.
    """
    chosen = list(samples)
    if max_pairs is not None and len(chosen) > max_pairs:
        if rng is not None:
            picks = rng.choice(len(chosen), size=max_pairs, replace=False)
            chosen = [chosen[int(i)] for i in picks]
        else:
            chosen = chosen[:max_pairs]
    per_sample = []
    for sample in chosen:
        a, b, _, _ = pad_to_common_size(sample.set_a, sample.set_b,
                                        sample.gt_pairs)
        trace = forward(params, config, a, b)
        for image, real, idx in (("A", sample.set_a.size, sample.index_map_a),
                                 ("B", sample.set_b.size, sample.index_map_b)):
            adj = extract_sample_adjacency(trace, image)[:real, :real]
            per_sample.append((adj, idx))
    return aggregate_category(per_sample, labels)
