"""Synthetic keypoint-correspondence data with planted relational structure.

Each category is a template: one prototype feature vector per keypoint
role, prototype positions in the unit square, and a planted adjacency
(symmetrized k-nearest-neighbor graph over the prototype positions) that
pattern-recovery experiments can test against. Samples are pairs of
independently perturbed copies: similarity-transformed positions,
Gaussian feature noise and per-keypoint dropout producing unequal sizes.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attention import PointFeatureSet

DATASET_FORMAT = "glam-dataset"
DATASET_VERSION = 1

_MARGIN_SCALE = 0.8
_KNN_EDGES = 3
_MAX_POINT_TRIES = 200
_MAX_PAIR_TRIES = 32


class DatasetParseError(ValueError):
    """Malformed dataset file; message carries the line number."""


@dataclass
class CategoryTemplate:
    name: str
    prototype_features: np.ndarray
    prototype_positions: np.ndarray
    planted_adjacency: np.ndarray
    labels: list

    @property
    def n_keypoints(self):
        return self.prototype_features.shape[0]

    @property
    def feat_dim(self):
        return self.prototype_features.shape[1]


@dataclass
class GenConfig:
    seed: int = 0
    feature_noise_sigma: float = 1.0
    position_noise_sigma: float = 0.01
    rotation_range: float = 0.3
    scale_range: tuple = (0.9, 1.1)
    translation_range: float = 0.2
    dropout_prob: float = 0.0
    pairs_per_category: int = 100

    def validate(self):
        if self.feature_noise_sigma < 0 or self.position_noise_sigma < 0:
            raise ValueError("noise sigmas must be >= 0")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ValueError("dropout_prob must be in [0, 1)")
        if self.pairs_per_category < 1:
            raise ValueError("pairs_per_category must be >= 1")

    def to_dict(self):
        return {
            "seed": self.seed,
            "feature_noise_sigma": self.feature_noise_sigma,
            "position_noise_sigma": self.position_noise_sigma,
            "rotation_range": self.rotation_range,
            "scale_range": list(self.scale_range),
            "translation_range": self.translation_range,
            "dropout_prob": self.dropout_prob,
            "pairs_per_category": self.pairs_per_category,
        }


@dataclass
class CorrespondenceSample:
    """A pair of perturbed keypoint sets with ground-truth matches.

    gt_pairs holds (row in set_a, row in set_b); index_map_* give the
    template keypoint index behind each row.
    """

    category: int
    set_a: PointFeatureSet
    set_b: PointFeatureSet
    gt_pairs: list
    index_map_a: list
    index_map_b: list


@dataclass
class SynthDataset:
    feat_dim: int
    templates: list
    samples: list = field(default_factory=list)


def make_template(n, d, seed, name=None):
    """Build a category template with margin-separated prototype features.

    Features live on the sphere of radius sqrt(d); candidates are redrawn
    until each is at least 0.8*sqrt(d) from all accepted ones.
    """
    if n < 2:
        raise ValueError("a template needs at least 2 keypoints")
    rng = np.random.default_rng(seed)
    margin = _MARGIN_SCALE * math.sqrt(d)
    feats = np.zeros((n, d))
    for i in range(n):
        for attempt in range(_MAX_POINT_TRIES):
            g = rng.normal(size=d)
            f = g / np.linalg.norm(g) * math.sqrt(d)
            if i == 0 or np.linalg.norm(feats[:i] - f, axis=1).min() >= margin:
                feats[i] = f
                break
        else:
            raise ValueError(
                f"could not place prototype {i} with margin {margin:.3f} "
                f"after {_MAX_POINT_TRIES} tries (n={n}, d={d})")
    positions = rng.random((n, 2))
    adjacency = _knn_adjacency(positions, min(_KNN_EDGES, n - 1))
    labels = [f"kp{i:02d}" for i in range(n)]
    return CategoryTemplate(
        name=name if name is not None else f"category{seed}",
        prototype_features=feats,
        prototype_positions=positions,
        planted_adjacency=adjacency,
        labels=labels,
    )


def _knn_adjacency(positions, k):
    n = positions.shape[0]
    d2 = ((positions[:, None, :] - positions[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d2, np.inf)
    adj = np.zeros((n, n))
    for i in range(n):
        for j in np.argsort(d2[i])[:k]:
            adj[i, j] = 1.0
    adj = np.maximum(adj, adj.T)
    np.fill_diagonal(adj, 0.0)
    return adj


def sample_pair(template, config, rng, category=0):
    """Draw one correspondence sample from a template."""
    n = template.n_keypoints
    for _ in range(_MAX_PAIR_TRIES):
        keep_a = rng.random(n) >= config.dropout_prob
        keep_b = rng.random(n) >= config.dropout_prob
        if int((keep_a & keep_b).sum()) >= 2:
            break
    else:
        raise ValueError(
            f"dropout {config.dropout_prob} left <2 common keypoints after "
            f"{_MAX_PAIR_TRIES} tries")

    set_a, idx_a = _perturbed_view(template, config, rng, keep_a)
    set_b, idx_b = _perturbed_view(template, config, rng, keep_b)
    row_a = {t: r for r, t in enumerate(idx_a)}
    row_b = {t: r for r, t in enumerate(idx_b)}
    gt_pairs = [(row_a[t], row_b[t]) for t in idx_a if t in row_b]
    return CorrespondenceSample(
        category=category, set_a=set_a, set_b=set_b, gt_pairs=gt_pairs,
        index_map_a=list(idx_a), index_map_b=list(idx_b))


def _perturbed_view(template, config, rng, keep):
    n = template.n_keypoints
    theta = rng.uniform(-config.rotation_range, config.rotation_range)
    s = rng.uniform(config.scale_range[0], config.scale_range[1])
    t = rng.uniform(-config.translation_range, config.translation_range, size=2)
    rot = np.array([[math.cos(theta), -math.sin(theta)],
                    [math.sin(theta), math.cos(theta)]])
    center = template.prototype_positions.mean(axis=0)
    pos = (template.prototype_positions - center) @ rot.T * s + center + t
    pos = pos + rng.normal(0.0, config.position_noise_sigma, size=(n, 2))
    feats = template.prototype_features + rng.normal(
        0.0, config.feature_noise_sigma, size=(n, template.feat_dim))
    idx = np.flatnonzero(keep)
    pos = _renormalize_positions(pos[idx])
    return PointFeatureSet(
        features=feats[idx],
        positions=pos,
        labels=[template.labels[i] for i in idx],
    ), idx


def _renormalize_positions(pos):
    lo = pos.min(axis=0)
    extent = pos.max(axis=0) - lo
    extent = np.where(extent < 1e-12, 1.0, extent)
    return (pos - lo) / extent


def generate_dataset(templates, config):
    """All samples for all templates; per-sample streams keyed by
    (seed, category, pair index), so generation is order-independent."""
    config.validate()
    if not templates:
        raise ValueError("generate_dataset needs at least one template")
    d = templates[0].feat_dim
    for tpl in templates:
        if tpl.feat_dim != d:
            raise ValueError("all templates must share feat_dim")
    samples = []
    for ci, tpl in enumerate(templates):
        for k in range(config.pairs_per_category):
            rng = np.random.default_rng([config.seed, ci, k])
            samples.append(sample_pair(tpl, config, rng, category=ci))
    return SynthDataset(feat_dim=d, templates=list(templates), samples=samples)


def _write_matrix(fh, tag, m):
    m = np.asarray(m)
    fh.write(f"{tag} {m.shape[0]} {m.shape[1]}\n")
    for row in m:
        fh.write(" ".join(repr(float(v)) for v in row))
        fh.write("\n")


def save_dataset(dataset, path):
    """Plain-text serialization; doubles are written with round-trip repr."""
    with open(path, "w") as fh:
        fh.write(f"{DATASET_FORMAT} {DATASET_VERSION} "
                 f"{len(dataset.templates)} {dataset.feat_dim}\n")
        for tpl in dataset.templates:
            fh.write(f"category {tpl.name} {tpl.n_keypoints}\n")
            fh.write("labels " + " ".join(tpl.labels) + "\n")
            _write_matrix(fh, "prototype_features", tpl.prototype_features)
            _write_matrix(fh, "prototype_positions", tpl.prototype_positions)
            _write_matrix(fh, "planted_adjacency", tpl.planted_adjacency)
        fh.write(f"samples {len(dataset.samples)}\n")
        for si, s in enumerate(dataset.samples):
            fh.write(f"sample {si} {s.category}\n")
            for side, fs, idx in (("a", s.set_a, s.index_map_a),
                                  ("b", s.set_b, s.index_map_b)):
                fh.write(f"set_{side} {fs.size}\n")
                fh.write("indices " + " ".join(str(int(i)) for i in idx) + "\n")
                _write_matrix(fh, "features", fs.features)
                _write_matrix(fh, "positions", fs.positions)
            fh.write(f"gt {len(s.gt_pairs)}\n")
            for i, j in s.gt_pairs:
                fh.write(f"{i} {j}\n")
        fh.write("end\n")


class _LineReader:
    def __init__(self, fh):
        self._lines = fh.read().splitlines()
        self._pos = 0

    @property
    def line_no(self):
        return self._pos

    def next(self, context):
        if self._pos >= len(self._lines):
            raise DatasetParseError(
                f"unexpected end of file while reading {context} "
                f"(line {self._pos + 1})")
        line = self._lines[self._pos]
        self._pos += 1
        return line

    def fields(self, context, expect_tag=None):
        parts = self.next(context).split()
        if expect_tag is not None:
            if not parts or parts[0] != expect_tag:
                raise DatasetParseError(
                    f"line {self._pos}: expected '{expect_tag}' while reading "
                    f"{context}, got {' '.join(parts[:3]) or '<empty>'}")
            parts = parts[1:]
        return parts


def _read_matrix(reader, tag, context):
    head = reader.fields(context, expect_tag=tag)
    try:
        rows, cols = int(head[0]), int(head[1])
    except (IndexError, ValueError):
        raise DatasetParseError(
            f"line {reader.line_no}: bad matrix header for {tag} in {context}")
    m = np.zeros((rows, cols))
    for r in range(rows):
        parts = reader.next(f"{context}/{tag} row {r}").split()
        if len(parts) != cols:
            raise DatasetParseError(
                f"line {reader.line_no}: {context}/{tag} row {r} has "
                f"{len(parts)} fields, expected {cols}")
        try:
            m[r] = [float(p) for p in parts]
        except ValueError:
            raise DatasetParseError(
                f"line {reader.line_no}: non-numeric value in {context}/{tag}")
    return m


def load_dataset(path):
    with open(path) as fh:
        reader = _LineReader(fh)
    head = reader.fields("header")
    if len(head) != 4 or head[0] != DATASET_FORMAT:
        raise DatasetParseError("line 1: not a dataset file")
    if int(head[1]) != DATASET_VERSION:
        raise DatasetParseError(f"line 1: unsupported version {head[1]}")
    n_categories, feat_dim = int(head[2]), int(head[3])

    templates = []
    for ci in range(n_categories):
        ctx = f"category {ci}"
        fields = reader.fields(ctx, expect_tag="category")
        name, n_kp = fields[0], int(fields[1])
        labels = reader.fields(ctx, expect_tag="labels")
        if len(labels) != n_kp:
            raise DatasetParseError(
                f"line {reader.line_no}: {ctx} has {len(labels)} labels, "
                f"expected {n_kp}")
        feats = _read_matrix(reader, "prototype_features", ctx)
        pos = _read_matrix(reader, "prototype_positions", ctx)
        adj = _read_matrix(reader, "planted_adjacency", ctx)
        templates.append(CategoryTemplate(
            name=name, prototype_features=feats, prototype_positions=pos,
            planted_adjacency=adj, labels=list(labels)))

    n_samples = int(reader.fields("samples header", expect_tag="samples")[0])
    samples = []
    for si in range(n_samples):
        ctx = f"sample {si}"
        fields = reader.fields(ctx, expect_tag="sample")
        if int(fields[0]) != si:
            raise DatasetParseError(
                f"line {reader.line_no}: sample index {fields[0]}, expected {si}")
        category = int(fields[1])
        sets = {}
        maps = {}
        for side in ("a", "b"):
            size = int(reader.fields(ctx, expect_tag=f"set_{side}")[0])
            idx = [int(v) for v in reader.fields(ctx, expect_tag="indices")]
            if len(idx) != size:
                raise DatasetParseError(
                    f"line {reader.line_no}: {ctx} set_{side} has {len(idx)} "
                    f"indices, expected {size}")
            feats = _read_matrix(reader, "features", f"{ctx}/set_{side}")
            pos = _read_matrix(reader, "positions", f"{ctx}/set_{side}")
            labels = [templates[category].labels[i] for i in idx]
            sets[side] = PointFeatureSet(features=feats, positions=pos,
                                         labels=labels)
            maps[side] = idx
        n_gt = int(reader.fields(ctx, expect_tag="gt")[0])
        gt_pairs = []
        for _ in range(n_gt):
            parts = reader.next(f"{ctx}/gt").split()
            gt_pairs.append((int(parts[0]), int(parts[1])))
        samples.append(CorrespondenceSample(
            category=category, set_a=sets["a"], set_b=sets["b"],
            gt_pairs=gt_pairs, index_map_a=maps["a"], index_map_b=maps["b"]))
    if reader.next("trailer").strip() != "end":
        raise DatasetParseError(f"line {reader.line_no}: missing 'end' trailer")
    return SynthDataset(feat_dim=feat_dim, templates=templates, samples=samples)
