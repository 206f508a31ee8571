"""The joint graph-learning-and-matching attention network.

Two keypoint sets enter as feature matrices augmented with positional
embeddings from a small learnable encoder. A stack of self-attention
layers (which learn a weighted graph over each set and update features
along it) and cross-attention layers (whose row/column-normalized
attention maps act as soft correspondences) is applied; the soft
assignment is the head-averaged cross attention of the last layer,
symmetrized across the two directions.
"""

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import diffcore as dc
from .assignment import SoftAssignment, sinkhorn_normalize
from .diffcore import Tape, Tensor

CHECKPOINT_FORMAT = "glam-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class NetworkConfig:
    """Architecture hyperparameters.

    Desk-scale defaults keep experiments laptop-friendly; `paper_scale`
    returns the published full-size setting.
    """

    n_layers: int = 3
    n_self_heads: int = 4
    n_cross_heads: int = 4
    feat_dim: int = 64
    self_dim: int = 64
    cross_dim: int = 64
    sinkhorn_iters: int = 5
    use_sal: bool = True
    use_cal: bool = True

    @classmethod
    def paper_scale(cls):
        return cls(n_layers=3, n_self_heads=8, n_cross_heads=8,
                   feat_dim=1024, self_dim=1024, cross_dim=1024,
                   sinkhorn_iters=5)

    def validate(self):
        counts = {
            "n_layers": self.n_layers,
            "n_self_heads": self.n_self_heads,
            "n_cross_heads": self.n_cross_heads,
            "feat_dim": self.feat_dim,
            "self_dim": self.self_dim,
            "cross_dim": self.cross_dim,
            "sinkhorn_iters": self.sinkhorn_iters,
        }
        for name, value in counts.items():
            if value < 1:
                raise ValueError(f"{name} must be >= 1, got {value}")
        if not (self.use_sal or self.use_cal):
            raise ValueError("at least one of use_sal/use_cal must be enabled")

    @property
    def encoder_hidden(self):
        return max(1, self.feat_dim // 4)

    def to_dict(self):
        return {
            "n_layers": self.n_layers,
            "n_self_heads": self.n_self_heads,
            "n_cross_heads": self.n_cross_heads,
            "feat_dim": self.feat_dim,
            "self_dim": self.self_dim,
            "cross_dim": self.cross_dim,
            "sinkhorn_iters": self.sinkhorn_iters,
            "use_sal": self.use_sal,
            "use_cal": self.use_cal,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class PointFeatureSet:
    """n keypoints with d-dim feature vectors and 2-D positions."""

    features: np.ndarray
    positions: np.ndarray
    labels: Optional[list] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.features.ndim != 2 or self.positions.ndim != 2:
            raise ValueError("features and positions must be 2-D")
        n = self.features.shape[0]
        if n < 1:
            raise ValueError("a keypoint set needs at least one point")
        if self.positions.shape != (n, 2):
            raise ValueError(
                f"positions shape {self.positions.shape} does not match n={n}")
        if self.labels is not None and len(self.labels) != n:
            raise ValueError("labels length does not match point count")

    @property
    def size(self):
        return self.features.shape[0]


class GlamParameters:
    """All learnable weights, addressable by checkpoint key.

    Keys: `encoder.{0|1}.{weight|bias}` for the positional encoder and
    `layer{t}.{sal|cal}.head{i}.{Q|K|V}` / `layer{t}.{sal|cal}.mixer` for
    the attention stack. Only sublayers enabled in the config exist.
    """

    def __init__(self, tensors):
        self._tensors = dict(tensors)

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def named(self):
        return self._tensors.items()

    def names(self):
        return list(self._tensors.keys())

    def zero_grads(self):
        for t in self._tensors.values():
            t.grad = None

    def copy(self):
        return GlamParameters(
            {name: Tensor(t.values) for name, t in self._tensors.items()})

    @classmethod
    def init_random(cls, config, rng):
        """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) initialization per matrix."""
        config.validate()
        d = config.feat_dim
        h = config.encoder_hidden
        tensors = {}

        def uniform(rows, cols, fan_in):
            bound = 1.0 / math.sqrt(fan_in)
            return Tensor(rng.uniform(-bound, bound, size=(rows, cols)))

        tensors["encoder.0.weight"] = uniform(2, h, 2)
        tensors["encoder.0.bias"] = uniform(1, h, 2)
        tensors["encoder.1.weight"] = uniform(h, d, h)
        tensors["encoder.1.bias"] = uniform(1, d, h)
        for t in range(config.n_layers):
            if config.use_sal:
                for i in range(config.n_self_heads):
                    for proj in ("Q", "K", "V"):
                        tensors[f"layer{t}.sal.head{i}.{proj}"] = uniform(
                            d, config.self_dim, d)
                tensors[f"layer{t}.sal.mixer"] = uniform(
                    config.self_dim * config.n_self_heads, d,
                    config.self_dim * config.n_self_heads)
            if config.use_cal:
                for i in range(config.n_cross_heads):
                    for proj in ("Q", "K", "V"):
                        tensors[f"layer{t}.cal.head{i}.{proj}"] = uniform(
                            d, config.cross_dim, d)
                tensors[f"layer{t}.cal.mixer"] = uniform(
                    config.cross_dim * config.n_cross_heads, d,
                    config.cross_dim * config.n_cross_heads)
        return cls(tensors)


def expected_parameter_shapes(config):
    """Checkpoint key -> shape implied by a network config."""
    config.validate()
    d = config.feat_dim
    h = config.encoder_hidden
    shapes = {
        "encoder.0.weight": (2, h),
        "encoder.0.bias": (1, h),
        "encoder.1.weight": (h, d),
        "encoder.1.bias": (1, d),
    }
    for t in range(config.n_layers):
        if config.use_sal:
            for i in range(config.n_self_heads):
                for proj in ("Q", "K", "V"):
                    shapes[f"layer{t}.sal.head{i}.{proj}"] = (d, config.self_dim)
            shapes[f"layer{t}.sal.mixer"] = (
                config.self_dim * config.n_self_heads, d)
        if config.use_cal:
            for i in range(config.n_cross_heads):
                for proj in ("Q", "K", "V"):
                    shapes[f"layer{t}.cal.head{i}.{proj}"] = (d, config.cross_dim)
            shapes[f"layer{t}.cal.mixer"] = (
                config.cross_dim * config.n_cross_heads, d)
    return shapes


def validate_parameters(params, config):
    """Raise with the offending key when params do not fit the config."""
    expected = expected_parameter_shapes(config)
    for name, shape in expected.items():
        if name not in params:
            raise ValueError(f"checkpoint is missing parameter '{name}'")
        actual = params[name].shape
        if actual != shape:
            raise ValueError(
                f"parameter '{name}' has shape {actual}, expected {shape}")
    for name, _ in params.named():
        if name not in expected:
            raise ValueError(f"unexpected parameter '{name}' for this config")


@dataclass
class ForwardTrace:
    """Everything a forward pass produces, plus the tape for backprop.

    self_attn holds, per layer, the per-head row-stochastic attention of
    each image; cross_attn holds the last layer's per-head doubly(-ish)
    stochastic cross attention. Stored matrices are plain arrays.
    """

    assignment: SoftAssignment
    self_attn: list = field(default_factory=list)
    cross_attn: Optional[dict] = None
    tape: Optional[Tape] = None
    output: Optional[Tensor] = None


def encode_positions(tape, params, positions):
    """Map n x 2 coordinates to n x d embeddings with a two-layer MLP."""
    p = Tensor(np.asarray(positions, dtype=np.float64))
    hidden = dc.relu(tape, dc.add_bias(
        tape, dc.matmul(tape, p, params["encoder.0.weight"]),
        params["encoder.0.bias"]))
    return dc.add_bias(tape, dc.matmul(tape, hidden, params["encoder.1.weight"]),
                       params["encoder.1.bias"])


def self_attention_layer(tape, params, layer, f_a, f_b, config):
    """One self-attention update applied to both images with shared weights.

    Returns updated features plus the per-head attention matrices (the
    learnt weighted graphs) for each image. The positional re-add is the
    caller's job.
    """
    inv_sqrt = 1.0 / math.sqrt(config.self_dim)
    outs = []
    attns = []
    for f in (f_a, f_b):
        heads = []
        mats = []
        for i in range(config.n_self_heads):
            wq = params[f"layer{layer}.sal.head{i}.Q"]
            wk = params[f"layer{layer}.sal.head{i}.K"]
            wv = params[f"layer{layer}.sal.head{i}.V"]
            q = dc.matmul(tape, f, wq)
            k = dc.matmul(tape, f, wk)
            v = dc.matmul(tape, f, wv)
            logits = dc.scale(tape, dc.matmul(tape, q, dc.transpose(tape, k)),
                              inv_sqrt)
            m = dc.row_softmax(tape, logits)
            mats.append(m)
            heads.append(dc.matmul(tape, m, v))
        mixed = dc.matmul(tape, dc.concat_cols(tape, heads),
                          params[f"layer{layer}.sal.mixer"])
        outs.append(dc.relu(tape, dc.add(tape, f, mixed)))
        attns.append(mats)
    return outs[0], outs[1], attns[0], attns[1]


def cross_attention_layer(tape, params, layer, f_a, f_b, config):
    """One cross-attention update in both directions with shared weights.

    Per head the attention map is sinkhorn(sigmoid(QK^T / sqrt(d_C))),
    queries from one image and keys/values from the other. Returns updated
    features and the per-head attention Tensors of both directions.
    """
    inv_sqrt = 1.0 / math.sqrt(config.cross_dim)
    sources = {"A": (f_a, f_b), "B": (f_b, f_a)}
    mats = {"A": [], "B": []}
    heads = {"A": [], "B": []}
    for i in range(config.n_cross_heads):
        wq = params[f"layer{layer}.cal.head{i}.Q"]
        wk = params[f"layer{layer}.cal.head{i}.K"]
        wv = params[f"layer{layer}.cal.head{i}.V"]
        for side, (fq, fkv) in sources.items():
            q = dc.matmul(tape, fq, wq)
            k = dc.matmul(tape, fkv, wk)
            v = dc.matmul(tape, fkv, wv)
            logits = dc.scale(tape, dc.matmul(tape, q, dc.transpose(tape, k)),
                              inv_sqrt)
            # Saturated sigmoids would hand Sinkhorn denormal rows whose
            # normalization overflows in backward. The floor sits at the
            # |z| ~ 69 saturation point so merely-saturated cells keep their
            # (tiny) gradients instead of freezing under adaptive updates.
            gate = dc.clamp(tape, dc.sigmoid(tape, logits), 1e-30, 1.0)
            m = sinkhorn_normalize(tape, gate, config.sinkhorn_iters)
            mats[side].append(m)
            heads[side].append(dc.matmul(tape, m, v))
    mixer = params[f"layer{layer}.cal.mixer"]
    out = {}
    for side, f in (("A", f_a), ("B", f_b)):
        mixed = dc.matmul(tape, dc.concat_cols(tape, heads[side]), mixer)
        out[side] = dc.relu(tape, dc.add(tape, f, mixed))
    return out["A"], out["B"], mats["A"], mats["B"]


def forward(params, config, set_a, set_b):
    """Run the full stack on a padded pair and return the forward trace.

    Both sets must already have equal size (see pad_to_common_size). The
    soft assignment is the head- and direction-averaged cross attention of
    the last layer; without cross attention it falls back to a row-softmax
    over scaled feature similarity.
    """
    config.validate()
    if set_a.size != set_b.size:
        raise ValueError(
            f"sets must be padded to equal size, got {set_a.size} and {set_b.size}")
    for s in (set_a, set_b):
        if s.features.shape[1] != config.feat_dim:
            raise ValueError(
                f"feature dim {s.features.shape[1]} does not match config "
                f"feat_dim {config.feat_dim}")

    tape = Tape()
    pos_a = encode_positions(tape, params, set_a.positions)
    pos_b = encode_positions(tape, params, set_b.positions)
    f_a = dc.add(tape, Tensor(set_a.features), pos_a)
    f_b = dc.add(tape, Tensor(set_b.features), pos_b)

    self_attn = []
    cross_a = cross_b = None
    for t in range(config.n_layers):
        if config.use_sal:
            f_a, f_b, attn_a, attn_b = self_attention_layer(
                tape, params, t, f_a, f_b, config)
            f_a = dc.add(tape, f_a, pos_a)
            f_b = dc.add(tape, f_b, pos_b)
            self_attn.append({"A": [m.values for m in attn_a],
                              "B": [m.values for m in attn_b]})
        if config.use_cal:
            f_a, f_b, cross_a, cross_b = cross_attention_layer(
                tape, params, t, f_a, f_b, config)
            f_a = dc.add(tape, f_a, pos_a)
            f_b = dc.add(tape, f_b, pos_b)

    if config.use_cal:
        acc = None
        for m_a, m_b in zip(cross_a, cross_b):
            term = dc.add(tape, m_a, dc.transpose(tape, m_b))
            acc = term if acc is None else dc.add(tape, acc, term)
        x = dc.scale(tape, acc, 1.0 / (2 * config.n_cross_heads))
        cross_attn = {"A": [m.values for m in cross_a],
                      "B": [m.values for m in cross_b]}
    else:
        sim = dc.scale(tape, dc.matmul(tape, f_a, dc.transpose(tape, f_b)),
                       1.0 / math.sqrt(config.feat_dim))
        x = dc.row_softmax(tape, sim)
        cross_attn = None

    return ForwardTrace(
        assignment=SoftAssignment(scores=x.values),
        self_attn=self_attn,
        cross_attn=cross_attn,
        tape=tape,
        output=x,
    )


def save_checkpoint(params, path):
    """Write parameters as a versioned JSON container, full double precision."""
    entries = []
    for name, t in params.named():
        entries.append({
            "name": name,
            "shape": list(t.shape),
            "values": [float(v) for v in t.values.ravel()],
        })
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
           "parameters": entries}
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_checkpoint(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    tensors = {}
    for entry in doc["parameters"]:
        shape = tuple(entry["shape"])
        values = np.array(entry["values"], dtype=np.float64).reshape(shape)
        tensors[entry["name"]] = Tensor(values)
    return GlamParameters(tensors)
