"""Weighted cross-entropy training of the matching network.

Positive candidate matches are vastly outnumbered by negatives, so the
positive term of the binary cross entropy carries a weight (default 5)
while negatives keep weight 1. One sample per update; the loop is
single-threaded and bit-reproducible under a fixed seed.
"""

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .assignment import (gt_matrix, hungarian, matching_accuracy,
                         pad_to_common_size)
from .attention import forward
from .diffcore import Tensor, backward

logger = logging.getLogger("glam")

LOG_CLAMP = 1e-12


class DivergenceError(RuntimeError):
    """Training hit a non-finite loss."""

    def __init__(self, epoch, sample_index, loss):
        super().__init__(
            f"non-finite loss {loss!r} at epoch {epoch}, sample {sample_index}")
        self.epoch = epoch
        self.sample_index = sample_index
        self.loss = loss


@dataclass
class TrainConfig:
    pos_weight: float = 5.0
    learning_rate: float = 1e-3
    epochs: int = 20
    seed: int = 0
    optimizer: str = "adaptive-moment"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self):
        if self.pos_weight <= 0:
            raise ValueError("pos_weight must be > 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.optimizer not in ("plain-gradient", "adaptive-moment"):
            raise ValueError(f"unknown optimizer '{self.optimizer}'")

    def to_dict(self):
        return {
            "pos_weight": self.pos_weight,
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "seed": self.seed,
            "optimizer": self.optimizer,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
        }


@dataclass
class TrainReport:
    """Per-epoch mean loss, held-out accuracy and wall-clock seconds."""

    losses: list = field(default_factory=list)
    accuracies: list = field(default_factory=list)
    seconds: list = field(default_factory=list)

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write("epoch,loss,accuracy,seconds\n")
            for e, (l, a, s) in enumerate(
                    zip(self.losses, self.accuracies, self.seconds)):
                fh.write(f"{e},{l!r},{a!r},{s!r}\n")


def weighted_bce_loss(tape, x, gt, mask=None, pos_weight=5.0):
    """Weighted binary cross entropy over the vectorized soft assignment.

    `x` is the network-output Tensor; `gt` a binary array of the same
    shape. Cells marked True in `mask` (dummy rows/columns) are excluded.
    Scores are clamped into [1e-12, 1 - 1e-12] before the logs.
    """
    gt = np.asarray(gt, dtype=np.float64)
    if gt.shape != x.shape:
        raise ValueError(f"gt shape {gt.shape} does not match x shape {x.shape}")
    valid = np.ones_like(gt) if mask is None else (~np.asarray(mask)).astype(float)
    xc = dc.clamp(tape, x, LOG_CLAMP, 1.0 - LOG_CLAMP)
    pos = dc.mul(tape, Tensor(pos_weight * gt * valid), dc.log(tape, xc))
    one_minus = dc.add(tape, Tensor(np.ones_like(gt)), dc.scale(tape, xc, -1.0))
    neg = dc.mul(tape, Tensor((1.0 - gt) * valid), dc.log(tape, one_minus))
    return dc.scale(tape, dc.sum_all(tape, dc.add(tape, pos, neg)), -1.0)


def _require_some_grad(params):
    # The final cross-attention V/mixer never reach the loss, so individual
    # missing grads are expected; a fully gradient-free parameter set means
    # backward was never run.
    if all(p.grad is None for _, p in params.named()):
        raise ValueError("no parameter has a gradient; run backward first")


class PlainGradient:
    """Vanilla gradient descent."""

    def __init__(self, learning_rate):
        self.learning_rate = learning_rate

    def step(self, params):
        _require_some_grad(params)
        for _, p in params.named():
            if p.grad is None:
                continue
            p.values -= self.learning_rate * p.grad


class AdaptiveMoment:
    """First/second-moment adaptive update with bias correction."""

    def __init__(self, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {}
        self._v = {}

    def step(self, params):
        _require_some_grad(params)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in params.named():
            if p.grad is None:
                continue
            g = p.grad
            m = self._m.get(name)
            v = self._v.get(name)
            if m is None:
                m = np.zeros_like(g)
                v = np.zeros_like(g)
                self._m[name] = m
                self._v[name] = v
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            scale = self.learning_rate / (1 - b1 ** self.t)
            denom = np.sqrt(v / (1 - b2 ** self.t))
            denom += self.eps
            p.values -= scale * m / denom


def make_optimizer(config):
    if config.optimizer == "plain-gradient":
        return PlainGradient(config.learning_rate)
    if config.optimizer == "adaptive-moment":
        return AdaptiveMoment(config.learning_rate, config.beta1,
                              config.beta2, config.eps)
    raise ValueError(f"unknown optimizer '{config.optimizer}'")


def sample_loss(params, net_config, sample, pos_weight):
    """Forward one sample and return (trace, loss tensor); handles padding."""
    a, b, gt_pairs, mask = pad_to_common_size(
        sample.set_a, sample.set_b, sample.gt_pairs)
    trace = forward(params, net_config, a, b)
    gt = gt_matrix(gt_pairs, a.size)
    loss = weighted_bce_loss(trace.tape, trace.output, gt, mask, pos_weight)
    return trace, loss


def sample_accuracy(params, net_config, sample):
    """Hungarian-discretized matching accuracy of one sample."""
    a, b, gt_pairs, mask = pad_to_common_size(
        sample.set_a, sample.set_b, sample.gt_pairs)
    trace = forward(params, net_config, a, b)
    perm = hungarian(trace.assignment.scores)
    return matching_accuracy(perm, gt_matrix(gt_pairs, a.size), mask)


def evaluate(params, net_config, samples):
    """Mean matching accuracy over a dataset."""
    if len(samples) == 0:
        raise ValueError("evaluate called on an empty dataset")
    return float(np.mean(
        [sample_accuracy(params, net_config, s) for s in samples]))


def train(params, net_config, train_set, val_set, train_config):
    """Per-sample forward/backward/update loop; params are updated in place.

    Returns a TrainReport with one row per epoch (mean loss, validation
    accuracy after the epoch, wall-clock seconds).
    """
    train_config.validate()
    net_config.validate()
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("train and validation sets must be non-empty")
    optimizer = make_optimizer(train_config)
    rng = np.random.default_rng(train_config.seed)
    report = TrainReport()
    for epoch in range(train_config.epochs):
        t0 = time.perf_counter()
        total = 0.0
        for idx in rng.permutation(len(train_set)):
            sample = train_set[int(idx)]
            trace, loss = sample_loss(params, net_config, sample,
                                      train_config.pos_weight)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(epoch, int(idx), value)
            backward(trace.tape, loss)
            optimizer.step(params)
            params.zero_grads()
            total += value
        report.losses.append(total / len(train_set))
        report.accuracies.append(evaluate(params, net_config, val_set))
        report.seconds.append(time.perf_counter() - t0)
        logger.info("epoch %d: loss %.6f, val accuracy %.4f (%.2fs)",
                    epoch, report.losses[-1], report.accuracies[-1],
                    report.seconds[-1])
    return report


def gradient_check(params, net_config, set_a, set_b, gt, mask=None,
                   pos_weight=5.0, step=1e-5):
    """Compare tape gradients against central finite differences.

    Returns {parameter name: worst relative error}; relative error uses
    max(|analytic|, |numeric|, 1e-6) as the denominator.
    """

    def loss_value():
        trace = forward(params, net_config, set_a, set_b)
        return weighted_bce_loss(trace.tape, trace.output, gt, mask,
                                 pos_weight).item()

    params.zero_grads()
    trace = forward(params, net_config, set_a, set_b)
    loss = weighted_bce_loss(trace.tape, trace.output, gt, mask, pos_weight)
    backward(trace.tape, loss)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.values))
        for name, p in params.named()
    }
    params.zero_grads()

    worst = {}
    for name, p in params.named():
        fd = np.zeros_like(p.values)
        flat = p.values.ravel()
        for k in range(flat.size):
            saved = flat[k]
            flat[k] = saved + step
            up = loss_value()
            flat[k] = saved - step
            down = loss_value()
            flat[k] = saved
            fd.ravel()[k] = (up - down) / (2 * step)
        a = analytic[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(fd)), 1e-6)
        worst[name] = float((np.abs(a - fd) / denom).max())
    return worst
