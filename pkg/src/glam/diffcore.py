"""Minimal tape-based reverse-mode differentiation over 2-D double tensors.

Every operation the matching network needs is provided as a free function
taking the recording tape first. Tensors are plain value holders; the tape
keeps the execution order (which is automatically topological) together
with one adjoint rule per node, and `backward` replays it in reverse.
Tapes are rebuilt on every forward pass, so variable problem sizes cost
nothing.
"""

import numpy as np


class Tensor:
    """A 2-D double-precision matrix with an optional accumulated gradient.

    Scalars are represented as 1x1 matrices. `grad` stays None until a
    backward pass deposits an adjoint; repeated backward passes accumulate.
    """

    __slots__ = ("values", "grad")

    def __init__(self, values):
        arr = np.array(values, dtype=np.float64, copy=True, order="C")
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ValueError(f"tensors are 2-D, got array of ndim {arr.ndim}")
        self.values = arr
        self.grad = None

    @property
    def shape(self):
        return self.values.shape

    def item(self):
        if self.values.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.values[0, 0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


class Tape:
    """Ordered record of executed operations for one forward pass.

    Each node is (output, inputs, rule) where rule maps the output adjoint
    to one adjoint per input. Execution order guarantees every node's
    inputs were produced earlier, so a single reverse sweep suffices.
    """

    def __init__(self):
        self._nodes = []

    def record(self, output, inputs, rule):
        self._nodes.append((output, inputs, rule))

    def __len__(self):
        return len(self._nodes)


def _fresh(tape, values, inputs, rule):
    out = Tensor.__new__(Tensor)
    out.values = np.ascontiguousarray(values, dtype=np.float64)
    out.grad = None
    tape.record(out, inputs, rule)
    return out


def matmul(tape, a, b):
    """Matrix product a @ b."""
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def rule(g):
        return g @ bv.T, av.T @ g

    return _fresh(tape, av @ bv, (a, b), rule)


def add(tape, a, b):
    """Elementwise sum of two same-shape tensors."""
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def rule(g):
        return g, g

    return _fresh(tape, a.values + b.values, (a, b), rule)


def add_bias(tape, a, bias):
    """Add a 1xk row vector to every row of an mxk tensor."""
    if bias.shape != (1, a.shape[1]):
        raise ValueError(f"bias shape {bias.shape} incompatible with {a.shape}")

    def rule(g):
        return g, g.sum(axis=0, keepdims=True)

    return _fresh(tape, a.values + bias.values, (a, bias), rule)


def scale(tape, a, k):
    """Multiply by a python scalar constant."""
    k = float(k)

    def rule(g):
        return (k * g,)

    return _fresh(tape, k * a.values, (a,), rule)


def mul(tape, a, b):
    """Hadamard product of two same-shape tensors."""
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    av, bv = a.values, b.values

    def rule(g):
        return g * bv, g * av

    return _fresh(tape, av * bv, (a, b), rule)


def transpose(tape, a):
    def rule(g):
        return (g.T,)

    return _fresh(tape, a.values.T, (a,), rule)


def concat_cols(tape, parts):
    """Concatenate tensors with equal row counts along columns."""
    parts = tuple(parts)
    if not parts:
        raise ValueError("concat_cols needs at least one part")
    rows = parts[0].shape[0]
    for p in parts:
        if p.shape[0] != rows:
            raise ValueError(
                f"concat_cols row mismatch: {p.shape[0]} vs {rows}")
    widths = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def rule(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(widths)))

    return _fresh(tape, np.hstack([p.values for p in parts]), parts, rule)


def row_softmax(tape, a):
    """Softmax along each row, computed with per-row max subtraction."""
    shifted = a.values - a.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def rule(g):
        # d/dx softmax: y * (g - sum_k g_k y_k) per row
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _fresh(tape, y, (a,), rule)


def row_normalize(tape, a):
    """Divide each row by its sum; rows must have nonzero sums."""
    s = a.values.sum(axis=1, keepdims=True)
    if np.any(s == 0.0):
        raise ValueError("row_normalize: zero row sum")
    y = a.values / s

    def rule(g):
        return ((g - (g * y).sum(axis=1, keepdims=True)) / s,)

    return _fresh(tape, y, (a,), rule)


def sigmoid(tape, a):
    """Elementwise logistic map into (0,1); extreme inputs stay strictly inside."""
    z = np.clip(a.values, -700.0, 700.0)
    y = np.empty_like(z)
    pos = z >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    y[~pos] = ez / (1.0 + ez)

    def rule(g):
        return (g * y * (1.0 - y),)

    return _fresh(tape, y, (a,), rule)


def relu(tape, a):
    """Elementwise max(0, z); subgradient at exactly 0 is taken as 0."""
    mask = a.values > 0.0

    def rule(g):
        return (g * mask,)

    return _fresh(tape, np.where(mask, a.values, 0.0), (a,), rule)


def clamp(tape, a, lo, hi):
    """Clip values into [lo, hi]; gradient passes through inside the interval."""
    mask = (a.values >= lo) & (a.values <= hi)

    def rule(g):
        return (g * mask,)

    return _fresh(tape, np.clip(a.values, lo, hi), (a,), rule)


def log(tape, a):
    """Elementwise natural log; input must be strictly positive."""
    if np.any(a.values <= 0.0):
        raise ValueError("log of non-positive entry")
    av = a.values

    def rule(g):
        return (g / av,)

    return _fresh(tape, np.log(av), (a,), rule)


def sum_all(tape, a):
    """Sum of all entries, as a 1x1 tensor."""
    shape = a.shape

    def rule(g):
        return (np.full(shape, g[0, 0]),)

    return _fresh(tape, np.array([[a.values.sum()]]), (a,), rule)


def backward(tape, loss):
    """Accumulate dLoss/dT into .grad of every tensor participating in loss.

    The adjoint buffer is private to each call, so calling backward twice
    on the same tape exactly doubles the accumulated gradients.
    """
    if loss.shape != (1, 1):
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    adjoint = {id(loss): np.ones((1, 1))}
    holders = {id(loss): loss}
    produced = {id(out) for out, _, _ in tape._nodes}
    for out, inputs, rule in reversed(tape._nodes):
        g = adjoint.get(id(out))
        if g is None:
            continue
        contribs = rule(g)
        for t, c in zip(inputs, contribs):
            key = id(t)
            if key in adjoint:
                # accumulation allocates, so stored adjoints are never
                # mutated and rules may return views or shared arrays
                adjoint[key] = adjoint[key] + c
            else:
                adjoint[key] = c
                holders[key] = t
    # only leaves (parameters, inputs, constants) keep their gradient;
    # node outputs are transient
    for key, g in adjoint.items():
        if key in produced:
            continue
        t = holders[key]
        t.grad = np.array(g) if t.grad is None else t.grad + g
