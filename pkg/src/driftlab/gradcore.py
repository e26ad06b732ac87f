"""Tape-based reverse-mode autodiff over small dense float64 arrays.

The primitive set is closed. Everything a policy, value head or reward model
needs is composed from the ops registered in ``OPS``; each op carries its own
forward and vector-Jacobian rule, so every op can be gradient-checked in
isolation against :func:`finite_diff_grad`.

Usage::

    tape = Tape()
    w = tape.param(np.ones((3, 1)))
    x = tape.const(np.arange(6.0).reshape(2, 3))
    loss = tape.sum(tape.tanh(tape.matmul(x, w)))
    grads = tape.backward(loss)
    grads[w]            # d loss / d w, shape (3, 1)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Node",
    "Tape",
    "OPS",
    "finite_diff_grad",
]

# additive logit used to exclude tokens; finite so tensors stay finite
NEG_LOGIT = -1e30


class ShapeError(ValueError):
    """Inputs have incompatible shapes for the requested op."""


class Tensor:
    """Immutable, finite float64 array.

    ``shape`` and ``data`` mirror the row-major layout; ``data`` is a flat
    read-only view.
    """

    __slots__ = ("_array",)

    def __init__(self, values, shape=None):
        arr = np.array(values, dtype=np.float64)
        if shape is not None:
            shape = tuple(int(s) for s in shape)
            if int(np.prod(shape, dtype=np.int64)) != arr.size:
                raise ShapeError(f"cannot view {arr.size} values as shape {shape}")
            arr = arr.reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError("tensor contains NaN or Inf")
        arr.flags.writeable = False
        self._array = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self._array.shape

    @property
    def data(self) -> np.ndarray:
        return self._array.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self._array

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


@dataclass(eq=False)
class Node:
    tape: "Tape"
    index: int
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    attrs: dict = field(default_factory=dict)
    saved: object = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __hash__(self) -> int:
        return id(self)


# ---------------------------------------------------------------------------
# primitive ops: forward(values, attrs) -> (out, saved)
#                backward(g, values, out, saved, attrs) -> tuple of grads


def _embedding_fwd(vals, attrs):
    (table,) = vals
    idx = attrs["idx"]
    if table.ndim != 2:
        raise ShapeError("embedding table must be 2-D")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(
            f"embedding index out of range [0, {table.shape[0]}): "
            f"min={idx.min()} max={idx.max()}"
        )
    return table[idx], None


def _embedding_bwd(g, vals, out, saved, attrs):
    grad = np.zeros_like(vals[0])
    np.add.at(grad, attrs["idx"], g)
    return (grad,)


def _matmul_fwd(vals, attrs):
    a, b = vals
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not align")
    return a @ b, None


def _matmul_bwd(g, vals, out, saved, attrs):
    a, b = vals
    return g @ b.T, a.T @ g


def _add_fwd(vals, attrs):
    a, b = vals
    if a.shape == b.shape:
        return a + b, False
    # row broadcast of a bias vector over the last axis
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return a + b, True
    raise ShapeError(f"add shapes {a.shape} and {b.shape} are incompatible")


def _add_bwd(g, vals, out, broadcast, attrs):
    if broadcast:
        return g, g.reshape(-1, g.shape[-1]).sum(axis=0)
    return g, g


def _mul_fwd(vals, attrs):
    a, b = vals
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes {a.shape} and {b.shape} differ")
    return a * b, None


def _mul_bwd(g, vals, out, saved, attrs):
    a, b = vals
    return g * b, g * a


def _scale_fwd(vals, attrs):
    return vals[0] * attrs["c"], None


def _scale_bwd(g, vals, out, saved, attrs):
    return (g * attrs["c"],)


def _tanh_fwd(vals, attrs):
    return np.tanh(vals[0]), None


def _tanh_bwd(g, vals, out, saved, attrs):
    return (g * (1.0 - out * out),)


def _exp_fwd(vals, attrs):
    return np.exp(vals[0]), None


def _exp_bwd(g, vals, out, saved, attrs):
    return (g * out,)


def _sigmoid_fwd(vals, attrs):
    x = vals[0]
    return 0.5 * (1.0 + np.tanh(0.5 * x)), None


def _sigmoid_bwd(g, vals, out, saved, attrs):
    return (g * out * (1.0 - out),)


def _log_sigmoid_fwd(vals, attrs):
    return -np.logaddexp(0.0, -vals[0]), None


def _log_sigmoid_bwd(g, vals, out, saved, attrs):
    x = vals[0]
    return (g * 0.5 * (1.0 - np.tanh(0.5 * x)),)


def _log_softmax_fwd(vals, attrs):
    z = vals[0]
    m = z.max(axis=-1, keepdims=True)
    shifted = z - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return shifted - lse, None


def _log_softmax_bwd(g, vals, out, saved, attrs):
    p = np.exp(out)
    return (g - p * g.sum(axis=-1, keepdims=True),)


def _softmax_fwd(vals, attrs):
    z = vals[0]
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True), None


def _softmax_bwd(g, vals, out, saved, attrs):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _pick_fwd(vals, attrs):
    (a,) = vals
    idx = attrs["idx"]
    if a.ndim != 2 or idx.shape != (a.shape[0],):
        raise ShapeError(f"pick expects (n, k) input and (n,) indices, got {a.shape}, {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise IndexError("pick index out of range")
    return a[np.arange(a.shape[0]), idx], None


def _pick_bwd(g, vals, out, saved, attrs):
    grad = np.zeros_like(vals[0])
    grad[np.arange(grad.shape[0]), attrs["idx"]] = g
    return (grad,)


def _sum_fwd(vals, attrs):
    return np.asarray(vals[0].sum()), None


def _sum_bwd(g, vals, out, saved, attrs):
    return (np.full_like(vals[0], g),)


def _mean_fwd(vals, attrs):
    if vals[0].size == 0:
        raise ShapeError("mean of an empty tensor")
    return np.asarray(vals[0].mean()), None


def _mean_bwd(g, vals, out, saved, attrs):
    return (np.full_like(vals[0], g / vals[0].size),)


def _sum_rows_fwd(vals, attrs):
    a = vals[0]
    if a.ndim != 2:
        raise ShapeError("sum_rows expects a 2-D input")
    return a.sum(axis=1), None


def _sum_rows_bwd(g, vals, out, saved, attrs):
    return (np.repeat(g[:, None], vals[0].shape[1], axis=1),)


def _clip_fwd(vals, attrs):
    return np.clip(vals[0], attrs["lo"], attrs["hi"]), None


def _clip_bwd(g, vals, out, saved, attrs):
    x = vals[0]
    inside = (x > attrs["lo"]) & (x < attrs["hi"])
    return (g * inside,)


def _minimum_fwd(vals, attrs):
    a, b = vals
    if a.shape != b.shape:
        raise ShapeError(f"minimum shapes {a.shape} and {b.shape} differ")
    return np.minimum(a, b), None


def _minimum_bwd(g, vals, out, saved, attrs):
    a, b = vals
    take_a = a <= b
    return g * take_a, g * ~take_a


@dataclass(frozen=True)
class OpDef:
    forward: Callable
    backward: Callable
    arity: int


OPS: dict[str, OpDef] = {
    "embedding": OpDef(_embedding_fwd, _embedding_bwd, 1),
    "matmul": OpDef(_matmul_fwd, _matmul_bwd, 2),
    "add": OpDef(_add_fwd, _add_bwd, 2),
    "mul": OpDef(_mul_fwd, _mul_bwd, 2),
    "scale": OpDef(_scale_fwd, _scale_bwd, 1),
    "tanh": OpDef(_tanh_fwd, _tanh_bwd, 1),
    "exp": OpDef(_exp_fwd, _exp_bwd, 1),
    "sigmoid": OpDef(_sigmoid_fwd, _sigmoid_bwd, 1),
    "log_sigmoid": OpDef(_log_sigmoid_fwd, _log_sigmoid_bwd, 1),
    "log_softmax": OpDef(_log_softmax_fwd, _log_softmax_bwd, 1),
    "softmax": OpDef(_softmax_fwd, _softmax_bwd, 1),
    "pick": OpDef(_pick_fwd, _pick_bwd, 1),
    "sum": OpDef(_sum_fwd, _sum_bwd, 1),
    "mean": OpDef(_mean_fwd, _mean_bwd, 1),
    "sum_rows": OpDef(_sum_rows_fwd, _sum_rows_bwd, 1),
    "clip": OpDef(_clip_fwd, _clip_bwd, 1),
    "minimum": OpDef(_minimum_fwd, _minimum_bwd, 2),
}


class Tape:
    """Append-only record of primitive applications.

    Nodes are numbered in insertion order, which is also a topological order
    because an op may only consume nodes already on this tape.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def _leaf(self, op: str, value) -> Node:
        value = value.numpy() if isinstance(value, Tensor) else Tensor(value).numpy()
        node = Node(self, len(self.nodes), op, (), value)
        self.nodes.append(node)
        return node

    def param(self, value) -> Node:
        """Differentiable leaf."""
        return self._leaf("param", value)

    def const(self, value) -> Node:
        """Non-differentiable leaf."""
        return self._leaf("const", value)

    def apply(self, op: str, *inputs: Node, **attrs) -> Node:
        try:
            spec = OPS[op]
        except KeyError:
            raise ValueError(f"unknown op {op!r}") from None
        if len(inputs) != spec.arity:
            raise ValueError(f"{op} takes {spec.arity} inputs, got {len(inputs)}")
        for node in inputs:
            if node.tape is not self:
                raise ValueError("input node belongs to a different tape")
        out, saved = spec.forward([n.value for n in inputs], attrs)
        out = np.asarray(out, dtype=np.float64)
        if not np.all(np.isfinite(out)):
            raise FloatingPointError(f"{op} produced a non-finite value")
        out.flags.writeable = False
        node = Node(self, len(self.nodes), op, tuple(n.index for n in inputs), out, attrs, saved)
        self.nodes.append(node)
        return node

    # thin wrappers keep call sites readable
    def embedding(self, table: Node, idx) -> Node:
        return self.apply("embedding", table, idx=np.asarray(idx, dtype=np.int64))

    def matmul(self, a: Node, b: Node) -> Node:
        return self.apply("matmul", a, b)

    def add(self, a: Node, b: Node) -> Node:
        return self.apply("add", a, b)

    def mul(self, a: Node, b: Node) -> Node:
        return self.apply("mul", a, b)

    def scale(self, a: Node, c: float) -> Node:
        return self.apply("scale", a, c=float(c))

    def tanh(self, a: Node) -> Node:
        return self.apply("tanh", a)

    def exp(self, a: Node) -> Node:
        return self.apply("exp", a)

    def sigmoid(self, a: Node) -> Node:
        return self.apply("sigmoid", a)

    def log_sigmoid(self, a: Node) -> Node:
        return self.apply("log_sigmoid", a)

    def log_softmax(self, a: Node) -> Node:
        return self.apply("log_softmax", a)

    def softmax(self, a: Node) -> Node:
        return self.apply("softmax", a)

    def pick(self, a: Node, idx) -> Node:
        return self.apply("pick", a, idx=np.asarray(idx, dtype=np.int64))

    def sum(self, a: Node) -> Node:
        return self.apply("sum", a)

    def mean(self, a: Node) -> Node:
        return self.apply("mean", a)

    def sum_rows(self, a: Node) -> Node:
        return self.apply("sum_rows", a)

    def clip(self, a: Node, lo: float, hi: float) -> Node:
        return self.apply("clip", a, lo=float(lo), hi=float(hi))

    def minimum(self, a: Node, b: Node) -> Node:
        return self.apply("minimum", a, b)

    def sub(self, a: Node, b: Node) -> Node:
        return self.add(a, self.scale(b, -1.0))

    def backward(self, loss: Node) -> dict[Node, np.ndarray]:
        """Gradient of scalar ``loss`` with respect to every ``param`` leaf."""
        if loss.tape is not self:
            raise ValueError("loss node belongs to a different tape")
        if loss.value.shape != ():
            raise ShapeError(f"loss must be a scalar, got shape {loss.value.shape}")
        grads: list[np.ndarray | None] = [None] * (loss.index + 1)
        grads[loss.index] = np.ones(())
        for node in reversed(self.nodes[: loss.index + 1]):
            g = grads[node.index]
            if g is None or not node.inputs:
                continue
            in_vals = [self.nodes[i].value for i in node.inputs]
            in_grads = OPS[node.op].backward(g, in_vals, node.value, node.saved, node.attrs)
            for i, gi in zip(node.inputs, in_grads):
                if self.nodes[i].op == "const":
                    continue
                grads[i] = gi if grads[i] is None else grads[i] + gi
        out = {}
        for node in self.nodes:
            if node.op == "param":
                g = grads[node.index] if node.index < len(grads) else None
                out[node] = np.zeros_like(node.value) if g is None else g
        return out


def finite_diff_grad(f: Callable[[np.ndarray], float], theta, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``theta``.

    Entry i is ``(f(theta + eps*e_i) - f(theta - eps*e_i)) / (2*eps)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    values = getattr(theta, "values", theta)
    base = np.array(values, dtype=np.float64).reshape(-1)
    grad = np.empty_like(base)
    for i in range(base.size):
        orig = base[i]
        base[i] = orig + eps
        hi = float(f(base.copy()))
        base[i] = orig - eps
        lo = float(f(base.copy()))
        base[i] = orig
        grad[i] = (hi - lo) / (2.0 * eps)
    return grad.reshape(np.shape(values))
