"""Reverse-mode automatic differentiation over an append-only graph.

Every operation is evaluated eagerly in binary64 and recorded as a node.
:meth:`Graph.backward` returns numeric gradients; :meth:`Graph.backward_as_graph`
emits the adjoint computation as new nodes of the same graph so that gradients
can themselves be differentiated (as needed when a loss contains ``dF/deps``).

Shapes follow numpy. Binary elementwise operations broadcast; the adjoint of a
broadcast is a ``sum_to`` reduction back to the operand shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class GraphError(ValueError):
    """Raised for invalid graph construction or differentiation requests."""


class NonFiniteError(GraphError):
    """Raised when a lifted input or a forward value is NaN or infinite."""


@dataclass(eq=False, slots=True)
class Node:
    graph: "Graph"
    index: int
    kind: str
    parents: tuple["Node", ...]
    value: np.ndarray
    attrs: dict = field(default_factory=dict)
    differentiable: bool = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(#{self.index} {self.kind} shape={self.shape})"

    # operator sugar, all routed through the owning graph
    def __add__(self, other):
        return self.graph.add(self, other)

    def __radd__(self, other):
        return self.graph.add(other, self)

    def __sub__(self, other):
        return self.graph.sub(self, other)

    def __rsub__(self, other):
        return self.graph.sub(other, self)

    def __mul__(self, other):
        return self.graph.mul(self, other)

    def __rmul__(self, other):
        return self.graph.mul(other, self)

    def __neg__(self):
        return self.graph.neg(self)

    def __matmul__(self, other):
        return self.graph.matmul(self, other)

    def __getitem__(self, index):
        return self.graph.slice(self, index)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _sum_to(x: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and x.shape[i + lead] != 1
    )
    out = x.sum(axis=axes, keepdims=True) if axes else x
    if lead:
        out = out.reshape(out.shape[lead:])
    return out.reshape(shape)


def _unslice(g: np.ndarray, shape: tuple[int, ...], index) -> np.ndarray:
    out = np.zeros(shape)
    out[index] = g
    return out


# Forward kernels: kind -> f(values, attrs)
_FORWARD: dict[str, Callable] = {
    "add": lambda v, a: v[0] + v[1],
    "sub": lambda v, a: v[0] - v[1],
    "mul": lambda v, a: v[0] * v[1],
    "neg": lambda v, a: -v[0],
    "scale": lambda v, a: a["c"] * v[0],
    "shift": lambda v, a: v[0] + a["c"],
    "matmul": lambda v, a: v[0] @ v[1],
    "matmul_t": lambda v, a: v[0] @ v[1].T,
    "transpose": lambda v, a: v[0].T,
    "reshape": lambda v, a: v[0].reshape(a["shape"]),
    "tanh": lambda v, a: np.tanh(v[0]),
    "sigmoid": lambda v, a: _sigmoid(v[0]),
    "relu": lambda v, a: np.maximum(v[0], 0.0),
    "silu": lambda v, a: v[0] * _sigmoid(v[0]),
    "abs": lambda v, a: np.abs(v[0]),
    "step": lambda v, a: (v[0] > 0).astype(np.float64),
    "sign": lambda v, a: np.sign(v[0]),
    "sum": lambda v, a: np.sum(v[0], axis=a["axis"], keepdims=a["keepdims"]),
    "sum_to": lambda v, a: _sum_to(v[0], a["shape"]),
    "broadcast_to": lambda v, a: np.broadcast_to(v[0], a["shape"]).copy(),
    "slice": lambda v, a: np.array(v[0][a["index"]], dtype=np.float64),
    "unslice": lambda v, a: _unslice(v[0], a["shape"], a["index"]),
    "concat": lambda v, a: np.concatenate(v, axis=a["axis"]),
}

_KINKED = {"relu", "abs"}


class _NumpyOps:
    """Adjoint arithmetic on plain arrays (first-order backward)."""

    @staticmethod
    def ref(node: Node):
        return node.value

    add = staticmethod(np.add)
    sub = staticmethod(np.subtract)
    mul = staticmethod(np.multiply)
    neg = staticmethod(np.negative)

    @staticmethod
    def scale(x, c):
        return c * x

    @staticmethod
    def shift(x, c):
        return x + c

    @staticmethod
    def matmul(a, b):
        return a @ b

    @staticmethod
    def matmul_t(a, b):
        return a @ b.T

    @staticmethod
    def transpose(x):
        return x.T

    @staticmethod
    def reshape(x, shape):
        return x.reshape(shape)

    @staticmethod
    def sigmoid(x):
        return _sigmoid(x)

    @staticmethod
    def step(x):
        return (x > 0).astype(np.float64)

    @staticmethod
    def sign(x):
        return np.sign(x)

    @staticmethod
    def sum_to(x, shape):
        return _sum_to(x, shape)

    @staticmethod
    def broadcast_to(x, shape):
        return np.broadcast_to(x, shape)

    @staticmethod
    def slice(x, index):
        return x[index]

    @staticmethod
    def unslice(x, shape, index):
        return _unslice(x, shape, index)


class _GraphOps:
    """Adjoint arithmetic that records nodes (differentiable backward)."""

    def __init__(self, graph: "Graph"):
        self.g = graph

    @staticmethod
    def ref(node: Node):
        return node

    def __getattr__(self, name):
        return getattr(self.g, name)


def _vjp_sum(node, g, ops):
    axis, keepdims = node.attrs["axis"], node.attrs["keepdims"]
    src = node.parents[0].shape
    if axis is not None and not keepdims:
        shape = list(src)
        for ax in ((axis,) if isinstance(axis, int) else axis):
            shape[ax] = 1
        g = ops.reshape(g, tuple(shape))
    return [ops.broadcast_to(g, src)]


def _vjp_matmul(node, g, ops):
    a, b = node.parents
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise GraphError("matmul adjoint expects 2-D operands")
    r = ops.ref
    return [ops.matmul(g, ops.transpose(r(b))), ops.matmul(ops.transpose(r(a)), g)]


def _vjp_silu(node, g, ops):
    # d/dx x*s(x) = s + x*s*(1-s)
    x = ops.ref(node.parents[0])
    s = ops.sigmoid(x)
    ds = ops.mul(s, ops.shift(ops.neg(s), 1.0))
    return [ops.mul(g, ops.add(s, ops.mul(x, ds)))]


def _vjp_concat(node, g, ops):
    axis = node.attrs["axis"]
    out, start = [], 0
    for q in node.parents:
        n = q.shape[axis]
        index = [slice(None)] * node.value.ndim
        index[axis] = slice(start, start + n)
        out.append(ops.slice(g, tuple(index)))
        start += n
    return out


def _vjp_tanh(node, g, ops):
    y = ops.ref(node)
    return [ops.mul(g, ops.shift(ops.neg(ops.mul(y, y)), 1.0))]


def _vjp_sigmoid(node, g, ops):
    y = ops.ref(node)
    return [ops.mul(g, ops.mul(y, ops.shift(ops.neg(y), 1.0)))]


# kind -> f(node, cotangent, ops) returning one cotangent per parent (None: no contribution)
_VJP: dict[str, Callable] = {
    "add": lambda n, g, ops: [ops.sum_to(g, n.parents[0].shape),
                              ops.sum_to(g, n.parents[1].shape)],
    "sub": lambda n, g, ops: [ops.sum_to(g, n.parents[0].shape),
                              ops.sum_to(ops.neg(g), n.parents[1].shape)],
    "mul": lambda n, g, ops: [ops.sum_to(ops.mul(g, ops.ref(n.parents[1])), n.parents[0].shape),
                              ops.sum_to(ops.mul(g, ops.ref(n.parents[0])), n.parents[1].shape)],
    "neg": lambda n, g, ops: [ops.neg(g)],
    "scale": lambda n, g, ops: [ops.scale(g, n.attrs["c"])],
    "shift": lambda n, g, ops: [g],
    "matmul": _vjp_matmul,
    # y = a @ b.T
    "matmul_t": lambda n, g, ops: [ops.matmul(g, ops.ref(n.parents[1])),
                                   ops.matmul(ops.transpose(g), ops.ref(n.parents[0]))],
    "transpose": lambda n, g, ops: [ops.transpose(g)],
    "reshape": lambda n, g, ops: [ops.reshape(g, n.parents[0].shape)],
    "tanh": _vjp_tanh,
    "sigmoid": _vjp_sigmoid,
    "silu": _vjp_silu,
    "relu": lambda n, g, ops: [ops.mul(g, ops.step(ops.ref(n.parents[0])))],
    "abs": lambda n, g, ops: [ops.mul(g, ops.sign(ops.ref(n.parents[0])))],
    "step": lambda n, g, ops: [None],
    "sign": lambda n, g, ops: [None],
    "sum": _vjp_sum,
    "sum_to": lambda n, g, ops: [ops.broadcast_to(g, n.parents[0].shape)],
    "broadcast_to": lambda n, g, ops: [ops.sum_to(g, n.parents[0].shape)],
    "slice": lambda n, g, ops: [ops.unslice(g, n.parents[0].shape, n.attrs["index"])],
    "unslice": lambda n, g, ops: [ops.slice(g, n.attrs["index"])],
    "concat": _vjp_concat,
}


def _vjp(node: Node, g, ops) -> list:
    """Return one cotangent per parent (``None`` for no contribution)."""
    try:
        rule = _VJP[node.kind]
    except KeyError:
        raise GraphError(f"no adjoint for operation {node.kind!r}") from None
    return rule(node, g, ops)


class Graph:
    """Append-only record of eagerly evaluated operations.

    A graph is single-owner; nodes from one graph cannot be mixed with another.
    ``diagnostics`` collects notes about adjoints evaluated at a kink
    (ReLU/abs at exactly zero use subgradient 0).
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.diagnostics: list[str] = []

    def __len__(self) -> int:
        return len(self.nodes)

    # construction ----------------------------------------------------------------

    def _append(self, kind, parents, value, attrs=None, differentiable=False) -> Node:
        if type(value) is not np.ndarray or value.dtype != np.float64:
            value = np.asarray(value, dtype=np.float64)
        # one reduction: any NaN or infinity makes the sum NaN or infinite
        total = np.add.reduce(value, axis=None)
        if not math.isfinite(total) and not np.isfinite(value).all():
            raise NonFiniteError(f"non-finite value produced by {kind!r}")
        node = Node(self, len(self.nodes), kind, tuple(parents), value, attrs or {},
                    differentiable)
        self.nodes.append(node)
        return node

    def _own(self, x) -> Node:
        if isinstance(x, Node):
            if x.graph is not self:
                raise GraphError("node belongs to a different graph")
            return x
        return self.constant(x)

    def lift(self, value, differentiable: bool = True) -> Node:
        """Record an input value as a leaf node."""
        value = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError("cannot lift a non-finite value")
        return self._append("leaf", (), value, differentiable=differentiable)

    def constant(self, value) -> Node:
        return self.lift(value, differentiable=False)

    def elementary(self, kind: str, *inputs, **attrs) -> Node:
        """Apply a named operation to nodes (or constants) of this graph."""
        if kind not in _FORWARD:
            raise GraphError(f"unknown operation {kind!r}")
        parents = [self._own(x) for x in inputs]
        try:
            value = _FORWARD[kind]([q.value for q in parents], attrs)
        except ValueError as exc:
            raise GraphError(f"{kind}: incompatible shapes "
                             f"{[q.shape for q in parents]}") from exc
        return self._append(kind, parents, value, attrs)

    def add(self, a, b):
        return self.elementary("add", a, b)

    def sub(self, a, b):
        return self.elementary("sub", a, b)

    def mul(self, a, b):
        return self.elementary("mul", a, b)

    def neg(self, a):
        return self.elementary("neg", a)

    def scale(self, a, c: float):
        return self.elementary("scale", a, c=float(c))

    def shift(self, a, c: float):
        return self.elementary("shift", a, c=float(c))

    def matmul(self, a, b):
        a, b = self._own(a), self._own(b)
        if a.value.ndim == 2 and b.value.ndim == 1:
            return self.matvec(a, b)
        if a.value.ndim != 2 or b.value.ndim != 2:
            raise GraphError(f"matmul: expected matrices, got {a.shape} and {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise GraphError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        return self.elementary("matmul", a, b)

    def matvec(self, a, x):
        a, x = self._own(a), self._own(x)
        if a.value.ndim != 2 or x.value.ndim != 1 or a.shape[1] != x.shape[0]:
            raise GraphError(f"matvec: incompatible shapes {a.shape} and {x.shape}")
        col = self.reshape(x, (x.shape[0], 1))
        return self.reshape(self.elementary("matmul", a, col), (a.shape[0],))

    def matmul_t(self, a, b):
        """``a @ b.T`` for matrices, without recording a transpose."""
        a, b = self._own(a), self._own(b)
        if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[1]:
            raise GraphError(f"matmul_t: incompatible shapes {a.shape} and {b.shape}")
        return self.elementary("matmul_t", a, b)

    def transpose(self, a):
        return self.elementary("transpose", a)

    def reshape(self, a, shape):
        return self.elementary("reshape", a, shape=tuple(shape))

    def tanh(self, a):
        return self.elementary("tanh", a)

    def sigmoid(self, a):
        return self.elementary("sigmoid", a)

    def relu(self, a):
        return self.elementary("relu", a)

    def silu(self, a):
        return self.elementary("silu", a)

    def abs(self, a):
        return self.elementary("abs", a)

    def step(self, a):
        return self.elementary("step", a)

    def sign(self, a):
        return self.elementary("sign", a)

    def sum(self, a, axis=None, keepdims: bool = False):
        return self.elementary("sum", a, axis=axis, keepdims=keepdims)

    def sum_to(self, a, shape):
        a = self._own(a)
        if a.shape == tuple(shape):
            return a
        return self.elementary("sum_to", a, shape=tuple(shape))

    def broadcast_to(self, a, shape):
        a = self._own(a)
        if a.shape == tuple(shape):
            return a
        return self.elementary("broadcast_to", a, shape=tuple(shape))

    def slice(self, a, index):
        return self.elementary("slice", a, index=index)

    def unslice(self, a, shape, index):
        return self.elementary("unslice", a, shape=tuple(shape), index=index)

    def concat(self, items: Sequence, axis: int = -1):
        items = [self._own(x) for x in items]
        if len(items) == 1:
            return items[0]
        axis = axis % items[0].value.ndim
        return self.elementary("concat", *items, axis=axis)

    def square(self, a):
        return self.mul(a, a)

    # differentiation -------------------------------------------------------------

    def _check_request(self, output: Node, wrt: Iterable[Node]) -> list[Node]:
        output = self._own(output)
        if output.value.size != 1:
            raise GraphError(f"backward needs a scalar output, got shape {output.shape}")
        wrt = list(wrt)
        for w in wrt:
            if not isinstance(w, Node) or w.graph is not self:
                raise GraphError("gradient requested for a node of a different graph")
        return wrt

    def _sweep(self, output: Node, wrt: list[Node], ops) -> dict[int, object]:
        # Only nodes that lie between a requested node and the output matter.
        lo = min((w.index for w in wrt), default=output.index)
        needed = {w.index for w in wrt}
        for node in self.nodes[lo: output.index + 1]:
            for q in node.parents:
                if q.index in needed:
                    needed.add(node.index)
                    break
        seed = np.ones(output.shape)
        grads: dict[int, object] = {
            output.index: seed if ops is _NumpyOps else self.constant(seed)
        }
        for node in reversed(self.nodes[lo: output.index + 1]):
            g = grads.get(node.index)
            if g is None or not node.parents:
                continue
            if node.kind in _KINKED and np.any(node.parents[0].value == 0.0):
                self.diagnostics.append(
                    f"{node.kind} adjoint at node #{node.index} evaluated at 0 "
                    "(subgradient 0 used)")
            contribs = _vjp(node, g, ops)
            for q, c in zip(node.parents, contribs):
                if c is None or q.index not in needed:
                    continue
                prev = grads.get(q.index)
                grads[q.index] = c if prev is None else ops.add(prev, c)
        return grads

    def backward(self, output: Node, wrt: Sequence[Node]) -> dict[int, np.ndarray]:
        """Numeric gradients of a scalar node, keyed by node index.

        ``wrt`` may name any node, not only leaves: the result is then the
        partial derivative with that node's value treated as an independent
        input. Unused nodes receive zeros of matching shape.
        """
        wrt = self._check_request(output, wrt)
        grads = self._sweep(output, wrt, _NumpyOps)
        return {
            w.index: np.array(grads[w.index], dtype=np.float64).reshape(w.shape)
            if w.index in grads else np.zeros(w.shape)
            for w in wrt
        }

    def backward_as_graph(self, output: Node, wrt: Sequence[Node]) -> list[Node]:
        """Gradients of a scalar node emitted as differentiable nodes."""
        wrt = self._check_request(output, wrt)
        grads = self._sweep(output, wrt, _GraphOps(self))
        out = []
        for w in wrt:
            g = grads.get(w.index)
            out.append(self.constant(np.zeros(w.shape)) if g is None else g)
        return out

    def grad(self, output: Node, wrt: Node) -> Node:
        return self.backward_as_graph(output, [wrt])[0]


def finite_difference_check(f: Callable[[Graph, Node], Node], x, step: float = 1e-5) -> float:
    """Compare reverse-mode gradients of ``f`` with central differences.

    ``f(graph, x_node)`` must build a scalar node. Returns the largest
    component discrepancy, relative where the gradient is larger than 1 and
    absolute otherwise.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64)
    g = Graph()
    xn = g.lift(x)
    analytic = g.backward(f(g, xn), [xn])[xn.index]

    def value(v):
        gg = Graph()
        return float(f(gg, gg.lift(v)).value.reshape(()))

    numeric = np.zeros_like(x)
    flat = numeric.reshape(-1)
    for i in range(x.size):
        xp = x.copy().reshape(-1)
        xm = x.copy().reshape(-1)
        xp[i] += step
        xm[i] -= step
        flat[i] = (value(xp.reshape(x.shape)) - value(xm.reshape(x.shape))) / (2 * step)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0
