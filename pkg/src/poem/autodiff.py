"""Minimal define-by-run reverse-mode autodiff over float64 numpy arrays.

A :class:`Graph` is an append-only list of nodes. Leaves are inputs (bound at
evaluation time), parameters (carry a default value, can be overridden) and
constants. Every other node applies one primitive op to earlier nodes, so the
node list is topologically ordered by construction.

    g = Graph()
    x = g.input("x")
    w = g.param("w", np.ones((2, 1)))
    loss = g.sum(g.square(x @ w))
    values = evaluate(g, {"x": np.array([[1.0, 2.0]])})
    grads = gradient(g, values, loss, [w])

Broadcasting follows the size-1-axis rule only: both operands must have the
same rank and every axis must match or be 1 on one side.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

Tensor = np.ndarray

LEAF_OPS = ("input", "param", "constant")


class GraphError(Exception):
    """Error raised while evaluating or differentiating a graph."""

    def __init__(self, message: str, node: int | None = None, op: str | None = None):
        self.node = node
        self.op = op
        prefix = "" if node is None else f"node {node} ({op}): "
        super().__init__(prefix + message)


class ShapeError(GraphError):
    pass


class NonFiniteError(GraphError):
    pass


@dataclass(frozen=True)
class Node:
    """Handle to one node of a graph. Supports arithmetic operators."""

    graph: "Graph"
    index: int

    @property
    def op(self) -> str:
        return self.graph.ops[self.index]

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

    def __truediv__(self, other):
        return self.graph.div(self, other)

    def __rtruediv__(self, other):
        return self.graph.div(other, self)

    def __matmul__(self, other):
        return self.graph.matmul(self, other)

    def __neg__(self):
        return self.graph.neg(self)

    def __repr__(self) -> str:
        return f"Node({self.index}, {self.op})"


def _as_tensor(value) -> Tensor:
    arr = np.asarray(value, dtype=np.float64).view()
    arr.flags.writeable = False
    return arr


class Graph:
    """Append-only computation graph."""

    def __init__(self):
        self.ops: list[str] = []
        self.parents: list[tuple[int, ...]] = []
        self.attrs: list[dict] = []
        self.defaults: list[Tensor | None] = []
        self.names: dict[str, int] = {}
        self.param_ids: list[int] = []
        self.input_ids: list[int] = []

    def __len__(self) -> int:
        return len(self.ops)

    @property
    def nodes(self) -> list[tuple[str, tuple[int, ...]]]:
        return list(zip(self.ops, self.parents))

    def node(self, key) -> Node:
        if isinstance(key, Node):
            return key
        if isinstance(key, str):
            return Node(self, self.names[key])
        return Node(self, int(key))

    def _push(self, op: str, parents: Sequence[int] = (), default=None, name=None, **attrs) -> Node:
        index = len(self.ops)
        self.ops.append(op)
        self.parents.append(tuple(parents))
        self.attrs.append(attrs)
        self.defaults.append(default)
        if name is not None:
            if name in self.names:
                raise GraphError(f"duplicate node name {name!r}")
            self.names[name] = index
        return Node(self, index)

    def _ref(self, x) -> int:
        if isinstance(x, Node):
            if x.graph is not self:
                raise GraphError("node belongs to a different graph")
            return x.index
        return self.constant(x).index

    # leaves

    def input(self, name: str, value=None) -> Node:
        node = self._push("input", default=None if value is None else _as_tensor(value), name=name)
        self.input_ids.append(node.index)
        return node

    def param(self, name: str, value) -> Node:
        node = self._push("param", default=_as_tensor(value), name=name)
        self.param_ids.append(node.index)
        return node

    def constant(self, value) -> Node:
        return self._push("constant", default=_as_tensor(value))

    # primitives

    def add(self, a, b) -> Node:
        return self._push("add", (self._ref(a), self._ref(b)))

    def sub(self, a, b) -> Node:
        return self._push("sub", (self._ref(a), self._ref(b)))

    def mul(self, a, b) -> Node:
        return self._push("mul", (self._ref(a), self._ref(b)))

    def div(self, a, b) -> Node:
        return self._push("div", (self._ref(a), self._ref(b)))

    def matmul(self, a, b) -> Node:
        return self._push("matmul", (self._ref(a), self._ref(b)))

    def neg(self, a) -> Node:
        return self._push("neg", (self._ref(a),))

    def square(self, a) -> Node:
        return self._push("square", (self._ref(a),))

    def exp(self, a) -> Node:
        return self._push("exp", (self._ref(a),))

    def log(self, a) -> Node:
        return self._push("log", (self._ref(a),))

    def softplus(self, a) -> Node:
        return self._push("softplus", (self._ref(a),))

    def tanh(self, a) -> Node:
        return self._push("tanh", (self._ref(a),))

    def relu(self, a) -> Node:
        return self._push("relu", (self._ref(a),))

    def sum(self, a, axes=None, keepdims: bool = False) -> Node:
        return self._push("sum", (self._ref(a),), axes=_axes(axes), keepdims=keepdims)

    def mean(self, a, axes=None, keepdims: bool = False) -> Node:
        return self._push("mean", (self._ref(a),), axes=_axes(axes), keepdims=keepdims)

    def logsumexp(self, a, axis: int, keepdims: bool = False) -> Node:
        return self._push("logsumexp", (self._ref(a),), axis=int(axis), keepdims=keepdims)

    def concat(self, items: Sequence, axis: int = 0) -> Node:
        return self._push("concat", tuple(self._ref(x) for x in items), axis=int(axis))

    def index_select(self, a, indices, axis: int = 0) -> Node:
        idx = np.asarray(indices, dtype=np.int64).ravel()
        return self._push("index_select", (self._ref(a),), indices=idx, axis=int(axis))

    def scale(self, a, c: float) -> Node:
        return self._push("scale", (self._ref(a),), c=float(c))

    def shift(self, a, c: float) -> Node:
        return self._push("shift", (self._ref(a),), c=float(c))

    def reshape(self, a, shape: Sequence[int]) -> Node:
        return self._push("reshape", (self._ref(a),), shape=tuple(int(s) for s in shape))

    # composites

    def clamp(self, a, lo: float, hi: float) -> Node:
        """lo + relu(a - lo) - relu(a - hi): identity gradient inside (lo, hi), zero outside."""
        inner = self.sub(self.relu(self.shift(a, -lo)), self.relu(self.shift(a, -hi)))
        return self.shift(inner, lo)


def _axes(axes) -> tuple[int, ...] | None:
    if axes is None:
        return None
    if isinstance(axes, int):
        return (axes,)
    return tuple(int(a) for a in axes)


# forward rules


def _broadcast_shape(sa: tuple, sb: tuple) -> tuple:
    if len(sa) != len(sb):
        raise ValueError(f"rank mismatch {sa} vs {sb}")
    out = []
    for x, y in zip(sa, sb):
        if x == y or y == 1:
            out.append(x)
        elif x == 1:
            out.append(y)
        else:
            raise ValueError(f"incompatible shapes {sa} and {sb}")
    return tuple(out)


def _binary(fn):
    def forward(attrs, a, b):
        _broadcast_shape(a.shape, b.shape)
        return fn(a, b)

    return forward


def _matmul_fwd(attrs, a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul needs (n,k)@(k,m), got {a.shape} @ {b.shape}")
    return a @ b


def _reduce_axes(attrs, ndim):
    axes = attrs["axes"]
    if axes is None:
        return tuple(range(ndim))
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for rank {ndim}")
    return tuple(ax % ndim for ax in axes)


def _sum_fwd(attrs, a):
    return np.sum(a, axis=_reduce_axes(attrs, a.ndim), keepdims=attrs["keepdims"])


def _mean_fwd(attrs, a):
    return np.mean(a, axis=_reduce_axes(attrs, a.ndim), keepdims=attrs["keepdims"])


def _lse_fwd(attrs, a):
    axis = attrs["axis"]
    if not -a.ndim <= axis < a.ndim:
        raise ValueError(f"axis {axis} out of range for rank {a.ndim}")
    m = np.max(a, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))
    return out if attrs["keepdims"] else np.squeeze(out, axis=axis)


def _concat_fwd(attrs, *items):
    return np.concatenate(items, axis=attrs["axis"])


def _index_fwd(attrs, a):
    idx = attrs["indices"]
    axis = attrs["axis"]
    n = a.shape[axis]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise ValueError(f"index out of range for axis of extent {n}")
    return np.take(a, idx, axis=axis)


def _reshape_fwd(attrs, a):
    shape = attrs["shape"]
    if int(np.prod(shape)) != a.size:
        raise ValueError(f"cannot reshape {a.shape} to {shape}")
    return a.reshape(shape)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


FORWARD: dict[str, Callable] = {
    "add": _binary(np.add),
    "sub": _binary(np.subtract),
    "mul": _binary(np.multiply),
    "div": _binary(np.divide),
    "matmul": _matmul_fwd,
    "neg": lambda attrs, a: -a,
    "square": lambda attrs, a: a * a,
    "exp": lambda attrs, a: np.exp(a),
    "log": lambda attrs, a: np.log(a),
    "softplus": lambda attrs, a: np.logaddexp(0.0, a),
    "tanh": lambda attrs, a: np.tanh(a),
    "relu": lambda attrs, a: np.maximum(a, 0.0),
    "sum": _sum_fwd,
    "mean": _mean_fwd,
    "logsumexp": _lse_fwd,
    "concat": _concat_fwd,
    "index_select": _index_fwd,
    "scale": lambda attrs, a: a * attrs["c"],
    "shift": lambda attrs, a: a + attrs["c"],
    "reshape": _reshape_fwd,
}


# backward rules: (attrs, grad_out, out, *inputs) -> tuple of input grads


def _unbroadcast(grad: Tensor, shape: tuple) -> Tensor:
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = np.sum(grad, axis=axes, keepdims=True)
    return grad


def _expand_reduced(attrs, g, a):
    axes = _reduce_axes(attrs, a.ndim)
    if not attrs["keepdims"]:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, a.shape), axes


def _sum_bwd(attrs, g, out, a):
    full, _ = _expand_reduced(attrs, g, a)
    return (np.array(full),)


def _mean_bwd(attrs, g, out, a):
    full, axes = _expand_reduced(attrs, g, a)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return (full / count,)


def _lse_bwd(attrs, g, out, a):
    axis = attrs["axis"] % a.ndim
    if not attrs["keepdims"]:
        g = np.expand_dims(g, axis)
        out = np.expand_dims(out, axis)
    return (g * np.exp(a - out),)


def _concat_bwd(attrs, g, out, *items):
    axis = attrs["axis"]
    splits = np.cumsum([x.shape[axis] for x in items])[:-1]
    return tuple(np.split(g, splits, axis=axis))


def _index_bwd(attrs, g, out, a):
    axis = attrs["axis"] % a.ndim
    grad = np.zeros(a.shape)
    moved = np.moveaxis(grad, axis, 0)
    np.add.at(moved, attrs["indices"], np.moveaxis(g, axis, 0))
    return (grad,)


BACKWARD: dict[str, Callable] = {
    "add": lambda attrs, g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    "sub": lambda attrs, g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    "mul": lambda attrs, g, out, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
    "div": lambda attrs, g, out, a, b: (
        _unbroadcast(g / b, a.shape),
        _unbroadcast(-g * out / b, b.shape),
    ),
    "matmul": lambda attrs, g, out, a, b: (g @ b.T, a.T @ g),
    "neg": lambda attrs, g, out, a: (-g,),
    "square": lambda attrs, g, out, a: (2.0 * a * g,),
    "exp": lambda attrs, g, out, a: (g * out,),
    "log": lambda attrs, g, out, a: (g / a,),
    "softplus": lambda attrs, g, out, a: (g * _sigmoid(a),),
    "tanh": lambda attrs, g, out, a: (g * (1.0 - out * out),),
    "relu": lambda attrs, g, out, a: (g * (a > 0.0),),
    "sum": _sum_bwd,
    "mean": _mean_bwd,
    "logsumexp": _lse_bwd,
    "concat": _concat_bwd,
    "index_select": _index_bwd,
    "scale": lambda attrs, g, out, a: (g * attrs["c"],),
    "shift": lambda attrs, g, out, a: (g,),
    "reshape": lambda attrs, g, out, a: (g.reshape(a.shape),),
}


class Values(list):
    """Node values from one forward pass; index by position or by Node."""

    def __getitem__(self, key):
        if isinstance(key, Node):
            key = key.index
        return super().__getitem__(key)


def _resolve_bindings(graph: Graph, bindings: Mapping | None) -> dict[int, Tensor]:
    out: dict[int, Tensor] = {}
    for key, value in (bindings or {}).items():
        idx = graph.node(key).index
        if graph.ops[idx] not in ("input", "param"):
            raise GraphError("only inputs and params can be bound", idx, graph.ops[idx])
        out[idx] = _as_tensor(value)
    return out


def evaluate(graph: Graph, bindings: Mapping | None = None) -> Values:
    """Forward pass. ``bindings`` maps input/param nodes (or their names) to arrays."""
    bound = _resolve_bindings(graph, bindings)
    values = Values()
    with np.errstate(all="ignore"):
        for i, op in enumerate(graph.ops):
            if op in LEAF_OPS:
                value = bound.get(i, graph.defaults[i])
                if value is None:
                    raise GraphError("unbound input", i, op)
            else:
                args = [values[p] for p in graph.parents[i]]
                try:
                    value = FORWARD[op](graph.attrs[i], *args)
                except ValueError as exc:
                    raise ShapeError(str(exc), i, op) from None
                value = np.asarray(value, dtype=np.float64)
            if not np.all(np.isfinite(value)):
                raise NonFiniteError("non-finite value", i, op)
            values.append(value)
    return values


def gradient(graph: Graph, values: Sequence[Tensor], output, wrt: Iterable) -> dict[Node, Tensor]:
    """Reverse pass from a scalar ``output`` to each node in ``wrt``.

    Nodes in ``wrt`` that do not influence the output get zero gradients.
    """
    out_idx = graph.node(output).index
    if np.shape(values[out_idx]) != ():
        raise GraphError(f"gradient needs a scalar output, got shape {np.shape(values[out_idx])}",
                         out_idx, graph.ops[out_idx])
    targets = [graph.node(w) for w in wrt]
    want = {t.index for t in targets}

    needs = [False] * (out_idx + 1)
    for i in range(out_idx + 1):
        needs[i] = i in want or any(needs[p] for p in graph.parents[i])

    grads: list[Tensor | None] = [None] * (out_idx + 1)
    grads[out_idx] = np.ones(())
    with np.errstate(all="ignore"):
        for i in range(out_idx, -1, -1):
            g = grads[i]
            op = graph.ops[i]
            if g is None or op in LEAF_OPS:
                continue
            parents = graph.parents[i]
            if not any(needs[p] for p in parents):
                continue
            inputs = [values[p] for p in parents]
            if op == "matmul":  # skip the product nobody needs (e.g. d/dx of a data input)
                a, b = inputs
                pgrads = (g @ b.T if needs[parents[0]] else None, a.T @ g if needs[parents[1]] else None)
            else:
                pgrads = BACKWARD[op](graph.attrs[i], g, values[i], *inputs)
            for p, pg in zip(parents, pgrads):
                if not needs[p]:
                    continue
                grads[p] = pg if grads[p] is None else grads[p] + pg

    result = {}
    for t in targets:
        g = grads[t.index] if t.index <= out_idx else None
        result[t] = np.zeros(np.shape(values[t.index])) if g is None else np.asarray(g, dtype=np.float64)
    return result


def finite_diff_check(graph: Graph, scalar_output, params: Iterable, eps: float = 1e-5,
                      bindings: Mapping | None = None, floor: float = 1e-6) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    Every coordinate of every node in ``params`` is perturbed. The error is
    |a - n| / max(|a|, |n|, floor); the floor keeps coordinates whose true
    gradient is zero (central differences then return roundoff near 1e-11)
    from dominating.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = dict(_resolve_bindings(graph, bindings))
    values = evaluate(graph, base)
    nodes = [graph.node(p) for p in params]
    analytic = gradient(graph, values, scalar_output, nodes)
    out_idx = graph.node(scalar_output).index

    worst = 0.0
    for node in nodes:
        theta = np.array(values[node.index], dtype=np.float64)
        flat = theta.reshape(-1)
        ana = analytic[node].reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            f_plus = evaluate(graph, {**base, node.index: theta})[out_idx]
            flat[k] = orig - eps
            f_minus = evaluate(graph, {**base, node.index: theta})[out_idx]
            flat[k] = orig
            numeric = (float(f_plus) - float(f_minus)) / (2.0 * eps)
            err = abs(ana[k] - numeric) / max(floor, abs(ana[k]), abs(numeric))
            worst = max(worst, err)
    return worst
