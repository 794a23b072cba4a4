"""Static-graph reverse-mode automatic differentiation over numpy arrays.

A :class:`Graph` is built once from named leaves and operations, then
evaluated any number of times with :func:`forward` and differentiated with
:func:`backward`::

    g = Graph()
    x = g.leaf("x")
    y = ad.sum(x * x)
    forward(g, {"x": np.array([1.0, 2.0])})
    backward(g, y)["x"]            # array([2., 4.])

Every op also accepts plain arrays, in which case it evaluates eagerly with
numpy. Model code (MLPs, log-densities, bounds) is therefore written once and
serves both the no-grad fast path and the differentiable path.

Primitives: add, mul, matmul, exp, log, tanh, elu, relu, square, sum, mean,
max, broadcast_to, plus the structural helpers concat, slice_last, clip,
minimum, stop_gradient, the fused logsumexp and squash_logdet.
"""

from __future__ import annotations

import numpy as np

from . import kernels

__all__ = [
    "Graph",
    "GraphError",
    "Node",
    "backward",
    "forward",
]


class GraphError(Exception):
    """Raised for malformed graphs or failed evaluation; names the offending node."""

    def __init__(self, message, node=None):
        self.node = node
        if node is not None:
            message = f"node {node.id} ({node.op}{' ' + node.name if node.name else ''}): {message}"
        super().__init__(message)


class Node:
    """Handle to an operation record inside a :class:`Graph`."""

    __slots__ = ("graph", "id", "op", "inputs", "attrs", "name")
    # numpy must defer to our reflected operators
    __array_ufunc__ = None

    def __init__(self, graph, id, op, inputs, attrs, name=None):
        self.graph = graph
        self.id = id
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.name = name

    def __repr__(self):
        return f"Node({self.id}, {self.op}{', ' + self.name if self.name else ''})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Node):
            raise TypeError("division by a node is not supported; multiply by exp(-log(x))")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    @property
    def value(self):
        """Cached output of the last forward pass."""
        return self.graph.value(self)


class Graph:
    """Ordered list of operation records. Inputs always precede consumers."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: dict[str, Node] = {}
        self.outputs: dict[str, Node] = {}
        self._values: list | None = None
        self._pending = False
        self._live_key = None
        self._live: list[Node] = []

    def leaf(self, name: str) -> Node:
        if name in self.leaves:
            return self.leaves[name]
        node = self._append("leaf", (), {}, name)
        self.leaves[name] = node
        return node

    def constant(self, value) -> Node:
        return self._append("const", (), {"value": np.asarray(value, dtype=np.float64)})

    def output(self, name: str, node: Node) -> Node:
        self.outputs[name] = node
        return node

    def value(self, node: Node):
        if self._values is None:
            raise GraphError("graph has not been evaluated", node)
        return self._values[node.id]

    def _append(self, op, inputs, attrs, name=None) -> Node:
        node = Node(self, len(self.nodes), op, inputs, attrs, name)
        self.nodes.append(node)
        return node

    def __len__(self):
        return len(self.nodes)

    def live_nodes(self) -> list[Node]:
        """Nodes that contribute to at least one named output (all nodes if none)."""
        key = (len(self.nodes), tuple(n.id for n in self.outputs.values()))
        if key != self._live_key:
            if not self.outputs:
                self._live = list(self.nodes)
            else:
                keep = [False] * len(self.nodes)
                for n in self.outputs.values():
                    keep[n.id] = True
                for node in reversed(self.nodes):
                    if keep[node.id]:
                        for i in node.inputs:
                            keep[i] = True
                self._live = [n for n in self.nodes if keep[n.id]]
            self._live_key = key
        return self._live


# ---------------------------------------------------------------------------
# op construction


def _graph_of(args):
    graph = None
    for a in args:
        if isinstance(a, Node):
            if graph is None:
                graph = a.graph
            elif a.graph is not graph:
                raise GraphError("operands belong to different graphs", a)
    return graph


def _as_node(graph, x):
    return x if isinstance(x, Node) else graph.constant(x)


def _apply(op, args, **attrs):
    graph = _graph_of(args)
    if graph is None:
        return _FORWARD[op](*[np.asarray(a, dtype=np.float64) for a in args], **attrs)
    ids = tuple(_as_node(graph, a).id for a in args)
    return graph._append(op, ids, attrs)


def add(a, b):
    return _apply("add", (a, b))


def mul(a, b):
    return _apply("mul", (a, b))


def neg(a):
    return mul(a, -1.0)


def sub(a, b):
    return add(a, neg(b))


def matmul(x, w):
    return _apply("matmul", (x, w))


def exp(x):
    return _apply("exp", (x,))


def log(x):
    return _apply("log", (x,))


def tanh(x):
    return _apply("tanh", (x,))


def elu(x):
    return _apply("elu", (x,))


def relu(x):
    return _apply("relu", (x,))


def square(x):
    return _apply("square", (x,))


def sum(x, axis=None, keepdims=False):  # noqa: A001
    return _apply("sum", (x,), axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    return _apply("mean", (x,), axis=axis, keepdims=keepdims)


def max(x, axis=None, keepdims=False):  # noqa: A001
    return _apply("max", (x,), axis=axis, keepdims=keepdims)


def broadcast_to(x, shape):
    return _apply("broadcast_to", (x,), shape=tuple(shape))


def expand_dims(x, axis):
    return _apply("expand_dims", (x,), axis=axis)


def concat(xs, axis=-1):
    return _apply("concat", tuple(xs), axis=axis)


def slice_last(x, start, stop):
    """``x[..., start:stop]``."""
    return _apply("slice_last", (x,), start=start, stop=stop)


def clip(x, lo, hi):
    """Clamp; gradient passes only where ``lo <= x <= hi``."""
    return _apply("clip", (x,), lo=lo, hi=hi)


def minimum(a, b):
    return _apply("minimum", (a, b))


def stop_gradient(x):
    return _apply("stop_gradient", (x,))


def logsumexp(x, axis=-1):
    """Overflow-safe log-sum-exp over the last axis (only ``axis=-1``)."""
    if axis not in (-1,):
        raise ValueError("logsumexp reduces over the last axis only")
    return _apply("logsumexp", (x,))


def log_mean_exp(x):
    """``log(mean(exp(x)))`` over the last axis."""
    return _apply("log_mean_exp", (x,))


def squash_logdet(u):
    """Elementwise ``log(1 - tanh(u)**2)``."""
    return _apply("squash_logdet", (u,))


# ---------------------------------------------------------------------------
# forward rules


def _reduce_fwd(fn):
    def f(x, axis=None, keepdims=False):
        return fn(x, axis=axis, keepdims=keepdims)

    return f


def _lme_fwd(x):
    return kernels.logsumexp_last(x) - np.log(x.shape[-1])


_FORWARD = {
    "add": np.add,
    "mul": np.multiply,
    "matmul": np.matmul,
    "exp": np.exp,
    "log": np.log,
    "tanh": np.tanh,
    "elu": kernels.elu,
    "relu": lambda x: np.maximum(x, 0.0),
    "square": np.square,
    "sum": _reduce_fwd(np.sum),
    "mean": _reduce_fwd(np.mean),
    "max": _reduce_fwd(np.max),
    "broadcast_to": lambda x, shape: np.broadcast_to(x, shape),
    "expand_dims": lambda x, axis: np.expand_dims(x, axis),
    "concat": lambda *xs, axis: np.concatenate(xs, axis=axis),
    "slice_last": lambda x, start, stop: x[..., start:stop],
    "clip": lambda x, lo, hi: np.clip(x, lo, hi),
    "minimum": np.minimum,
    "stop_gradient": lambda x: x,
    "logsumexp": kernels.logsumexp_last,
    "log_mean_exp": _lme_fwd,
    "squash_logdet": kernels.squash_logdet,
}


# ---------------------------------------------------------------------------
# backward rules: (g, out, *inputs, **attrs) -> tuple of input gradients


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _expand_reduced(g, x_shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, x_shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(x_shape) for a in axes)
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, x_shape)


def _bwd_add(g, out, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _bwd_mul(g, out, a, b):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _bwd_matmul(g, out, x, w):
    if w.ndim != 2:
        raise ValueError("matmul differentiates only against 2-D right operands")
    gx = g @ w.T
    gw = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    return _unbroadcast(gx, x.shape), gw


def _bwd_sum(g, out, x, axis=None, keepdims=False):
    return (_expand_reduced(g, x.shape, axis, keepdims),)


def _bwd_mean(g, out, x, axis=None, keepdims=False):
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return (_expand_reduced(g, x.shape, axis, keepdims) / n,)


def _bwd_max(g, out, x, axis=None, keepdims=False):
    o = _expand_reduced(out, x.shape, axis, keepdims)
    mask = (x == o).astype(np.float64)
    count = mask.sum(axis=axis, keepdims=True) if axis is not None else mask.sum()
    return (_expand_reduced(g, x.shape, axis, keepdims) * mask / count,)


def _bwd_concat(g, out, *xs, axis):
    grads = []
    start = 0
    for x in xs:
        n = x.shape[axis]
        idx = [slice(None)] * g.ndim
        idx[axis] = slice(start, start + n)
        grads.append(_unbroadcast(g[tuple(idx)], x.shape))
        start += n
    return tuple(grads)


def _bwd_slice_last(g, out, x, start, stop):
    gx = np.zeros_like(x)
    gx[..., start:stop] = g
    return (gx,)


def _bwd_logsumexp(g, out, x):
    return (np.expand_dims(g, -1) * kernels.softmax_last(x, out),)


def _bwd_lme(g, out, x):
    lse = out + np.log(x.shape[-1])
    return (np.expand_dims(g, -1) * kernels.softmax_last(x, lse),)


def _bwd_minimum(g, out, a, b):
    take_a = (a <= b).astype(np.float64)
    return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * (1.0 - take_a), b.shape)


_BACKWARD = {
    "add": _bwd_add,
    "mul": _bwd_mul,
    "matmul": _bwd_matmul,
    "exp": lambda g, out, x: (g * out,),
    "log": lambda g, out, x: (g / x,),
    "tanh": lambda g, out, x: (g * (1.0 - out * out),),
    "elu": lambda g, out, x: (kernels.elu_grad(x, g),),
    "relu": lambda g, out, x: (g * (x > 0.0),),
    "square": lambda g, out, x: (2.0 * g * x,),
    "sum": _bwd_sum,
    "mean": _bwd_mean,
    "max": _bwd_max,
    "broadcast_to": lambda g, out, x, shape: (_unbroadcast(g, x.shape),),
    "expand_dims": lambda g, out, x, axis: (np.reshape(g, x.shape),),
    "concat": _bwd_concat,
    "slice_last": _bwd_slice_last,
    "clip": lambda g, out, x, lo, hi: (g * ((x >= lo) & (x <= hi)),),
    "minimum": _bwd_minimum,
    "stop_gradient": lambda g, out, x: (None,),
    "logsumexp": _bwd_logsumexp,
    "log_mean_exp": _bwd_lme,
    "squash_logdet": lambda g, out, x: (kernels.squash_logdet_grad(x, g),),
}

PRIMITIVES = frozenset(_BACKWARD)


# ---------------------------------------------------------------------------
# evaluation


def forward(graph: Graph, inputs: dict) -> dict:
    """Evaluate every node with the given leaf bindings.

    Returns the values of the graph's named outputs. Intermediate values are
    cached on the graph for :func:`backward` and :attr:`Node.value`.
    """
    live = graph.live_nodes()
    missing = [n.name for n in live if n.op == "leaf" and n.name not in inputs]
    if missing:
        raise GraphError(f"unbound leaves: {', '.join(sorted(missing))}")
    values: list = [None] * len(graph.nodes)
    for node in live:
        op = node.op
        if op == "leaf":
            values[node.id] = np.asarray(inputs[node.name], dtype=np.float64)
        elif op == "const":
            values[node.id] = node.attrs["value"]
        else:
            args = [values[i] for i in node.inputs]
            try:
                with np.errstate(all="ignore"):
                    values[node.id] = _FORWARD[op](*args, **node.attrs)
            except ValueError as exc:
                shapes = ", ".join(str(np.shape(a)) for a in args)
                raise GraphError(f"shape mismatch for inputs {shapes}: {exc}", node) from None
    for name, leaf in graph.leaves.items():
        if values[leaf.id] is None and name in inputs:
            values[leaf.id] = np.asarray(inputs[name], dtype=np.float64)
    graph._values = values
    graph._pending = True
    return {name: values[n.id] for name, n in graph.outputs.items()}


def backward(graph: Graph, output: Node, wrt=None) -> dict:
    """Gradients of scalar ``output`` with respect to leaves.

    ``wrt`` restricts the result (and the work done) to the named leaves; by
    default every leaf gets a gradient. Leaves that do not influence the
    output receive zeros. One backward pass is allowed per forward pass.
    """
    if graph._values is None or not graph._pending:
        raise GraphError("backward requires a fresh forward pass", output)
    values = graph._values
    out_val = values[output.id]
    if out_val is None:
        raise GraphError("output was not evaluated; register it with graph.output()", output)
    if np.size(out_val) != 1:
        raise GraphError(f"backward needs a scalar output, got shape {np.shape(out_val)}", output)
    graph._pending = False

    names = list(graph.leaves) if wrt is None else list(wrt)
    for name in names:
        if name not in graph.leaves:
            raise GraphError(f"unknown leaf {name!r}")
    targets = {graph.leaves[n].id for n in names}

    needs = [False] * (output.id + 1)
    for node in graph.nodes[: output.id + 1]:
        if node.op == "leaf":
            needs[node.id] = node.id in targets
        elif node.op not in ("const", "stop_gradient"):
            needs[node.id] = any(needs[i] for i in node.inputs)

    grads: list = [None] * (output.id + 1)
    grads[output.id] = np.ones_like(out_val)
    for node in reversed(graph.nodes[: output.id + 1]):
        g = grads[node.id]
        if g is None or not needs[node.id] or node.op in ("leaf", "const"):
            continue
        args = [values[i] for i in node.inputs]
        with np.errstate(all="ignore"):
            in_grads = _BACKWARD[node.op](g, values[node.id], *args, **node.attrs)
        for i, gi in zip(node.inputs, in_grads):
            if gi is None or not needs[i]:
                continue
            grads[i] = gi if grads[i] is None else grads[i] + gi

    result = {}
    for name in names:
        leaf = graph.leaves[name]
        g = grads[leaf.id] if leaf.id <= output.id else None
        result[name] = np.zeros_like(values[leaf.id]) if g is None else np.array(g, dtype=np.float64)
    return result
