"""Tape-based reverse-mode automatic differentiation over float64 arrays.

Operations are recorded on a :class:`Graph` as they are applied (define by
run) and their values are computed immediately. The tape can be replayed
with :meth:`Graph.forward` after parameter values change, which is what the
finite-difference checker relies on.

Broadcasting is limited to a 1-D row bias added to a 2-D matrix.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    """Operation inputs have incompatible shapes."""


class GraphError(RuntimeError):
    """The graph cannot be differentiated as requested."""


class Parameter:
    """A trainable array with a stable identifier."""

    def __init__(self, pid: str, value):
        self.id = pid
        self.value = np.array(value, dtype=np.float64)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Parameter({self.id!r}, shape={self.value.shape})"


class OpDef(NamedTuple):
    forward: Callable
    backward: Callable
    check: Callable | None


_OPS: dict[str, OpDef] = {}


def register_op(name, forward, backward, check=None):
    """Register a differentiable operation.

    ``forward(values, attrs, graph)`` returns the output array.
    ``backward(grad, values, out, attrs)`` returns one gradient (or None)
    per input. ``check(shapes, attrs)`` returns an error string or None.
    """
    _OPS[name] = OpDef(forward, backward, check)


@dataclass(eq=False)
class Node:
    graph: Graph
    index: int
    op: str
    inputs: tuple = ()
    attrs: dict = field(default_factory=dict)
    value: np.ndarray | None = None
    param: Parameter | None = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node#{self.index}({self.op}, shape={self.value.shape})"

    def _lift(self, other):
        return other if isinstance(other, Node) else self.graph.constant(other)

    def __add__(self, other):
        if np.isscalar(other):
            return shift(self, other)
        return add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        if np.isscalar(other):
            return shift(self, -other)
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return shift(neg(self), other) if np.isscalar(other) else sub(self._lift(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, self._lift(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def __neg__(self):
        return neg(self)


class Graph:
    """An operation tape. Node ``i`` only ever reads nodes ``< i``."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.grads: list[np.ndarray | None] = []
        self.counters: Counter = Counter()

    def __len__(self):
        return len(self.nodes)

    def parameter(self, p: Parameter) -> Node:
        node = Node(self, len(self.nodes), "param", value=p.value.copy(), param=p)
        self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        value = np.array(value, dtype=np.float64)
        node = Node(self, len(self.nodes), "const", value=value)
        self.nodes.append(node)
        return node

    def apply(self, op: str, *inputs: Node, **attrs) -> Node:
        opdef = _OPS[op]
        index = len(self.nodes)
        for x in inputs:
            if x.graph is not self:
                raise GraphError(f"node {index} ({op}): input {x!r} belongs to another graph")
        if opdef.check is not None:
            problem = opdef.check([x.value.shape for x in inputs], attrs)
            if problem:
                raise ShapeError(f"node {index} ({op}): {problem}")
        node = Node(self, index, op, tuple(x.index for x in inputs), attrs)
        node.value = opdef.forward([x.value for x in inputs], attrs, self)
        self.nodes.append(node)
        return node

    def forward(self, root: Node | None = None) -> np.ndarray:
        """Recompute every node from the current leaf values.

        Parameter leaves re-read ``Parameter.value``; constants are reused.
        """
        self.counters.clear()
        last = len(self.nodes) - 1 if root is None else root.index
        for node in self.nodes[: last + 1]:
            if node.op == "param":
                node.value = node.param.value.copy()
            elif node.op != "const":
                values = [self.nodes[i].value for i in node.inputs]
                node.value = _OPS[node.op].forward(values, node.attrs, self)
        return self.nodes[last].value

    def backward(self, root: Node | None = None) -> dict[str, np.ndarray]:
        """Gradients of a scalar root with respect to every Parameter.

        Gradients for all nodes (including constants) stay available through
        :meth:`grad` until the next call.
        """
        root = self.nodes[-1] if root is None else root
        if root.value.size != 1:
            raise GraphError(f"backward needs a scalar root, node {root.index} has shape {root.value.shape}")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[root.index] = np.ones_like(root.value)
        for node in reversed(self.nodes[: root.index + 1]):
            g = grads[node.index]
            if g is None or node.op in ("param", "const"):
                continue
            values = [self.nodes[i].value for i in node.inputs]
            in_grads = _OPS[node.op].backward(g, values, node.value, node.attrs)
            for i, gi in zip(node.inputs, in_grads):
                if gi is None:
                    continue
                grads[i] = gi if grads[i] is None else grads[i] + gi
        self.grads = grads
        out: dict[str, np.ndarray] = {}
        for node in self.nodes:
            if node.op != "param":
                continue
            g = grads[node.index]
            g = np.zeros_like(node.value) if g is None else g
            pid = node.param.id
            out[pid] = out[pid] + g if pid in out else g
        return out

    def grad(self, node: Node) -> np.ndarray:
        g = self.grads[node.index] if node.index < len(self.grads) else None
        return np.zeros_like(node.value) if g is None else g


# ---------------------------------------------------------------- op helpers


def _same_or_bias(shapes, attrs):
    a, b = shapes
    if a == b:
        return None
    if len(a) == 2 and len(b) == 1 and a[1] == b[0]:
        return None
    return f"shapes {a} and {b} are neither equal nor matrix + row bias"


def _same(shapes, attrs):
    if len(set(shapes)) != 1:
        return f"shapes {shapes} differ"
    return None


def _unbias(g, shape):
    return g.sum(axis=0) if g.shape != shape else g


def _matmul_check(shapes, attrs):
    a, b = shapes
    if len(a) != 2 or len(b) != 2 or a[1] != b[0]:
        return f"cannot multiply {a} by {b}"
    return None


def _is_2d(shapes, attrs):
    if len(shapes[0]) != 2:
        return f"expected a matrix, got shape {shapes[0]}"
    return None


def _column_check(shapes, attrs):
    problem = _is_2d(shapes, attrs)
    if problem:
        return problem
    if not 0 <= attrs["j"] < shapes[0][1]:
        return f"column {attrs['j']} out of range for shape {shapes[0]}"
    return None


def _concat_check(shapes, attrs):
    if any(len(s) != 2 for s in shapes) or len({s[0] for s in shapes}) != 1:
        return f"cannot concatenate columns of {shapes}"
    return None


def _column_backward(g, values, out, attrs):
    full = np.zeros_like(values[0])
    full[:, attrs["j"]] = g
    return (full,)


def _slice_backward(g, values, out, attrs):
    full = np.zeros_like(values[0])
    full[:, attrs["start"] : attrs["stop"]] = g
    return (full,)


def _concat_backward(g, values, out, attrs):
    grads, start = [], 0
    for v in values:
        grads.append(g[:, start : start + v.shape[1]])
        start += v.shape[1]
    return tuple(grads)


def _clamp_forward(values, attrs, graph):
    x = values[0]
    clamped = x < attrs["floor"]
    if clamped.any():
        graph.counters[attrs.get("tag", "clamp_min")] += int(clamped.sum())
    return np.where(clamped, attrs["floor"], x)


def softplus_np(x):
    """log(1 + exp(x)) without overflow."""
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _log_backward(g, v, out, a):
    with np.errstate(divide="ignore"):
        return (g / v[0],)


register_op("add", lambda v, a, G: v[0] + v[1], lambda g, v, o, a: (g, _unbias(g, v[1].shape)), _same_or_bias)
register_op("sub", lambda v, a, G: v[0] - v[1], lambda g, v, o, a: (g, -_unbias(g, v[1].shape)), _same_or_bias)
register_op("mul", lambda v, a, G: v[0] * v[1], lambda g, v, o, a: (g * v[1], g * v[0]), _same)
register_op("matmul", lambda v, a, G: v[0] @ v[1], lambda g, v, o, a: (g @ v[1].T, v[0].T @ g), _matmul_check)
register_op("neg", lambda v, a, G: -v[0], lambda g, v, o, a: (-g,))
register_op("scale", lambda v, a, G: a["c"] * v[0], lambda g, v, o, a: (a["c"] * g,))
register_op("shift", lambda v, a, G: v[0] + a["c"], lambda g, v, o, a: (g,))
register_op("exp", lambda v, a, G: np.exp(v[0]), lambda g, v, o, a: (g * o,))
register_op("log", lambda v, a, G: np.log(v[0]), _log_backward)
register_op("tanh", lambda v, a, G: np.tanh(v[0]), lambda g, v, o, a: (g * (1.0 - o * o),))
register_op("relu", lambda v, a, G: np.maximum(v[0], 0.0), lambda g, v, o, a: (g * (v[0] > 0),))
register_op("sigmoid", lambda v, a, G: expit(v[0]), lambda g, v, o, a: (g * o * (1.0 - o),))
register_op("softplus", lambda v, a, G: softplus_np(v[0]), lambda g, v, o, a: (g * expit(v[0]),))
register_op("square", lambda v, a, G: v[0] * v[0], lambda g, v, o, a: (2.0 * v[0] * g,))
register_op("sum", lambda v, a, G: np.array(v[0].sum()), lambda g, v, o, a: (np.full_like(v[0], g),))
register_op("mean", lambda v, a, G: np.array(v[0].mean()), lambda g, v, o, a: (np.full_like(v[0], g / v[0].size),))
register_op("clamp_min", _clamp_forward, lambda g, v, o, a: (g * (v[0] >= a["floor"]),))
register_op("column", lambda v, a, G: v[0][:, a["j"]].copy(), _column_backward, _column_check)
register_op("slice_cols", lambda v, a, G: v[0][:, a["start"] : a["stop"]].copy(), _slice_backward, _is_2d)
register_op("concat_cols", lambda v, a, G: np.concatenate(v, axis=1), _concat_backward, _concat_check)
register_op(
    "cumsum_cols",
    lambda v, a, G: np.cumsum(v[0], axis=1),
    lambda g, v, o, a: (np.cumsum(g[:, ::-1], axis=1)[:, ::-1],),
    _is_2d,
)


def add(a: Node, b: Node) -> Node:
    return a.graph.apply("add", a, b)


def sub(a: Node, b: Node) -> Node:
    return a.graph.apply("sub", a, b)


def mul(a: Node, b: Node) -> Node:
    return a.graph.apply("mul", a, b)


def matmul(a: Node, b: Node) -> Node:
    return a.graph.apply("matmul", a, b)


def neg(x: Node) -> Node:
    return x.graph.apply("neg", x)


def scale(x: Node, c: float) -> Node:
    return x.graph.apply("scale", x, c=float(c))


def shift(x: Node, c: float) -> Node:
    return x.graph.apply("shift", x, c=float(c))


def exp(x: Node) -> Node:
    return x.graph.apply("exp", x)


def log(x: Node) -> Node:
    return x.graph.apply("log", x)


def tanh(x: Node) -> Node:
    return x.graph.apply("tanh", x)


def relu(x: Node) -> Node:
    return x.graph.apply("relu", x)


def sigmoid(x: Node) -> Node:
    return x.graph.apply("sigmoid", x)


def softplus(x: Node) -> Node:
    return x.graph.apply("softplus", x)


def square(x: Node) -> Node:
    return x.graph.apply("square", x)


def sum(x: Node) -> Node:  # noqa: A001 - mirrors numpy naming
    return x.graph.apply("sum", x)


def mean(x: Node) -> Node:
    return x.graph.apply("mean", x)


def clamp_min(x: Node, floor: float, tag: str = "clamp_min") -> Node:
    return x.graph.apply("clamp_min", x, floor=float(floor), tag=tag)


def column(x: Node, j: int) -> Node:
    return x.graph.apply("column", x, j=int(j))


def slice_cols(x: Node, start: int, stop: int) -> Node:
    return x.graph.apply("slice_cols", x, start=int(start), stop=int(stop))


def concat_cols(*xs: Node) -> Node:
    return xs[0].graph.apply("concat_cols", *xs)


def cumsum_cols(x: Node) -> Node:
    return x.graph.apply("cumsum_cols", x)


ACTIVATIONS = {"tanh": tanh, "relu": relu, "sigmoid": sigmoid, "softplus": softplus}


# ------------------------------------------------------------ gradient check


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: tuple | None = None
    ok: bool = True
    message: str = ""


def grad_check(build: Callable[[Graph], Node], params, step: float = 1e-5) -> GradCheckResult:
    """Compare backward() against central differences on every coordinate.

    ``build`` records a scalar function of ``params`` on the graph it is
    given. The relative error of a coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    graph = Graph()
    root = build(graph)
    base = float(root.value)
    if not np.isfinite(base):
        return GradCheckResult(np.inf, None, False, "function value is not finite at the point")
    analytic = graph.backward(root)
    worst_err, worst = 0.0, None
    for p in params:
        an = analytic.get(p.id, np.zeros_like(p.value))
        for idx in np.ndindex(p.value.shape):
            orig = p.value[idx]
            p.value[idx] = orig + step
            fp = float(graph.forward(root))
            p.value[idx] = orig - step
            fm = float(graph.forward(root))
            p.value[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                graph.forward(root)
                return GradCheckResult(np.inf, (p.id, idx), False, f"non-finite value near {p.id}{list(idx)}")
            numeric = (fp - fm) / (2.0 * step)
            err = abs(an[idx] - numeric) / max(1.0, abs(an[idx]))
            if err > worst_err or worst is None:
                worst_err, worst = err, (p.id, idx)
    graph.forward(root)
    return GradCheckResult(worst_err, worst)
