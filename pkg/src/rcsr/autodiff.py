"""Reverse-mode differentiation over dense 2-D float64 matrices.

Covers exactly the primitives the training losses and the router
transformer need: matrix algebra, a few pointwise nonlinearities,
row-wise softmax / normalization / cosine, reductions, entropy, and a
stop-gradient. Graphs are immutable expression DAGs built from
``input_`` and ``const`` leaves; ``evaluate`` / ``gradient`` bind values
per call, so one graph serves many parameter settings and is safe to
evaluate from multiple threads.

Every intermediate is checked for finiteness, so a bad domain (log of a
negative, division by zero) surfaces as a :class:`GraphError` naming the
offending node instead of propagating NaNs into training.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Iterable, Mapping

import numpy as np

Array = np.ndarray

# Rows with L2 norm below this are treated as exactly zero by the
# row-normalization and cosine primitives (zero output, zero gradient).
NORM_EPS = 1e-8

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class GraphError(ValueError):
    """A malformed graph or an evaluation that violates a node contract."""

    def __init__(self, message: str, node: "Node | None" = None):
        if node is not None:
            message = f"node {node.id} [{node.op}]: {message}"
        super().__init__(message)
        self.node = node


def as_tensor(value) -> Array:
    """Coerce to a 2-D float64 matrix; 1-D input becomes a row vector."""
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise GraphError(f"tensors are 2-D matrices, got shape {arr.shape}")
    return arr


class Node:
    """One primitive in an immutable expression DAG.

    ``_fwd`` maps parent values to this node's value; ``_bwd`` maps the
    incoming gradient (plus the forward values) to one gradient per
    parent, ``None`` meaning no gradient flows along that edge.
    """

    _ids = itertools.count()
    __slots__ = ("id", "op", "parents", "name", "differentiable", "value",
                 "_fwd", "_bwd", "_topo")

    def __init__(self, op: str, parents: tuple["Node", ...] = (), *,
                 name: str | None = None, differentiable: bool = True,
                 value: Array | None = None,
                 fwd: Callable | None = None, bwd: Callable | None = None):
        self.id = next(Node._ids)
        self.op = op
        self.parents = parents
        self.name = name
        self.differentiable = differentiable
        self.value = value
        self._fwd = fwd
        self._bwd = bwd
        self._topo = None

    def __repr__(self) -> str:
        return f"Node({self.op}, id={self.id})"


def input_(name: str, differentiable: bool = True) -> Node:
    """A named leaf bound at evaluation time."""
    return Node("input", name=name, differentiable=differentiable)


def const(value) -> Node:
    """A fixed leaf. The stored matrix is copied and frozen."""
    arr = as_tensor(value).copy()
    arr.setflags(write=False)
    return Node("const", value=arr, differentiable=False)


def _lift(x) -> Node:
    if isinstance(x, Node):
        return x
    return const(x)


def _node(op: str, parents, fwd, bwd) -> Node:
    return Node(op, tuple(_lift(p) for p in parents), fwd=fwd, bwd=bwd)


def _require_same_shape(x: Array, y: Array, what: str) -> None:
    if x.shape != y.shape:
        raise ValueError(f"{what} requires equal shapes, got {x.shape} and {y.shape}")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a, b) -> Node:
    def fwd(x, y):
        if x.shape[1] != y.shape[0]:
            raise ValueError(f"matmul inner dims differ: {x.shape} @ {y.shape}")
        return x @ y

    def bwd(g, out, x, y):
        return g @ y.T, x.T @ g

    return _node("matmul", (a, b), fwd, bwd)


def transpose(a) -> Node:
    return _node("transpose", (a,),
                 lambda x: x.T.copy(),
                 lambda g, out, x: (g.T,))


def add(a, b) -> Node:
    def fwd(x, y):
        _require_same_shape(x, y, "add")
        return x + y

    return _node("add", (a, b), fwd, lambda g, out, x, y: (g, g))


def sub(a, b) -> Node:
    def fwd(x, y):
        _require_same_shape(x, y, "sub")
        return x - y

    return _node("sub", (a, b), fwd, lambda g, out, x, y: (g, -g))


def mul(a, b) -> Node:
    def fwd(x, y):
        _require_same_shape(x, y, "mul")
        return x * y

    return _node("mul", (a, b), fwd, lambda g, out, x, y: (g * y, g * x))


def div(a, b) -> Node:
    def fwd(x, y):
        _require_same_shape(x, y, "div")
        return x / y

    return _node("div", (a, b), fwd,
                 lambda g, out, x, y: (g / y, -g * x / (y * y)))


def smul(a, c: float) -> Node:
    c = float(c)
    return _node("smul", (a,),
                 lambda x: c * x,
                 lambda g, out, x: (c * g,))


def add_rowvec(a, b) -> Node:
    """Add a 1-by-d row vector to every row of a B-by-d matrix."""
    def fwd(x, y):
        if y.shape != (1, x.shape[1]):
            raise ValueError(f"add_rowvec needs (1, {x.shape[1]}) bias, got {y.shape}")
        return x + y

    return _node("add_rowvec", (a, b), fwd,
                 lambda g, out, x, y: (g, g.sum(axis=0, keepdims=True)))


def relu(a) -> Node:
    return _node("relu", (a,),
                 lambda x: np.maximum(x, 0.0),
                 lambda g, out, x: (g * (x > 0.0),))


def gelu_value(x: Array) -> Array:
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_grad(x: Array) -> Array:
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(inner)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)


def gelu(a) -> Node:
    # late-bound module lookup keeps the derivative patchable for fault injection
    return _node("gelu", (a,),
                 lambda x: gelu_value(x),
                 lambda g, out, x: (g * gelu_grad(x),))


def exp(a) -> Node:
    return _node("exp", (a,),
                 lambda x: np.exp(x),
                 lambda g, out, x: (g * out,))


def log(a) -> Node:
    return _node("log", (a,),
                 lambda x: np.log(x),
                 lambda g, out, x: (g / x,))


def softmax(a) -> Node:
    """Row-wise softmax."""
    def fwd(x):
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def bwd(g, out, x):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return _node("softmax", (a,), fwd, bwd)


def masked_softmax(a, mask) -> Node:
    """Row-wise softmax over entries whose mask bit is 1; the rest are exactly 0."""
    def fwd(x, m):
        _require_same_shape(x, m, "masked_softmax")
        if not np.isin(m, (0.0, 1.0)).all():
            raise ValueError("mask entries must be 0 or 1")
        if (m.sum(axis=1) == 0).any():
            raise ValueError("masked_softmax row with no unmasked entries")
        shifted = np.where(m > 0, x, -np.inf)
        shifted = shifted - shifted.max(axis=1, keepdims=True)
        e = np.exp(shifted) * m
        return e / e.sum(axis=1, keepdims=True)

    def bwd(g, out, x, m):
        dot = (g * out).sum(axis=1, keepdims=True)
        return out * (g - dot), None

    return _node("masked_softmax", (a, mask), fwd, bwd)


def normalize_rows(a) -> Node:
    """Row-wise L2 normalization; rows with norm < NORM_EPS map to zero rows."""
    def fwd(x):
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        safe = norms >= NORM_EPS
        return np.where(safe, x / np.where(safe, norms, 1.0), 0.0)

    def bwd(g, out, x):
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        safe = norms >= NORM_EPS
        dot = (g * out).sum(axis=1, keepdims=True)
        grad = (g - out * dot) / np.where(safe, norms, 1.0)
        return (np.where(safe, grad, 0.0),)

    return _node("normalize_rows", (a,), fwd, bwd)


def cosine(a, b) -> Node:
    """Row-wise cosine similarity, a B-by-1 column; degenerate rows give 0."""
    def fwd(x, y):
        _require_same_shape(x, y, "cosine")
        nx = np.linalg.norm(x, axis=1, keepdims=True)
        ny = np.linalg.norm(y, axis=1, keepdims=True)
        safe = (nx >= NORM_EPS) & (ny >= NORM_EPS)
        denom = np.where(safe, nx * ny, 1.0)
        return np.where(safe, (x * y).sum(axis=1, keepdims=True) / denom, 0.0)

    def bwd(g, out, x, y):
        nx = np.linalg.norm(x, axis=1, keepdims=True)
        ny = np.linalg.norm(y, axis=1, keepdims=True)
        safe = (nx >= NORM_EPS) & (ny >= NORM_EPS)
        nx_s = np.where(safe, nx, 1.0)
        ny_s = np.where(safe, ny, 1.0)
        dx = np.where(safe, g * (y / (nx_s * ny_s) - out * x / (nx_s * nx_s)), 0.0)
        dy = np.where(safe, g * (x / (nx_s * ny_s) - out * y / (ny_s * ny_s)), 0.0)
        return dx, dy

    return _node("cosine", (a, b), fwd, bwd)


def sum_all(a) -> Node:
    return _node("sum_all", (a,),
                 lambda x: np.array([[x.sum()]]),
                 lambda g, out, x: (np.full_like(x, g[0, 0]),))


def mean_all(a) -> Node:
    return _node("mean_all", (a,),
                 lambda x: np.array([[x.mean()]]),
                 lambda g, out, x: (np.full_like(x, g[0, 0] / x.size),))


def mean_rows(a) -> Node:
    """Column-wise mean over rows: B-by-d becomes 1-by-d."""
    return _node("mean_rows", (a,),
                 lambda x: x.mean(axis=0, keepdims=True),
                 lambda g, out, x: (np.repeat(g / x.shape[0], x.shape[0], axis=0),))


def sumsq(a) -> Node:
    """Squared L2 norm of all entries, a 1-by-1 scalar."""
    return _node("sumsq", (a,),
                 lambda x: np.array([[(x * x).sum()]]),
                 lambda g, out, x: (2.0 * g[0, 0] * x,))


def entropy(a) -> Node:
    """Shannon entropy -sum(p log p) of a nonnegative tensor, 0 log 0 = 0."""
    def fwd(p):
        if (p < 0).any():
            raise ValueError("entropy requires nonnegative entries")
        pos = p > 0
        return np.array([[-(p[pos] * np.log(p[pos])).sum()]])

    def bwd(g, out, p):
        grad = np.zeros_like(p)
        pos = p > 0
        grad[pos] = -g[0, 0] * (np.log(p[pos]) + 1.0)
        return (grad,)

    return _node("entropy", (a,), fwd, bwd)


def stop_gradient(a) -> Node:
    """Identity forward; the backward contribution is exactly zero."""
    return _node("stop_gradient", (a,),
                 lambda x: x,
                 lambda g, out, x: (None,))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _toposort(root: Node) -> list[Node]:
    if root._topo is not None:
        return root._topo
    order: list[Node] = []
    state: dict[int, int] = {}
    stack = [root]
    while stack:
        node = stack[-1]
        st = state.get(node.id)
        if st is None:
            state[node.id] = 0
            for p in node.parents:
                if p.id not in state:
                    stack.append(p)
        elif st == 0:
            state[node.id] = 1
            order.append(node)
            stack.pop()
        else:
            stack.pop()
    root._topo = order
    return order


def _forward_values(root: Node, bindings: Mapping[str, Array]) -> dict[int, Array]:
    values: dict[int, Array] = {}
    for node in _toposort(root):
        if node.op == "input":
            if node.name not in bindings:
                raise GraphError(f"unbound input '{node.name}'", node)
            values[node.id] = as_tensor(bindings[node.name])
            continue
        if node.op == "const":
            values[node.id] = node.value
            continue
        args = [values[p.id] for p in node.parents]
        try:
            with np.errstate(all="ignore"):
                out = node._fwd(*args)
        except GraphError:
            raise
        except (ValueError, FloatingPointError) as err:
            raise GraphError(str(err), node) from err
        if not np.isfinite(out).all():
            raise GraphError("non-finite result", node)
        values[node.id] = out
    return values


def forward(root: Node, bindings: Mapping[str, Array] | None = None) -> Array:
    """Evaluate a graph and return the root's full matrix value."""
    return _forward_values(root, bindings or {})[root.id]


def evaluate(root: Node, bindings: Mapping[str, Array] | None = None) -> float:
    """Evaluate a scalar graph: the root must produce a 1-by-1 matrix."""
    out = forward(root, bindings)
    if out.shape != (1, 1):
        raise GraphError(f"scalar graph must end in a 1x1 tensor, got {out.shape}")
    return float(out[0, 0])


def _input_nodes(root: Node) -> dict[str, list[Node]]:
    named: dict[str, list[Node]] = {}
    for node in _toposort(root):
        if node.op == "input":
            named.setdefault(node.name, []).append(node)
    return named


def value_and_gradient(root: Node, bindings: Mapping[str, Array],
                       wrt: Iterable[str]) -> tuple[float, dict[str, Array]]:
    """Scalar value plus gradients with respect to the named inputs."""
    wrt = list(wrt)
    named = _input_nodes(root)
    for name in wrt:
        nodes = named.get(name)
        if not nodes:
            raise GraphError(f"graph has no input named '{name}'")
        if any(not n.differentiable for n in nodes):
            raise GraphError(f"input '{name}' is not differentiable")

    values = _forward_values(root, bindings)
    if values[root.id].shape != (1, 1):
        raise GraphError(f"gradient needs a scalar root, got {values[root.id].shape}")

    grads: dict[int, Array] = {root.id: np.ones((1, 1))}
    for node in reversed(_toposort(root)):
        g = grads.get(node.id)
        if g is None or not node.parents:
            continue
        args = [values[p.id] for p in node.parents]
        parent_grads = node._bwd(g, values[node.id], *args)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg

    result: dict[str, Array] = {}
    for name in wrt:
        total = None
        for node in named[name]:
            g = grads.get(node.id)
            if g is None:
                continue
            total = g if total is None else total + g
        if total is None:
            total = np.zeros_like(as_tensor(bindings[name]))
        result[name] = total
    return float(values[root.id][0, 0]), result


def gradient(root: Node, bindings: Mapping[str, Array],
             wrt: Iterable[str]) -> dict[str, Array]:
    """Gradients of a scalar graph with respect to the named inputs."""
    return value_and_gradient(root, bindings, wrt)[1]


def check_gradients(root: Node, bindings: Mapping[str, Array],
                    wrt: Iterable[str], step: float = 1e-5) -> float:
    """Max relative disagreement between analytic and central-difference grads.

    Per coordinate the error is |analytic - numeric| / max(1, |numeric|);
    the returned value is the max over every coordinate of every ``wrt``
    input.
    """
    wrt = list(wrt)
    analytic = gradient(root, bindings, wrt)
    worst = 0.0
    for name in wrt:
        base = as_tensor(bindings[name]).copy()
        numeric = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            perturbed = dict(bindings)
            bumped = base.copy()
            bumped[idx] = base[idx] + step
            perturbed[name] = bumped
            hi = evaluate(root, perturbed)
            bumped = base.copy()
            bumped[idx] = base[idx] - step
            perturbed[name] = bumped
            lo = evaluate(root, perturbed)
            numeric[idx] = (hi - lo) / (2.0 * step)
        err = np.abs(analytic[name] - numeric) / np.maximum(1.0, np.abs(numeric))
        worst = max(worst, float(err.max()))
    return worst
