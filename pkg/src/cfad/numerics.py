"""Dense-matrix helpers, a small reverse-mode differentiation engine, Adam,
the trace-exponential acyclicity penalty, nearest-rank quantiles and seeded
random streams.

Everything works in float64 numpy arrays.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------

# Offsets added to the master seed for each purpose; fixed so that streams
# never collide and changing one consumer does not perturb the others.
STREAM_OFFSETS = {
    "graph": 0,
    "noise": 1_000_003,
    "init": 2_000_003,
    "shuffle": 3_000_017,
    "split": 4_000_037,
}


def make_rng(seed: int, purpose: str | None = None, substream: int = 0) -> np.random.Generator:
    """Return a PCG64 generator for ``seed`` (shifted by the purpose offset).

    A nonzero ``substream`` gives further independent streams for the same
    purpose, e.g. one per restart; substream 0 is the plain stream.
    """
    offset = STREAM_OFFSETS[purpose] if purpose is not None else 0
    if substream:
        return np.random.default_rng([int(seed) + offset, int(substream)])
    return np.random.default_rng(int(seed) + offset)


# ---------------------------------------------------------------------------
# Matrix exponential and acyclicity
# ---------------------------------------------------------------------------

TAYLOR_ORDER = 16


def _check_square(M: np.ndarray) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {M.shape}")
    return M


def matexp(M) -> np.ndarray:
    """Matrix exponential by scaling and squaring with an order-16 Taylor polynomial.

    The squaring count is chosen so that the scaled 1-norm is at most 1/2,
    where the truncated series error is far below double precision.
    """
    M = _check_square(M)
    n = M.shape[0]
    if not np.all(np.isfinite(M)):
        raise ValueError("matexp: non-finite entries")
    norm = np.abs(M).sum(axis=0).max() if n else 0.0
    squarings = 0
    if norm > 0.5:
        squarings = int(math.ceil(math.log2(norm / 0.5)))
    A = M / (2.0 ** squarings)
    result = np.eye(n)
    term = np.eye(n)
    for k in range(1, TAYLOR_ORDER + 1):
        term = term @ A / k
        result = result + term
    for _ in range(squarings):
        result = result @ result
    return result


def acyclicity(W) -> float:
    """h(W) = tr(exp(W*W)) - d; zero iff the support of W is acyclic."""
    W = _check_square(W)
    E = matexp(W * W)
    return float(np.trace(E) - W.shape[0])


def acyclicity_grad(W) -> np.ndarray:
    W = _check_square(W)
    E = matexp(W * W)
    return E.T * 2.0 * W


# ---------------------------------------------------------------------------
# Quantile
# ---------------------------------------------------------------------------

def quantile(values, q: float) -> float:
    """Lower nearest-rank quantile: sorted value at index ceil(q*n)-1, clamped."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    n = v.size
    if n == 0:
        raise ContractError("quantile of an empty list")
    if not 0.0 <= q <= 1.0:
        raise ContractError(f"quantile level must lie in [0, 1], got {q}")
    # tiny guard keeps 0.95*100 = 95.00000000000001 from rounding up
    idx = int(math.ceil(q * n - 1e-9)) - 1
    idx = min(max(idx, 0), n - 1)
    return float(v[idx])


# ---------------------------------------------------------------------------
# Reverse-mode differentiation
# ---------------------------------------------------------------------------

def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Node:
    """A value in a computation graph.

    Leaves are created with ``Node(array)``; every operation returns a new
    node holding its parents and a closure mapping the output adjoint to the
    parents' adjoints.
    """

    __slots__ = ("value", "op", "parents", "_backward", "grad")

    def __init__(self, value, op: str = "leaf", parents: Sequence["Node"] = (),
                 backward: Callable | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.op = op
        self.parents = tuple(parents)
        self._backward = backward
        self.grad: np.ndarray | None = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x, op="const")


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return Node(a.value + b.value, "add", (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return Node(a.value - b.value, "sub", (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return Node(a.value * b.value, "mul", (a, b),
                lambda g: (_unbroadcast(g * b.value, a.shape),
                           _unbroadcast(g * a.value, b.shape)))


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return Node(a.value @ b.value, "matmul", (a, b),
                lambda g: (g @ b.value.T, a.value.T @ g))


def transpose(a) -> Node:
    a = as_node(a)
    return Node(a.value.T, "transpose", (a,), lambda g: (g.T,))


def reshape(a, shape) -> Node:
    a = as_node(a)
    old = a.shape
    return Node(a.value.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def tanh(a) -> Node:
    a = as_node(a)
    out = np.tanh(a.value)
    return Node(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Node:
    a = as_node(a)
    out = _sigmoid(a.value)
    return Node(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def cos(a) -> Node:
    a = as_node(a)
    return Node(np.cos(a.value), "cos", (a,), lambda g: (-g * np.sin(a.value),))


def log(a) -> Node:
    a = as_node(a)
    return Node(np.log(a.value), "log", (a,), lambda g: (g / a.value,))


def log_sigmoid(a) -> Node:
    """log(sigmoid(a)) computed without overflow."""
    a = as_node(a)
    out = -np.logaddexp(0.0, -a.value)
    return Node(out, "log_sigmoid", (a,), lambda g: (g * _sigmoid(-a.value),))


def square(a) -> Node:
    a = as_node(a)
    return Node(a.value ** 2, "square", (a,), lambda g: (2.0 * g * a.value,))


def abs_(a) -> Node:
    a = as_node(a)
    return Node(np.abs(a.value), "abs", (a,), lambda g: (g * np.sign(a.value),))


def sum_(a) -> Node:
    a = as_node(a)
    shape = a.shape
    return Node(a.value.sum(), "sum", (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a) -> Node:
    a = as_node(a)
    shape, n = a.shape, a.value.size
    return Node(a.value.mean(), "mean", (a,),
                lambda g: (np.broadcast_to(g / n, shape).copy(),))


def sq_error(a, b) -> Node:
    """Sum of squared differences, reduced to a scalar."""
    a, b = as_node(a), as_node(b)
    diff = a.value - b.value
    return Node(np.sum(diff * diff), "sq_error", (a, b),
                lambda g: (_unbroadcast(2.0 * g * diff, a.shape),
                           _unbroadcast(-2.0 * g * diff, b.shape)))


def acyclicity_node(W) -> Node:
    W = as_node(W)
    E = matexp(W.value * W.value)
    h = float(np.trace(E) - W.shape[0])
    return Node(h, "acyclicity", (W,), lambda g: (g * E.T * 2.0 * W.value,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def _toposort(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node, params: Iterable[Node]) -> list[np.ndarray]:
    """Gradients of the scalar ``root`` with respect to each node in ``params``.

    Nodes the root does not depend on get a zero gradient.
    """
    params = list(params)
    if root.value.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    order = _toposort(root)
    for p in params:
        p.grad = None
    adj: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        node.grad = g
        if node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            key = id(parent)
            if key in adj:
                adj[key] = adj[key] + pg
            else:
                adj[key] = pg
    out = []
    for p in params:
        g = p.grad
        out.append(np.zeros_like(p.value) if g is None else np.array(g, dtype=np.float64))
    for node in order:
        node.grad = None
    return out


# ---------------------------------------------------------------------------
# Small multilayer perceptrons
# ---------------------------------------------------------------------------

def init_mlp(sizes: Sequence[int], rng: np.random.Generator, prefix: str) -> dict[str, np.ndarray]:
    """Glorot-uniform weights and zero biases, keyed ``{prefix}W{i}``/``{prefix}b{i}``."""
    params = {}
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        params[f"{prefix}W{i}"] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        params[f"{prefix}b{i}"] = np.zeros((1, fan_out))
    return params


def mlp_layers(params: dict, prefix: str) -> int:
    n = 0
    while f"{prefix}W{n}" in params:
        n += 1
    return n


def mlp(params: dict, prefix: str, x, hidden: Callable = tanh, output: Callable | None = None):
    """Apply the MLP stored under ``prefix``; ``params`` values may be nodes or arrays."""
    h = x
    n = mlp_layers(params, prefix)
    for i in range(n):
        h = add(matmul(h, params[f"{prefix}W{i}"]), params[f"{prefix}b{i}"])
        if i < n - 1:
            h = hidden(h)
    if output is not None:
        h = output(h)
    return h


def mlp_numpy(params: dict, prefix: str, x: np.ndarray, output: str | None = None) -> np.ndarray:
    """Forward pass without graph construction (tanh hidden layers)."""
    h = np.asarray(x, dtype=np.float64)
    n = mlp_layers(params, prefix)
    for i in range(n):
        h = h @ params[f"{prefix}W{i}"] + params[f"{prefix}b{i}"]
        if i < n - 1:
            h = np.tanh(h)
    if output == "sigmoid":
        h = _sigmoid(h)
    return h


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adam over a dict of named numpy arrays, updated in place."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            self.params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def finite_difference_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                           step: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function; used only by tests."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + step
        fp = f(x)
        x[i] = orig - step
        fm = f(x)
        x[i] = orig
        g[i] = (fp - fm) / (2 * step)
    return g
