"""Define-by-run reverse-mode differentiation over 2-D float64 arrays.

Every op evaluates eagerly and records a closure that maps the output
gradient onto its operands. Scalars are (1, 1) matrices. Broadcasting is
limited to adding a (1, d) row to every row of an (n, d) matrix.

>>> x = leaf([[3.0]])
>>> y = x * x
>>> _ = backward(y)
>>> float(x.grad[0, 0])
6.0
"""

from __future__ import annotations

import numpy as np

EPS = 1e-12


class Node:
    __slots__ = ("value", "grad", "parents", "op", "requires_grad", "_backward")

    def __init__(self, value, parents=(), op="leaf", backward_fn=None, requires_grad=None):
        self.value = value
        self.parents = parents
        self.op = op
        self._backward = backward_fn
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(value) if op == "leaf" else None

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise ValueError(f"item() needs a 1x1 node, got {self.shape}")
        return float(self.value.reshape(()))

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.shape})"

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _lift(x, like: Node) -> Node:
    if isinstance(x, Node):
        return x
    if isinstance(x, (int, float)):
        return const(np.full((1, 1), float(x)))
    return const(x)


def _as2d(value) -> np.ndarray:
    v = np.array(value, dtype=np.float64)
    if v.ndim == 0:
        v = v.reshape(1, 1)
    elif v.ndim == 1:
        v = v.reshape(1, -1)
    if v.ndim != 2:
        raise ValueError(f"nodes hold 2-D values, got shape {v.shape}")
    return v


def leaf(value, requires_grad: bool = True) -> Node:
    return Node(_as2d(value), requires_grad=requires_grad)


def const(value) -> Node:
    return Node(_as2d(value), requires_grad=False)


def _accumulate(node: Node, g: np.ndarray):
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = g.copy()
    else:
        node.grad += g


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and shape[1] == g.shape[1]:
        return g.sum(axis=0, keepdims=True)
    if shape == (1, 1):
        return g.sum(keepdims=True).reshape(1, 1)
    raise ValueError(f"cannot reduce gradient {g.shape} to {shape}")


def _check_broadcast(a: Node, b: Node, op: str):
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    for big, small in ((sa, sb), (sb, sa)):
        if small == (1, 1) or (small[0] == 1 and small[1] == big[1]):
            return big
    raise ValueError(f"{op}: incompatible shapes {sa} and {sb}")


# ---------------------------------------------------------------- binary ops

def matmul(a: Node, b: Node) -> Node:
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    out = Node(a.value @ b.value, (a, b), "matmul")

    def back(g):
        _accumulate(a, g @ b.value.T)
        _accumulate(b, a.value.T @ g)

    out._backward = back
    return out


def add(a: Node, b: Node) -> Node:
    _check_broadcast(a, b, "add")
    out = Node(a.value + b.value, (a, b), "add")

    def back(g):
        _accumulate(a, _reduce_to(g, a.shape))
        _accumulate(b, _reduce_to(g, b.shape))

    out._backward = back
    return out


def sub(a: Node, b: Node) -> Node:
    _check_broadcast(a, b, "sub")
    out = Node(a.value - b.value, (a, b), "sub")

    def back(g):
        _accumulate(a, _reduce_to(g, a.shape))
        _accumulate(b, _reduce_to(-g, b.shape))

    out._backward = back
    return out


def mul(a: Node, b: Node) -> Node:
    """Elementwise product (a (1, 1) or (1, d) operand broadcasts)."""
    _check_broadcast(a, b, "mul")
    out = Node(a.value * b.value, (a, b), "mul")

    def back(g):
        _accumulate(a, _reduce_to(g * b.value, a.shape))
        _accumulate(b, _reduce_to(g * a.value, b.shape))

    out._backward = back
    return out


def scale(a: Node, c: float) -> Node:
    c = float(c)
    out = Node(a.value * c, (a,), "scale")
    out._backward = lambda g: _accumulate(a, g * c)
    return out


def concat_rows(*nodes: Node) -> Node:
    cols = {n.shape[1] for n in nodes}
    if len(cols) != 1:
        raise ValueError(f"concat_rows: column counts differ {sorted(cols)}")
    out = Node(np.vstack([n.value for n in nodes]), tuple(nodes), "concat_rows")
    bounds = np.cumsum([0] + [n.shape[0] for n in nodes])

    def back(g):
        for n, lo, hi in zip(nodes, bounds[:-1], bounds[1:]):
            _accumulate(n, g[lo:hi])

    out._backward = back
    return out


# ----------------------------------------------------------------- unary ops

def transpose(a: Node) -> Node:
    out = Node(a.value.T.copy(), (a,), "transpose")
    out._backward = lambda g: _accumulate(a, g.T)
    return out


def relu(a: Node) -> Node:
    mask = a.value > 0
    out = Node(np.where(mask, a.value, 0.0), (a,), "relu")
    out._backward = lambda g: _accumulate(a, g * mask)
    return out


def prelu(a: Node, slope: Node) -> Node:
    """Leaky ReLU with a learnable (1, 1) negative-side slope."""
    if slope.shape != (1, 1):
        raise ValueError("prelu slope must be a (1, 1) node")
    mask = a.value > 0
    k = slope.value[0, 0]
    out = Node(np.where(mask, a.value, k * a.value), (a, slope), "prelu")

    def back(g):
        _accumulate(a, np.where(mask, g, k * g))
        _accumulate(slope, np.array([[np.sum(np.where(mask, 0.0, g * a.value))]]))

    out._backward = back
    return out


def square(a: Node) -> Node:
    out = Node(a.value * a.value, (a,), "square")
    out._backward = lambda g: _accumulate(a, 2.0 * a.value * g)
    return out


def abs_(a: Node) -> Node:
    out = Node(np.abs(a.value), (a,), "abs")
    out._backward = lambda g: _accumulate(a, g * np.sign(a.value))
    return out


def sqrt(a: Node) -> Node:
    """Square root; the derivative uses sqrt(x + EPS) so it stays finite at 0."""
    if np.any(a.value < 0):
        raise ValueError("sqrt of a negative entry")
    out = Node(np.sqrt(a.value), (a,), "sqrt")
    out._backward = lambda g: _accumulate(a, g / (2.0 * np.sqrt(a.value + EPS)))
    return out


def log(a: Node) -> Node:
    out = Node(np.log(a.value), (a,), "log")
    out._backward = lambda g: _accumulate(a, g / a.value)
    return out


def exp(a: Node) -> Node:
    v = np.exp(a.value)
    out = Node(v, (a,), "exp")
    out._backward = lambda g: _accumulate(a, g * v)
    return out


def stop_gradient(a: Node) -> Node:
    """Identity on values; nothing flows back to ``a``."""
    return Node(a.value.copy(), (), "stop_gradient", requires_grad=False)


# ---------------------------------------------------------------- reductions

def sum_all(a: Node) -> Node:
    out = Node(np.array([[a.value.sum()]]), (a,), "sum")
    out._backward = lambda g: _accumulate(a, np.full(a.shape, g[0, 0]))
    return out


def mean_all(a: Node) -> Node:
    return scale(sum_all(a), 1.0 / a.value.size)


def row_sum(a: Node) -> Node:
    out = Node(a.value.sum(axis=1, keepdims=True), (a,), "row_sum")
    out._backward = lambda g: _accumulate(a, np.broadcast_to(g, a.shape).copy())
    return out


def col_mean(a: Node) -> Node:
    n = a.shape[0]
    out = Node(a.value.mean(axis=0, keepdims=True), (a,), "col_mean")
    out._backward = lambda g: _accumulate(a, np.broadcast_to(g / n, a.shape).copy())
    return out


def col_var(a: Node) -> Node:
    """Per-column population variance (divides by the row count)."""
    n = a.shape[0]
    centered = a.value - a.value.mean(axis=0, keepdims=True)
    out = Node(np.mean(centered ** 2, axis=0, keepdims=True), (a,), "col_var")
    out._backward = lambda g: _accumulate(a, (2.0 / n) * centered * g)
    return out


def row_logsumexp(a: Node) -> Node:
    m = a.value.max(axis=1, keepdims=True)
    shifted = np.exp(a.value - m)
    total = shifted.sum(axis=1, keepdims=True)
    out = Node(m + np.log(total), (a,), "row_logsumexp")
    out._backward = lambda g: _accumulate(a, g * shifted / total)
    return out


def row_normalize(a: Node) -> Node:
    """Scale each row to unit L2 norm; norms are guarded by EPS."""
    norms = np.sqrt(np.sum(a.value ** 2, axis=1, keepdims=True) + EPS)
    u = a.value / norms
    out = Node(u, (a,), "row_normalize")

    def back(g):
        proj = np.sum(g * u, axis=1, keepdims=True)
        _accumulate(a, (g - u * proj) / norms)

    out._backward = back
    return out


def frobenius(a: Node) -> Node:
    """Frobenius norm as a (1, 1) node; its gradient is 0 at the zero matrix."""
    sq = float(np.sum(a.value ** 2))
    out = Node(np.array([[np.sqrt(sq)]]), (a,), "frobenius")
    out._backward = lambda g: _accumulate(a, g[0, 0] * a.value / np.sqrt(sq + EPS))
    return out


def offdiag(a: Node) -> Node:
    """Copy of a square matrix with its diagonal zeroed."""
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"offdiag needs a square matrix, got {a.shape}")
    mask = 1.0 - np.eye(a.shape[0])
    out = Node(a.value * mask, (a,), "offdiag")
    out._backward = lambda g: _accumulate(a, g * mask)
    return out


# ------------------------------------------------------------------ graph API

def topological_order(root: Node) -> list[Node]:
    order, seen = [], set()
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


def forward(root: Node) -> np.ndarray:
    """Value of ``root``; ops evaluate as they are built, so this is a lookup."""
    return root.value


def backward(root: Node) -> dict[Node, np.ndarray]:
    """Backpropagate from a (1, 1) loss; leaf gradients accumulate in ``.grad``.

    Returns a mapping from every reachable gradient-tracking leaf to its
    accumulated gradient.
    """
    if root.shape != (1, 1):
        raise ValueError(f"backward needs a scalar (1x1) root, got {root.shape}")
    order = topological_order(root)
    for node in order:
        if node.op != "leaf":
            node.grad = None
    root.grad = np.ones((1, 1)) if root.op != "leaf" else root.grad + 1.0
    for node in reversed(order):
        if node._backward is not None and node.grad is not None and node.requires_grad:
            node._backward(node.grad)
    return {n: n.grad for n in order if n.op == "leaf" and n.requires_grad}


def gradcheck(fn, inputs, eps: float = 1e-5, floor: float = 1e-4) -> float:
    """Max relative gap between backprop and central differences.

    ``fn`` maps leaf nodes to a (1, 1) node. Entry errors are divided by
    max(|analytic|, |numeric|, floor) so exact zeros do not blow up.
    """
    arrays = [_as2d(x) for x in inputs]
    leaves = [leaf(a) for a in arrays]
    backward(fn(*leaves))
    worst = 0.0
    for k, a in enumerate(arrays):
        num = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            vals = []
            for sign in (1.0, -1.0):
                probe = [x.copy() for x in arrays]
                probe[k][idx] += sign * eps
                vals.append(fn(*[const(p) for p in probe]).item())
            num[idx] = (vals[0] - vals[1]) / (2 * eps)
        ana = leaves[k].grad
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), floor)
        worst = max(worst, float(np.max(np.abs(ana - num) / denom)))
    return worst
