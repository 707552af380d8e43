"""Reverse-mode automatic differentiation on numpy arrays.

Deliberately small: the regression network and the fairness penalty only
need a dozen operations. Backward passes are themselves assembled from
these operations, so a gradient node can be differentiated again (double
backprop). That is how second-order meta-gradients are computed exactly,
without numerical Hessians.
"""

from __future__ import annotations

import numpy as np


class Node:
    """A value in the computation graph, linked to the inputs it came from.

    ``parents`` is a tuple of ``(node, vjp)`` pairs where ``vjp`` maps the
    cotangent of this node to the contribution for that parent. Values are
    treated as immutable once wrapped.
    """

    __slots__ = ("value", "parents")

    def __init__(self, value, parents=()):
        if not isinstance(value, np.ndarray) or value.dtype != np.float64:
            value = np.asarray(value, dtype=np.float64)
        self.value = value
        self.parents = parents

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Node(shape={self.value.shape}, leaf={not self.parents})"


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def constant(x) -> Node:
    """A leaf node that no gradient flows into."""
    return Node(x)


# ---------------------------------------------------------------------------
# operations


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return Node(
        a.value + b.value,
        (
            (a, lambda g: sum_to_shape(g, a.value.shape)),
            (b, lambda g: sum_to_shape(g, b.value.shape)),
        ),
    )


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return Node(
        a.value - b.value,
        (
            (a, lambda g: sum_to_shape(g, a.value.shape)),
            (b, lambda g: sum_to_shape(neg(g), b.value.shape)),
        ),
    )


def neg(a) -> Node:
    a = as_node(a)
    return Node(-a.value, ((a, lambda g: neg(g)),))


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return Node(
        a.value * b.value,
        (
            (a, lambda g: sum_to_shape(mul(g, b), a.value.shape)),
            (b, lambda g: sum_to_shape(mul(g, a), b.value.shape)),
        ),
    )


def scale(a, k: float) -> Node:
    """Multiply by a python constant (cheaper than a constant node)."""
    a = as_node(a)
    k = float(k)
    return Node(a.value * k, ((a, lambda g: scale(g, k)),))


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return Node(
        a.value @ b.value,
        (
            (a, lambda g: matmul(g, transpose(b))),
            (b, lambda g: matmul(transpose(a), g)),
        ),
    )


def transpose(a) -> Node:
    a = as_node(a)
    return Node(a.value.T, ((a, lambda g: transpose(g)),))


def relu(a) -> Node:
    a = as_node(a)
    # derivative at exactly 0 is defined as 0
    mask = Node((a.value > 0.0).astype(np.float64))
    return Node(np.maximum(a.value, 0.0), ((a, lambda g: mul(g, mask)),))


def absolute(a) -> Node:
    a = as_node(a)
    # np.sign(0) == 0, i.e. subgradient 0 at the kink
    sgn = Node(np.sign(a.value))
    return Node(np.abs(a.value), ((a, lambda g: mul(g, sgn)),))


def reshape(a, shape) -> Node:
    a = as_node(a)
    old = a.value.shape
    return Node(a.value.reshape(shape), ((a, lambda g: reshape(g, old)),))


def broadcast_to(a, shape) -> Node:
    a = as_node(a)
    old = a.value.shape
    return Node(
        np.broadcast_to(a.value, shape), ((a, lambda g: sum_to_shape(g, old)),)
    )


def sum_axis(a, axis: int, keepdims: bool = False) -> Node:
    a = as_node(a)
    old = a.value.shape
    kept = list(old)
    kept[axis] = 1

    def vjp(g):
        gg = g if keepdims else reshape(g, tuple(kept))
        return broadcast_to(gg, old)

    return Node(a.value.sum(axis=axis, keepdims=keepdims), ((a, vjp),))


def sum_to_shape(a, shape) -> Node:
    """Reduce ``a`` back to ``shape`` by summing broadcast axes."""
    a = as_node(a)
    shape = tuple(shape)
    if a.value.shape == shape:
        return a
    node = a
    while node.value.ndim > len(shape):
        node = sum_axis(node, 0)
    for ax, n in enumerate(shape):
        if n == 1 and node.value.shape[ax] != 1:
            node = sum_axis(node, ax, keepdims=True)
    return node


def sum_all(a) -> Node:
    a = as_node(a)
    old = a.value.shape
    return Node(a.value.sum(), ((a, lambda g: broadcast_to(g, old)),))


def mean_all(a) -> Node:
    a = as_node(a)
    return scale(sum_all(a), 1.0 / a.value.size)


# ---------------------------------------------------------------------------
# backward


def _topo_order(root: Node) -> list[Node]:
    """Post-order over the graph reachable from ``root`` (leaves first)."""
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(output: Node, leaves) -> list[Node]:
    """Cotangents of a scalar ``output`` with respect to ``leaves``.

    The returned nodes are part of the graph, so they can be fed back
    through :func:`backward` for higher-order derivatives. Leaves the
    output does not depend on get zero cotangents.
    """
    if output.value.size != 1:
        raise ValueError(
            f"backward expects a scalar output, got shape {output.value.shape}"
        )
    order = _topo_order(output)
    cotangent: dict[int, Node] = {id(output): Node(np.ones_like(output.value))}
    for node in reversed(order):
        g = cotangent.get(id(node))
        if g is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            held = cotangent.get(id(parent))
            cotangent[id(parent)] = contrib if held is None else add(held, contrib)
    return [
        cotangent.get(id(leaf), Node(np.zeros_like(leaf.value))) for leaf in leaves
    ]


def grad_values(output: Node, leaves) -> list[np.ndarray]:
    """Like :func:`backward` but returns plain arrays."""
    return [g.value for g in backward(output, leaves)]
