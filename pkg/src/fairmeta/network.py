"""Fixed-architecture regression network with exact gradients.

The model is a 2-hidden-layer ReLU MLP with a scalar output head. All
parameters live in :class:`MLPParams` with a flat-vector view, so gradient
vectors, optimizer state and checkpoints share one layout. Objectives are
callables mapping a :class:`ParamNodes` (the graph-typed mirror of
``MLPParams``) to a scalar node; :func:`grad` and :func:`meta_grad`
differentiate them via the tape in :mod:`fairmeta.autodiff`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from . import autodiff as ad

Objective = Callable[["ParamNodes"], ad.Node]


@dataclass(frozen=True)
class NetConfig:
    """Architecture of the regression network."""

    input_dim: int
    hidden_sizes: tuple[int, int] = (40, 40)
    activation: str = "relu"

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if len(self.hidden_sizes) != 2 or min(self.hidden_sizes) < 1:
            raise ValueError(
                f"hidden_sizes must be a pair of positive ints, got {self.hidden_sizes}"
            )
        if self.activation != "relu":
            raise ValueError(f"only relu activation is supported, got {self.activation!r}")

    @property
    def dim(self) -> int:
        """Total number of parameters."""
        n, (h1, h2) = self.input_dim, self.hidden_sizes
        return h1 * n + h1 + h2 * h1 + h2 + h2 + 1


class ParamNodes(NamedTuple):
    """Graph-node mirror of :class:`MLPParams`, used to build objectives."""

    w1: ad.Node
    b1: ad.Node
    w2: ad.Node
    b2: ad.Node
    w3: ad.Node
    b3: ad.Node

    def values(self) -> "MLPParams":
        return MLPParams(*(leaf.value for leaf in self))


@dataclass(eq=False)
class MLPParams:
    """All weights and biases of the network.

    Shapes: w1 (h1, n), b1 (h1,), w2 (h2, h1), b2 (h2,), w3 (1, h2), b3 (1,).
    ``flat()`` / ``with_flat()`` give a bit-exact round-trippable vector view
    in that same order.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def dim(self) -> int:
        return sum(a.size for a in self.arrays())

    def arrays(self) -> tuple[np.ndarray, ...]:
        return (self.w1, self.b1, self.w2, self.b2, self.w3, self.b3)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, flat: np.ndarray) -> "MLPParams":
        """New params with the same shapes, values taken from ``flat``."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.dim,):
            raise ValueError(f"expected flat vector of length {self.dim}, got {flat.shape}")
        out, pos = [], 0
        for a in self.arrays():
            out.append(flat[pos : pos + a.size].reshape(a.shape).copy())
            pos += a.size
        return MLPParams(*out)

    def copy(self) -> "MLPParams":
        return MLPParams(*(a.copy() for a in self.arrays()))

    def as_nodes(self) -> ParamNodes:
        return ParamNodes(*(ad.Node(a) for a in self.arrays()))

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())

    @classmethod
    def zeros(cls, config: NetConfig) -> "MLPParams":
        n, (h1, h2) = config.input_dim, config.hidden_sizes
        return cls(
            np.zeros((h1, n)),
            np.zeros(h1),
            np.zeros((h2, h1)),
            np.zeros(h2),
            np.zeros((1, h2)),
            np.zeros(1),
        )


def init_params(config: NetConfig, rng: np.random.Generator) -> MLPParams:
    """Scaled-uniform weight init (+/- sqrt(6/(fan_in+fan_out))), zero biases."""
    params = MLPParams.zeros(config)
    for w in (params.w1, params.w2, params.w3):
        fan_out, fan_in = w.shape
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w[...] = rng.uniform(-limit, limit, size=w.shape)
    return params


# ---------------------------------------------------------------------------
# forward / loss


def forward_graph(pn: ParamNodes, X: np.ndarray) -> ad.Node:
    """Predictions node of shape (batch, 1) for constant inputs ``X``."""
    Xc = ad.constant(np.asarray(X, dtype=np.float64))
    h1 = ad.relu(ad.add(ad.matmul(Xc, ad.transpose(pn.w1)), pn.b1))
    h2 = ad.relu(ad.add(ad.matmul(h1, ad.transpose(pn.w2)), pn.b2))
    return ad.add(ad.matmul(h2, ad.transpose(pn.w3)), pn.b3)


def predict(params: MLPParams, X: np.ndarray) -> np.ndarray:
    """Fast numpy forward pass over a (batch, input_dim) matrix."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.input_dim:
        raise ValueError(
            f"expected inputs of dimension {params.input_dim}, got shape {X.shape}"
        )
    h1 = np.maximum(X @ params.w1.T + params.b1, 0.0)
    h2 = np.maximum(h1 @ params.w2.T + params.b2, 0.0)
    return (h2 @ params.w3.T + params.b3).ravel()


def forward(params: MLPParams, x) -> float:
    """Scalar prediction for a single feature vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != params.input_dim:
        raise ValueError(
            f"expected input of dimension {params.input_dim}, got shape {x.shape}"
        )
    return float(predict(params, x[None, :])[0])


def loss_from_predictions_graph(pred: ad.Node, y, reduction: str = "mean") -> ad.Node:
    """Squared-error node given an existing (batch, 1) predictions node."""
    y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    if y.size == 0:
        raise ValueError("empty batch")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"reduction must be 'mean' or 'sum', got {reduction!r}")
    diff = ad.sub(pred, ad.constant(y))
    sq = ad.mul(diff, diff)
    return ad.mean_all(sq) if reduction == "mean" else ad.sum_all(sq)


def loss_graph(pn: ParamNodes, X, y, reduction: str = "mean") -> ad.Node:
    """Squared-error loss node over a batch."""
    return loss_from_predictions_graph(forward_graph(pn, X), y, reduction)


def batch_loss(params: MLPParams, X, y, reduction: str = "mean") -> float:
    """Squared-error loss of the network on (X, y)."""
    y = np.asarray(y, dtype=np.float64).ravel()
    if y.size == 0:
        raise ValueError("empty batch")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"reduction must be 'mean' or 'sum', got {reduction!r}")
    err = (predict(params, X) - y) ** 2
    return float(err.mean() if reduction == "mean" else err.sum())


def loss_objective(X, y, reduction: str = "mean") -> Objective:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return lambda pn: loss_graph(pn, X, y, reduction)


# ---------------------------------------------------------------------------
# gradients


def _flat_grads(nodes) -> np.ndarray:
    return np.concatenate([g.value.ravel() for g in nodes])


def grad(objective: Objective, params: MLPParams) -> np.ndarray:
    """Exact reverse-mode gradient of ``objective`` at ``params`` (flat)."""
    pn = params.as_nodes()
    out = objective(pn)
    if not isinstance(out, ad.Node):
        raise ValueError("objective must return an autodiff Node")
    return _flat_grads(ad.backward(out, pn))


def _inner_step_nodes(pn: ParamNodes, support_objective: Objective, alpha: float) -> ParamNodes:
    gs = ad.backward(support_objective(pn), pn)
    return ParamNodes(*(ad.sub(p, ad.scale(g, alpha)) for p, g in zip(pn, gs)))


def meta_grad(
    query_objective: Objective,
    support_objective: Objective,
    params: MLPParams,
    alpha: float,
    q: int = 1,
    order: str = "second",
) -> np.ndarray:
    """Gradient of the query objective after ``q`` inner descent steps.

    The inner loop runs plain gradient descent with step ``alpha`` on the
    support objective starting from ``params``; the result is the gradient
    of the query objective at the adapted parameters, taken with respect to
    the initial ones. ``order="second"`` differentiates through the inner
    updates (the backward pass of the support objective is recorded on the
    tape, so the meta-backward produces the Hessian-vector products
    exactly). ``order="first"`` treats the adapted parameters as constants.
    """
    if q < 1:
        raise ValueError(f"q must be >= 1, got {q}")
    if order not in ("first", "second"):
        raise ValueError(f"order must be 'first' or 'second', got {order!r}")
    if order == "second":
        pn0 = params.as_nodes()
        pn = pn0
        for _ in range(q):
            pn = _inner_step_nodes(pn, support_objective, alpha)
        return _flat_grads(ad.backward(query_objective(pn), pn0))
    adapted = params
    for _ in range(q):
        adapted = adapted.with_flat(adapted.flat() - alpha * grad(support_objective, adapted))
    return grad(query_objective, adapted)
