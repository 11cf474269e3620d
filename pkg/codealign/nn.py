"""
A small numpy neural-network core with hand-written gradients.

We need exactly one model shape, ``Linear(GAT(x))``, so we differentiate it
by hand instead of pulling in an autodiff framework. Every backward pass here
is checked against central finite differences in the test suite; see
:func:`gradient_check`.

Parameters are plain ``Dict[str, np.ndarray]`` so :func:`sgd_step` and the
checkpoint container can treat every model alike.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable, Dict, Optional, Tuple

import numpy as np
import scipy.sparse

logger = logging.getLogger(__name__)

Params = Dict[str, np.ndarray]

NORM_FLOOR = 1e-12
"""Rows with a smaller Euclidean norm are left as they are by normalization."""


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN or infinite."""


def unit_rows(x: np.ndarray) -> np.ndarray:
    """Scale each row to unit norm. Rows with norm below NORM_FLOOR stay put."""
    norms = np.linalg.norm(x, axis=1)
    out = np.array(x, dtype=np.float64, copy=True)
    big = norms >= NORM_FLOOR
    out[big] = x[big] / norms[big, None]
    return out


def unit_rows_backward(x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Gradient of :func:`unit_rows`. Rows below NORM_FLOOR get zero gradient."""
    norms = np.linalg.norm(x, axis=1)
    out = np.zeros_like(grad)
    big = norms >= NORM_FLOOR
    y = x[big] / norms[big, None]
    g = grad[big]
    out[big] = (g - y * np.sum(y * g, axis=1, keepdims=True)) / norms[big, None]
    return out


@dataclass(frozen=True)
class Graph:
    """
    Directed message edges ``src -> dst`` of an undirected graph.

    Every undirected pair appears in both directions, and every node has a
    self-loop unless built with ``self_loops=False``.
    """

    n_nodes: int
    src: np.ndarray
    dst: np.ndarray

    @classmethod
    def from_pairs(
        cls, n_nodes: int, pairs: np.ndarray, *, self_loops: bool = True
    ) -> Graph:
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if len(pairs) and (pairs.min() < 0 or pairs.max() >= n_nodes):
            raise ValueError("Edge endpoint out of range for %d nodes" % n_nodes)
        pairs = pairs[pairs[:, 0] != pairs[:, 1]]
        both = np.concatenate([pairs, pairs[:, ::-1]])
        if self_loops:
            loops = np.arange(n_nodes)
            both = np.concatenate([both, np.stack([loops, loops], axis=1)])
        both = np.unique(both, axis=0) if len(both) else both.reshape(0, 2)
        return cls(n_nodes, both[:, 0].copy(), both[:, 1].copy())

    def undirected_pairs(self) -> np.ndarray:
        """Non-self-loop edges as (i, j) rows with i < j, sorted."""
        keep = self.src < self.dst
        return np.stack([self.src[keep], self.dst[keep]], axis=1)

    @property
    def n_edges(self) -> int:
        """Number of undirected non-self-loop edges."""
        return int((self.src < self.dst).sum())


def drop_edges(graph: Graph, rate: float = 0.5, seed: int = 0) -> Graph:
    """
    Keep each undirected non-self-loop edge with probability ``1 - rate``.

    Self-loops are always kept.
    """
    if not 0 <= rate < 1:
        raise ValueError("Drop rate must be in [0, 1); got %r" % rate)
    pairs = graph.undirected_pairs()
    keep = np.random.default_rng(seed).random(len(pairs)) >= rate
    has_loop = np.zeros(graph.n_nodes, dtype=bool)
    has_loop[graph.src[graph.src == graph.dst]] = True
    dropped = Graph.from_pairs(graph.n_nodes, pairs[keep], self_loops=False)
    loops = np.flatnonzero(has_loop)
    src = np.concatenate([dropped.src, loops])
    dst = np.concatenate([dropped.dst, loops])
    order = np.lexsort((dst, src))
    return Graph(graph.n_nodes, src[order], dst[order])


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


@dataclass(frozen=True)
class GatLayer:
    """
    Single-head graph attention layer with identity output activation.
    """

    weight: np.ndarray
    """in_dim x out_dim."""

    attention: np.ndarray
    """Length 2 * out_dim: the first half scores the receiving node."""

    leaky_slope: float = 0.2

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator) -> GatLayer:
        return cls(
            _uniform(rng, in_dim, (in_dim, out_dim)),
            _uniform(rng, out_dim, (2 * out_dim,)),
        )

    def params(self) -> Params:
        return {"weight": self.weight, "attention": self.attention}

    def with_params(self, params: Params) -> GatLayer:
        return replace(
            self,
            weight=params["weight"].reshape(self.weight.shape),
            attention=params["attention"].reshape(self.attention.shape),
        )


@dataclass(frozen=True)
class GatCache:
    """Forward-pass values :func:`gat_backward` needs."""

    features: np.ndarray
    projected: np.ndarray
    scores: np.ndarray
    alpha: np.ndarray
    graph: Graph


def _segment_softmax(scores: np.ndarray, segment: np.ndarray, n: int) -> np.ndarray:
    peak = np.full(n, -np.inf)
    np.maximum.at(peak, segment, scores)
    exp = np.exp(scores - peak[segment])
    return exp / np.bincount(segment, weights=exp, minlength=n)[segment]


def _aggregate(graph: Graph, alpha: np.ndarray) -> scipy.sparse.csr_matrix:
    return scipy.sparse.csr_matrix(
        (alpha, (graph.dst, graph.src)), shape=(graph.n_nodes, graph.n_nodes)
    )


def gat_forward(
    layer: GatLayer, features: np.ndarray, graph: Graph
) -> Tuple[np.ndarray, GatCache]:
    """
    ``h'_i = sum_j alpha_ij W h_j`` over j in i's neighbourhood (self included).

    ``alpha_ij`` is the softmax over j of
    ``LeakyReLU(a[:d] . W h_i + a[d:] . W h_j)``.

    :raises ValueError: if a node has no self-loop.
    """
    if features.shape[0] != graph.n_nodes:
        raise ValueError(
            "Graph has %d nodes but features have %d rows"
            % (graph.n_nodes, features.shape[0])
        )
    looped = np.zeros(graph.n_nodes, dtype=bool)
    looped[graph.dst[graph.src == graph.dst]] = True
    if not looped.all():
        raise ValueError(
            "Node %d has no self-loop" % int(np.flatnonzero(~looped)[0])
        )
    out_dim = layer.weight.shape[1]
    projected = features @ layer.weight
    s_dst = projected @ layer.attention[:out_dim]
    s_src = projected @ layer.attention[out_dim:]
    scores = s_dst[graph.dst] + s_src[graph.src]
    activated = np.where(scores > 0, scores, layer.leaky_slope * scores)
    alpha = _segment_softmax(activated, graph.dst, graph.n_nodes)
    out = _aggregate(graph, alpha) @ projected
    return out, GatCache(features, projected, scores, alpha, graph)


def gat_backward(
    layer: GatLayer, cache: GatCache, grad_out: np.ndarray
) -> Tuple[Params, np.ndarray]:
    """
    Return (parameter gradients, input gradient) for upstream `grad_out`.
    """
    graph = cache.graph
    n = graph.n_nodes
    out_dim = layer.weight.shape[1]
    a_dst, a_src = layer.attention[:out_dim], layer.attention[out_dim:]
    h = cache.projected

    grad_h = _aggregate(graph, cache.alpha).T @ grad_out
    grad_alpha = np.einsum("ed,ed->e", grad_out[graph.dst], h[graph.src])
    weighted = np.bincount(graph.dst, weights=cache.alpha * grad_alpha, minlength=n)
    grad_act = cache.alpha * (grad_alpha - weighted[graph.dst])
    grad_scores = np.where(cache.scores > 0, grad_act, layer.leaky_slope * grad_act)
    grad_s_dst = np.bincount(graph.dst, weights=grad_scores, minlength=n)
    grad_s_src = np.bincount(graph.src, weights=grad_scores, minlength=n)

    grad_h = grad_h + np.outer(grad_s_dst, a_dst) + np.outer(grad_s_src, a_src)
    grad_attention = np.concatenate([h.T @ grad_s_dst, h.T @ grad_s_src])
    grad_weight = cache.features.T @ grad_h
    grad_features = grad_h @ layer.weight.T
    return {"weight": grad_weight, "attention": grad_attention}, grad_features


@dataclass(frozen=True)
class LinearHead:
    weight: np.ndarray
    bias: np.ndarray

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator) -> LinearHead:
        return cls(
            _uniform(rng, in_dim, (in_dim, out_dim)), _uniform(rng, in_dim, (out_dim,))
        )

    def forward(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weight + self.bias

    def backward(self, x: np.ndarray, grad: np.ndarray) -> Tuple[Params, np.ndarray]:
        return (
            {"weight": x.T @ grad, "bias": grad.sum(axis=0)},
            grad @ self.weight.T,
        )

    def params(self) -> Params:
        return {"weight": self.weight, "bias": self.bias}

    def with_params(self, params: Params) -> LinearHead:
        return replace(
            self,
            weight=params["weight"].reshape(self.weight.shape),
            bias=params["bias"].reshape(self.bias.shape),
        )


@dataclass(frozen=True)
class EncoderCache:
    gat: GatCache
    hidden: np.ndarray


@dataclass(frozen=True)
class Encoder:
    """``Linear(GAT(x))``: the model trained per site and per embedding part."""

    gat: GatLayer
    head: LinearHead

    @classmethod
    def init(cls, in_dim: int, out_dim: int, seed: int) -> Encoder:
        rng = np.random.default_rng(seed)
        gat = GatLayer.init(in_dim, out_dim, rng)
        return cls(gat, LinearHead.init(out_dim, out_dim, rng))

    @property
    def out_dim(self) -> int:
        return self.head.weight.shape[1]

    def forward(self, x: np.ndarray, graph: Graph) -> Tuple[np.ndarray, EncoderCache]:
        hidden, gat_cache = gat_forward(self.gat, x, graph)
        return self.head.forward(hidden), EncoderCache(gat_cache, hidden)

    def backward(
        self, cache: EncoderCache, grad: np.ndarray
    ) -> Tuple[Params, np.ndarray]:
        head_grads, grad_hidden = self.head.backward(cache.hidden, grad)
        gat_grads, grad_x = gat_backward(self.gat, cache.gat, grad_hidden)
        grads = {"gat." + k: v for k, v in gat_grads.items()}
        grads.update({"head." + k: v for k, v in head_grads.items()})
        return grads, grad_x

    def params(self) -> Params:
        params = {"gat." + k: v for k, v in self.gat.params().items()}
        params.update({"head." + k: v for k, v in self.head.params().items()})
        return params

    def with_params(self, params: Params) -> Encoder:
        def section(prefix: str) -> Params:
            return {
                k[len(prefix) :]: v for k, v in params.items() if k.startswith(prefix)
            }

        return Encoder(
            self.gat.with_params(section("gat.")),
            self.head.with_params(section("head.")),
        )


@dataclass(frozen=True)
class Optimizer:
    """
    Plain SGD with exponential learning-rate decay per epoch.
    """

    learning_rate: float
    """Rate at epoch 0."""

    decay: float = 0.99
    """Multiplier applied once per epoch. 0 < decay <= 1."""

    min_rate: float = 5e-7
    """The decayed rate never drops below this."""

    def __post_init__(self):
        if not 0 < self.decay <= 1:
            raise ValueError("decay must be in (0, 1]; got %r" % self.decay)
        if self.learning_rate <= 0 or self.min_rate < 0:
            raise ValueError("learning rates must be positive")

    def rate(self, epoch: int) -> float:
        return max(self.min_rate, self.learning_rate * self.decay ** epoch)


def check_finite(name: str, value) -> None:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError("Non-finite value in %s" % name)


def sgd_step(params: Params, grads: Params, opt: Optimizer, epoch: int) -> Params:
    """
    Return ``p - rate(epoch) * g`` for every parameter. Inputs are not mutated.

    :raises NonFiniteError: if any gradient has a NaN or infinity.
    """
    rate = opt.rate(epoch)
    updated = {}
    for name, value in params.items():
        grad = grads[name]
        if grad.shape != value.shape:
            raise ValueError(
                "Gradient for %s has shape %r; expected %r"
                % (name, grad.shape, value.shape)
            )
        check_finite("gradient of %s" % name, grad)
        updated[name] = value - rate * grad
    return updated


def gradient_check(
    loss: Callable[[Params], float],
    params: Params,
    analytic: Params,
    *,
    step: float = 1e-5,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> float:
    """
    Compare analytic gradients with central differences.

    Returns the largest relative error ``|a - n| / max(|a|, |n|, 1e-5)`` seen.
    With `max_entries`, only that many randomly chosen entries per parameter
    are checked.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in sorted(params):
        base = params[name]
        flat_indices = np.arange(base.size)
        if max_entries is not None and base.size > max_entries:
            flat_indices = rng.choice(base.size, size=max_entries, replace=False)
        for flat in flat_indices:
            index = np.unravel_index(flat, base.shape)
            shifted = dict(params)
            plus = base.copy()
            plus[index] += step
            shifted[name] = plus
            loss_plus = loss(shifted)
            minus = base.copy()
            minus[index] -= step
            shifted[name] = minus
            loss_minus = loss(shifted)
            numeric = (loss_plus - loss_minus) / (2 * step)
            exact = analytic[name][index]
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-5)
            if error > worst:
                logger.debug(
                    "%s%s: analytic %g numeric %g", name, index, exact, numeric
                )
            worst = max(worst, error)
    return worst
