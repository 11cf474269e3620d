import math
import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from codealign.nn import (
    Encoder,
    GatLayer,
    Graph,
    LinearHead,
    NonFiniteError,
    Optimizer,
    drop_edges,
    gat_backward,
    gat_forward,
    gradient_check,
    sgd_step,
    unit_rows,
    unit_rows_backward,
)


def _leaky(x, slope=0.2):
    return x if x > 0 else slope * x


def _scalar_gat(layer: GatLayer, x: np.ndarray, neighbours):
    """Per-node loop, no vectorization."""
    h = x @ layer.weight
    d = h.shape[1]
    out = np.zeros_like(h)
    for i, nbrs in enumerate(neighbours):
        scores = [
            _leaky(float(layer.attention[:d] @ h[i] + layer.attention[d:] @ h[j]))
            for j in nbrs
        ]
        peak = max(scores)
        exps = [math.exp(s - peak) for s in scores]
        total = sum(exps)
        for j, e in zip(nbrs, exps):
            out[i] += e / total * h[j]
    return out


class GraphTest(unittest.TestCase):
    def test_self_loops_and_symmetry(self):
        g = Graph.from_pairs(3, np.array([[0, 1], [1, 2], [1, 0]]))
        edges = set(zip(g.src.tolist(), g.dst.tolist()))
        self.assertEqual(
            edges, {(0, 0), (1, 1), (2, 2), (0, 1), (1, 0), (1, 2), (2, 1)}
        )
        assert_array_equal(g.undirected_pairs(), [[0, 1], [1, 2]])
        self.assertEqual(g.n_edges, 2)

    def test_out_of_range(self):
        with self.assertRaises(ValueError):
            Graph.from_pairs(2, np.array([[0, 2]]))


class GatForwardTest(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(1)

    def test_single_node(self):
        layer = GatLayer.init(3, 2, self.rng)
        x = self.rng.normal(size=(1, 3))
        out, _ = gat_forward(layer, x, Graph.from_pairs(1, np.empty((0, 2))))
        assert_allclose(out, x @ layer.weight, rtol=0, atol=1e-15)

    def test_disconnected_nodes(self):
        layer = GatLayer.init(3, 2, self.rng)
        x = self.rng.normal(size=(2, 3))
        out, _ = gat_forward(layer, x, Graph.from_pairs(2, np.empty((0, 2))))
        assert_allclose(out, x @ layer.weight, rtol=0, atol=1e-15)

    def test_path_matches_scalar_loop(self):
        layer = GatLayer(
            weight=np.array([[1.0, -0.5], [0.25, 2.0]]),
            attention=np.array([0.3, -0.7, 1.1, 0.4]),
        )
        x = np.array([[1.0, 0.0], [0.5, -1.0], [-2.0, 1.5]])
        graph = Graph.from_pairs(3, np.array([[0, 1], [1, 2]]))
        out, cache = gat_forward(layer, x, graph)
        expected = _scalar_gat(layer, x, [[0, 1], [0, 1, 2], [1, 2]])
        assert_allclose(out, expected, rtol=1e-12, atol=1e-12)
        sums = np.bincount(cache.graph.dst, weights=cache.alpha)
        assert_allclose(sums, np.ones(3), rtol=0, atol=1e-12)

    def test_missing_self_loop(self):
        layer = GatLayer.init(2, 2, self.rng)
        graph = Graph.from_pairs(2, np.array([[0, 1]]), self_loops=False)
        with self.assertRaisesRegex(ValueError, "self-loop"):
            gat_forward(layer, np.ones((2, 2)), graph)


def _random_graph(rng, n=10, p=0.3):
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    return Graph.from_pairs(n, np.array(pairs).reshape(-1, 2))


class GatBackwardTest(unittest.TestCase):
    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(7)
        graph = _random_graph(rng)
        layer = GatLayer.init(4, 3, rng)
        x = rng.normal(size=(10, 4))
        upstream = rng.normal(size=(10, 3))

        def loss(params):
            out, _ = gat_forward(layer.with_params(params), params["x"], graph)
            return float(np.sum(out * upstream))

        out, cache = gat_forward(layer, x, graph)
        grads, grad_x = gat_backward(layer, cache, upstream)
        params = dict(layer.params(), x=x)
        analytic = dict(grads, x=grad_x)
        self.assertLess(gradient_check(loss, params, analytic), 1e-4)

    def test_zero_upstream(self):
        rng = np.random.default_rng(3)
        graph = _random_graph(rng)
        layer = GatLayer.init(4, 3, rng)
        _, cache = gat_forward(layer, rng.normal(size=(10, 4)), graph)
        grads, grad_x = gat_backward(layer, cache, np.zeros((10, 3)))
        for value in grads.values():
            assert_array_equal(value, 0)
        assert_array_equal(grad_x, 0)

    def test_unreachable_node_gets_zero_gradient(self):
        rng = np.random.default_rng(5)
        layer = GatLayer.init(3, 2, rng)
        # node 3 is isolated; loss only reads node 0
        graph = Graph.from_pairs(4, np.array([[0, 1], [1, 2]]))
        _, cache = gat_forward(layer, rng.normal(size=(4, 3)), graph)
        upstream = np.zeros((4, 2))
        upstream[0] = [1.0, -1.0]
        _, grad_x = gat_backward(layer, cache, upstream)
        assert_array_equal(grad_x[3], 0)

    def test_encoder_through_normalization(self):
        rng = np.random.default_rng(11)
        graph = _random_graph(rng)
        encoder = Encoder.init(5, 4, seed=2)
        x = rng.normal(size=(10, 5))
        target = rng.normal(size=(10, 4))

        def forward(params):
            y, cache = encoder.with_params(params).forward(x, graph)
            return y, cache

        def loss(params):
            y, _ = forward(params)
            return float(np.sum(unit_rows(y) * target))

        y, cache = forward(encoder.params())
        grads, _ = encoder.backward(cache, unit_rows_backward(y, target))
        self.assertEqual(sorted(grads), sorted(encoder.params()))
        self.assertLess(gradient_check(loss, encoder.params(), grads), 1e-4)


class NormalizationTest(unittest.TestCase):
    def test_unit_rows(self):
        x = np.array([[3.0, 4.0], [0.0, 0.0], [1e-14, 0.0]])
        y = unit_rows(x)
        assert_allclose(y[0], [0.6, 0.8])
        assert_array_equal(y[1], [0.0, 0.0])
        assert_array_equal(y[2], [1e-14, 0.0])

    def test_tiny_rows_have_zero_gradient(self):
        x = np.array([[0.0, 0.0], [1.0, 1.0]])
        grad = unit_rows_backward(x, np.ones((2, 2)))
        assert_array_equal(grad[0], [0.0, 0.0])
        # moving along the row direction does not change the normalized row
        assert_allclose(grad[1], [0.0, 0.0], atol=1e-15)


class LinearHeadTest(unittest.TestCase):
    def test_gradients(self):
        rng = np.random.default_rng(0)
        head = LinearHead.init(3, 2, rng)
        x = rng.normal(size=(5, 3))
        upstream = rng.normal(size=(5, 2))

        def loss(params):
            return float(np.sum(head.with_params(params).forward(x) * upstream))

        grads, _ = head.backward(x, upstream)
        self.assertLess(gradient_check(loss, head.params(), grads), 1e-6)


class DropEdgesTest(unittest.TestCase):
    def test_rate_zero_is_identity(self):
        graph = _random_graph(np.random.default_rng(0))
        dropped = drop_edges(graph, 0.0, seed=1)
        assert_array_equal(dropped.src, graph.src)
        assert_array_equal(dropped.dst, graph.dst)

    def test_self_loops_survive(self):
        graph = _random_graph(np.random.default_rng(0), p=0.9)
        dropped = drop_edges(graph, 0.99, seed=1)
        loops = dropped.src[dropped.src == dropped.dst]
        assert_array_equal(np.sort(loops), np.arange(10))

    def test_binomial_count(self):
        n = 10000
        star = np.stack([np.zeros(n, int), np.arange(1, n + 1)], 1)
        graph = Graph.from_pairs(n + 1, star)
        kept = drop_edges(graph, 0.5, seed=42).n_edges
        self.assertLessEqual(abs(kept - 5000), 3 * math.sqrt(n * 0.25))

    def test_seeded(self):
        graph = _random_graph(np.random.default_rng(0), p=0.6)
        a = drop_edges(graph, 0.5, seed=9)
        b = drop_edges(graph, 0.5, seed=9)
        assert_array_equal(a.src, b.src)
        assert_array_equal(a.dst, b.dst)

    def test_bad_rate(self):
        with self.assertRaises(ValueError):
            drop_edges(_random_graph(np.random.default_rng(0)), 1.0)


class SgdTest(unittest.TestCase):
    def test_rate_schedule(self):
        opt = Optimizer(1e-4)
        self.assertEqual(opt.rate(0), 1e-4)
        self.assertAlmostEqual(opt.rate(2), 1e-4 * 0.99 ** 2)
        self.assertEqual(opt.rate(10000), 5e-7)

    def test_bad_decay(self):
        with self.assertRaises(ValueError):
            Optimizer(1e-3, decay=1.5)

    def test_step(self):
        params = {"w": np.array([1.0, 2.0])}
        updated = sgd_step(params, {"w": np.array([10.0, 0.0])}, Optimizer(0.1), 0)
        assert_allclose(updated["w"], [0.0, 2.0])
        assert_array_equal(params["w"], [1.0, 2.0])

    def test_zero_gradient(self):
        params = {"w": np.array([1.0, 2.0])}
        updated = sgd_step(params, {"w": np.zeros(2)}, Optimizer(0.1), 3)
        assert_array_equal(updated["w"], params["w"])

    def test_non_finite(self):
        with self.assertRaisesRegex(NonFiniteError, "w"):
            sgd_step({"w": np.ones(1)}, {"w": np.array([np.nan])}, Optimizer(0.1), 0)
