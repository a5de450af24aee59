"""Routing tests: coupling invariants, a one-iteration hand oracle, and
gradient checks through the unrolled loop."""

import numpy as np
import pytest

from lecaps import tensor as T
from lecaps.gradcheck import check_gradients
from lecaps.routing import RoutingLayer, RoutingTrace, capsule_lengths, classify
from lecaps.tensor import ShapeError, Tensor


def reference_routing(weights, u, iterations):
    """Independent loop-based reimplementation used as the oracle."""

    def ref_squash(s):
        sq = (s * s).sum(axis=-1, keepdims=True)
        return s * sq / ((1.0 + sq) * np.sqrt(sq + 1e-8))

    b, n_in, _ = u.shape
    n_out = weights.shape[1]
    u_hat = np.zeros((b, n_in, n_out, weights.shape[2]))
    for bi in range(b):
        for i in range(n_in):
            for j in range(n_out):
                u_hat[bi, i, j] = weights[i, j] @ u[bi, i]
    logits = np.zeros((b, n_in, n_out))
    for r in range(iterations):
        e = np.exp(logits - logits.max(axis=2, keepdims=True))
        c = e / e.sum(axis=2, keepdims=True)
        s = (c[..., None] * u_hat).sum(axis=1)
        v = ref_squash(s)
        if r < iterations - 1:
            logits = logits + (u_hat * v[:, None, :, :]).sum(axis=-1)
    return v


class TestCouplings:
    def test_rows_sum_to_one_every_iteration(self):
        """For every (sample, input capsule) the couplings sum to 1 +-1e-6."""
        rng = np.random.default_rng(42)
        layer = RoutingLayer(rng, n_in=20, in_dim=4, n_out=5, out_dim=6, iterations=4)
        trace = RoutingTrace()
        with T.no_grad():
            layer.forward(Tensor(rng.standard_normal((3, 20, 4)) * 0.3), trace=trace)
        assert len(trace.couplings) == 4
        for c in trace.couplings:
            np.testing.assert_allclose(c.sum(axis=2), np.ones((3, 20)), atol=1e-6)

    def test_first_iteration_uniform(self):
        """Zero-initialized logits make the first couplings exactly uniform."""
        rng = np.random.default_rng(42)
        layer = RoutingLayer(rng, n_in=7, in_dim=3, n_out=4, out_dim=2)
        trace = RoutingTrace()
        with T.no_grad():
            layer.forward(Tensor(rng.standard_normal((2, 7, 3))), trace=trace)
        np.testing.assert_allclose(trace.couplings[0], np.full((2, 7, 4), 0.25), atol=1e-7)

    def test_single_output_gets_everything(self):
        """With one output capsule every coupling is exactly 1."""
        rng = np.random.default_rng(42)
        layer = RoutingLayer(rng, n_in=9, in_dim=4, n_out=1, out_dim=4, iterations=3)
        trace = RoutingTrace()
        with T.no_grad():
            layer.forward(Tensor(rng.standard_normal((2, 9, 4))), trace=trace)
        for c in trace.couplings:
            np.testing.assert_array_equal(c, np.ones((2, 9, 1)))

    def test_output_norms_below_one(self):
        rng = np.random.default_rng(42)
        layer = RoutingLayer(rng, n_in=30, in_dim=8, n_out=10, out_dim=16)
        with T.no_grad():
            v = layer.forward(Tensor(rng.standard_normal((4, 30, 8))))
        norms = np.linalg.norm(v.data, axis=2)
        assert (norms < 1.0).all()

    def test_logits_are_not_parameters(self):
        """named_parameters exposes only the transform weights."""
        layer = RoutingLayer(np.random.default_rng(0), 5, 4, 3, 2)
        names = [n for n, _ in layer.named_parameters()]
        assert names == ["weights"]


class TestAgainstReference:
    @pytest.mark.parametrize("iterations", [1, 2, 3])
    def test_matches_loop_oracle(self, iterations):
        """Vectorized routing equals the per-element reference to 1e-6."""
        rng = np.random.default_rng(42)
        layer = RoutingLayer(rng, n_in=6, in_dim=3, n_out=4, out_dim=5, iterations=iterations)
        u = rng.standard_normal((2, 6, 3))
        with T.use_dtype(np.float64), T.no_grad():
            v = layer.forward(Tensor(u, dtype=np.float64)).data
        expected = reference_routing(layer.weights.data.astype(np.float64), u, iterations)
        np.testing.assert_allclose(v, expected, atol=1e-6)


class TestGradients:
    def test_weights_and_input(self):
        """Routing backward through 3 iterations vs finite differences."""
        with T.use_dtype(np.float64):
            rng = np.random.default_rng(42)
            layer = RoutingLayer(rng, n_in=5, in_dim=3, n_out=3, out_dim=4, iterations=3)
            u = Tensor(rng.standard_normal((2, 5, 3)), requires_grad=True, dtype=np.float64)

            def build():
                v = layer.forward(u)
                return T.reduce_sum(v * v), [u, layer.weights]

            assert check_gradients(build) < 1e-4

    def test_detached_variant_still_learns_weights(self):
        """detach_predictions blocks only the routing-loop paths."""
        with T.use_dtype(np.float64):
            rng = np.random.default_rng(42)
            layer = RoutingLayer(rng, n_in=4, in_dim=3, n_out=2, out_dim=3, iterations=3, detach_predictions=True)
            u = Tensor(rng.standard_normal((1, 4, 3)), requires_grad=True, dtype=np.float64)
            v = layer.forward(u)
            T.reduce_sum(v * v).backward()
            assert layer.weights.grad is not None and np.abs(layer.weights.grad).max() > 0
            assert u.grad is not None and np.abs(u.grad).max() > 0


class TestClassify:
    def test_argmax_of_lengths(self):
        v = np.zeros((2, 3, 4))
        v[0, 1] = [0.5, 0, 0, 0]
        v[1, 2] = [0, 0.9, 0, 0]
        v[1, 0] = [0.3, 0, 0, 0]
        np.testing.assert_array_equal(classify(Tensor(v)), [1, 2])

    def test_ties_break_to_lowest_index(self):
        v = np.zeros((1, 4, 2))
        v[0, 1] = [0.6, 0.0]
        v[0, 3] = [0.0, 0.6]
        assert classify(Tensor(v))[0] == 1

    def test_lengths_shape(self):
        rng = np.random.default_rng(42)
        v = Tensor(rng.standard_normal((5, 10, 16)))
        assert capsule_lengths(v).shape == (5, 10)

    def test_input_validation(self):
        layer = RoutingLayer(np.random.default_rng(0), 5, 4, 3, 2)
        with pytest.raises(ShapeError):
            layer.forward(Tensor(np.zeros((2, 6, 4))))
        with pytest.raises(ValueError):
            RoutingLayer(np.random.default_rng(0), 5, 4, 3, 2, iterations=0)
