import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import constrained_dense_sgd_step

from slimnn.errors import ConfigurationError
from slimnn.hashing import HashedLayer, bucket_index, edge_sign
from slimnn.layers import DenseLayer

# central 99.9% band of chi-square with 783 dof:
# scipy.stats.chi2.ppf([0.0005, 0.9995], 783)
CHI2_783_BAND = (659.2985909185809, 919.7996373015532)


def expanded_dense_twin(hashed: HashedLayer) -> DenseLayer:
    dense = DenseLayer(hashed.in_dim, hashed.out_dim, hashed.activation)
    dense.weights = hashed.expanded_weights().copy()
    dense.bias = hashed.bias.copy()
    return dense


class TestBucketIndex:
    def test_deterministic(self):
        a = bucket_index(123, 1, 5, 9, 64)
        b = bucket_index(123, 1, 5, 9, 64)
        assert a == b
        assert 0 <= a < 64

    def test_single_bucket_always_zero(self):
        for i in range(10):
            assert bucket_index(7, 0, i, i * 3, 1) == 0

    def test_zero_buckets_rejected(self):
        with pytest.raises(ConfigurationError):
            bucket_index(7, 0, 1, 1, 0)

    @given(st.integers(0, 2**63), st.integers(0, 10), st.integers(0, 1000),
           st.integers(0, 1000), st.integers(1, 997))
    @settings(max_examples=200, deadline=None)
    def test_always_in_range(self, seed, layer, i, j, k):
        assert 0 <= bucket_index(seed, layer, i, j, k) < k

    def test_vector_form_matches_scalar(self):
        rows = np.arange(6)[:, None]
        cols = np.arange(4)[None, :]
        grid = bucket_index(99, 2, rows, cols, 17)
        for i in range(6):
            for j in range(4):
                assert grid[i, j] == bucket_index(99, 2, i, j, 17)

    def test_uniformity_chi_square_784x100_grid(self):
        rows = np.arange(100)[:, None]
        cols = np.arange(784)[None, :]
        idx = bucket_index(7, 0, rows, cols, 784)
        occupancy = np.bincount(idx.ravel(), minlength=784)
        expected = idx.size / 784
        stat = float(((occupancy - expected) ** 2 / expected).sum())
        lo, hi = CHI2_783_BAND
        assert lo < stat < hi

    def test_signs_are_plus_minus_one_and_roughly_balanced(self):
        rows = np.arange(50)[:, None]
        cols = np.arange(40)[None, :]
        signs = edge_sign(11, 0, rows, cols)
        assert set(np.unique(signs)) == {-1.0, 1.0}
        assert 0.4 < (signs > 0).mean() < 0.6


class TestHashedForwardBackward:
    @pytest.mark.parametrize("in_dim,out_dim,k", [(6, 4, 5), (50, 20, 37)])
    def test_matches_expanded_dense_oracle(self, in_dim, out_dim, k):
        layer = HashedLayer(in_dim, out_dim, k, hash_seed=3, layer_id=1)
        layer.init_params(np.random.default_rng(0))
        layer.bias = np.random.default_rng(1).normal(size=out_dim)
        dense = expanded_dense_twin(layer)
        rng = np.random.default_rng(2)
        x = rng.normal(size=(9, in_dim))
        yh, ch = layer.forward(x)
        yd, cd = dense.forward(x)
        assert np.abs(yh - yd).max() < 1e-12

        g = rng.normal(size=(9, out_dim))
        gxh, ph = layer.backward(g, ch)
        gxd, pd = dense.backward(g, cd)
        assert np.abs(gxh - gxd).max() < 1e-10
        np.testing.assert_allclose(ph["bias"], pd["bias"], atol=1e-10)
        summed = np.zeros(k)
        np.add.at(summed, layer._indices, pd["weights"])
        assert np.abs(ph["buckets"] - summed).max() < 1e-10

    def test_zero_buckets_give_bias_broadcast(self):
        layer = HashedLayer(5, 3, 4, hash_seed=0)
        layer.bias = np.array([1.0, -2.0, 0.5])
        out, _ = layer.forward(np.random.default_rng(0).normal(size=(6, 5)))
        np.testing.assert_allclose(out, np.tile(layer.bias, (6, 1)))

    def test_injective_assignment_behaves_as_unconstrained_dense(self):
        # force a one-to-one edge->bucket map; training then decouples edges
        layer = HashedLayer(4, 3, 12, hash_seed=5)
        layer._indices = np.arange(12).reshape(3, 4)
        layer.init_params(np.random.default_rng(3))
        dense = expanded_dense_twin(layer)
        rng = np.random.default_rng(4)
        lr = 0.1
        for _ in range(20):
            x = rng.normal(size=(5, 4))
            g = rng.normal(size=(5, 3))
            _, ch = layer.forward(x)
            _, cd = dense.forward(x)
            _, ph = layer.backward(g, ch)
            _, pd = dense.backward(g, cd)
            layer.buckets -= lr * ph["buckets"]
            layer.bias -= lr * ph["bias"]
            dense.weights -= lr * pd["weights"]
            dense.bias -= lr * pd["bias"]
        np.testing.assert_allclose(layer.expanded_weights(), dense.weights, atol=1e-12)

    def test_finite_difference_on_bucket_parameters(self):
        from slimnn.network import HashedSpec, NetworkSpec, init_network
        from oracles import gradient_check

        spec = NetworkSpec(
            layers=(HashedSpec(10, 8, 13, activation="tanh"), HashedSpec(8, 4, 9)),
        )
        net = init_network(spec, seed=17)
        rng = np.random.default_rng(6)
        x = rng.normal(size=(6, 10))
        y = rng.integers(0, 4, size=6)
        assert gradient_check(net, x, y) < 1e-5


class TestWeightSharing:
    def test_expand_with_one_bucket_is_constant(self):
        layer = HashedLayer(7, 3, 1, hash_seed=1)
        layer.buckets = np.array([0.5])
        np.testing.assert_array_equal(layer.expanded_weights(), 0.5)

    def test_distinct_values_bounded_by_bucket_count(self):
        layer = HashedLayer(784, 100, 784, hash_seed=9)
        layer.init_params(np.random.default_rng(0))
        assert len(np.unique(layer.expanded_weights())) <= 784

    def test_sign_hash_doubles_distinct_values_at_most(self):
        layer = HashedLayer(40, 30, 16, hash_seed=2, sign_hash=True)
        layer.init_params(np.random.default_rng(1))
        w = layer.expanded_weights()
        assert len(np.unique(np.abs(w))) <= 16
        assert len(np.unique(w)) <= 32

    def test_training_equivalence_100_steps(self):
        # hashed training == dense training under the shared-bucket constraint
        layer = HashedLayer(6, 4, 5, hash_seed=21, layer_id=0)
        layer.init_params(np.random.default_rng(7))
        weights = layer.expanded_weights().copy()
        bias = layer.bias.copy()
        rng = np.random.default_rng(8)
        lr = 0.05
        for _ in range(100):
            x = rng.normal(size=(4, 6))
            g = rng.normal(size=(4, 4))
            _, cache = layer.forward(x)
            _, grads = layer.backward(g, cache)
            layer.buckets -= lr * grads["buckets"]
            layer.bias -= lr * grads["bias"]
            weights, bias = constrained_dense_sgd_step(
                weights, bias, layer._indices, x, g, lr
            )
        assert np.abs(layer.expanded_weights() - weights).max() < 1e-9
        assert np.abs(layer.bias - bias).max() < 1e-9

    def test_bucket_apportioning_for_784_100_10(self):
        from slimnn.network import hashed_mlp_spec

        spec = hashed_mlp_spec(100, compression_ratio=0.01)
        assert spec.layers[0].n_buckets == int(np.ceil(0.01 * 78400))
        assert spec.layers[1].n_buckets == int(np.ceil(0.01 * 1000))
