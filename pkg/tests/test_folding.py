import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bitnn.folding import (
    THRESHOLD_MAX,
    THRESHOLD_MIN,
    FoldedLayer,
    FoldedModel,
    binarize_weights,
    fold_model,
    fold_threshold,
    fold_thresholds,
)
from bitnn.trainer import BNStats, TrainableNetwork, TrainConfig, train
from bitnn.mnist_data import Dataset


def bn_of(z, mu, beta, sigma2, eps):
    """Direct evaluation of the normalization with scale 1."""
    return (z - mu) / math.sqrt(sigma2 + eps) + beta


class TestFoldThreshold:
    def test_zero_stats(self):
        assert fold_threshold(mu=0.0, beta=0.0, sigma2=1.0, eps=1e-3) == 0

    def test_closed_form_example(self):
        # mu=5, beta=1, sigma2+eps=4 -> T_real = 5 - 2 = 3
        t = fold_threshold(mu=5.0, beta=1.0, sigma2=4.0 - 1e-3, eps=1e-3)
        assert t == 3
        assert bn_of(2, 5.0, 1.0, 4.0 - 1e-3, 1e-3) == pytest.approx(-0.5)
        assert bn_of(3, 5.0, 1.0, 4.0 - 1e-3, 1e-3) == pytest.approx(0.0)

    def test_clamp_high(self):
        assert fold_threshold(mu=2000.0, beta=0.0, sigma2=1.0, eps=1e-3) == THRESHOLD_MAX

    def test_clamp_low(self):
        assert fold_threshold(mu=-5000.0, beta=0.0, sigma2=1.0, eps=1e-3) == THRESHOLD_MIN

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            fold_threshold(mu=float("nan"), beta=0.0, sigma2=1.0, eps=1e-3)

    @given(
        st.floats(-50, 50),
        st.floats(-3, 3),
        st.floats(0, 100),
    )
    @settings(max_examples=300, deadline=None)
    def test_equivalence_over_integer_range(self, mu, beta, sigma2):
        # (z >= T) <=> (BN(z) >= 0) for every integer z when T does not clamp
        eps = 1e-3
        t = fold_threshold(mu, beta, sigma2, eps)
        if t in (THRESHOLD_MIN, THRESHOLD_MAX):
            return
        for z in range(t - 3, t + 4):
            assert (z >= t) == (bn_of(z, mu, beta, sigma2, eps) >= 0.0)

    @given(st.floats(-1000, 1000), st.integers(-1100, 1100))
    @settings(max_examples=300, deadline=None)
    def test_ceiling_preserves_integer_comparison(self, t_real, z):
        assert (z >= t_real) == (z >= math.ceil(t_real))


class TestBinarizeWeights:
    def test_all_positive(self):
        m = binarize_weights(np.full((3, 4), 0.7))
        assert np.all(m.to_bit_array() == 1)

    def test_checkerboard(self):
        latent = np.fromfunction(lambda j, i: (-1.0) ** (i + j), (4, 4))
        m = binarize_weights(latent)
        expected = np.fromfunction(lambda j, i: (i + j) % 2 == 0, (4, 4))
        assert np.array_equal(m.to_bit_array(), expected.astype(np.uint8))

    def test_matches_scalar_sign_loop(self):
        rng = np.random.default_rng(0)
        latent = rng.normal(size=(8, 8))
        m = binarize_weights(latent)
        bits = m.to_bit_array()
        for j in range(8):
            for i in range(8):
                assert bits[j, i] == (1 if latent[j, i] >= 0 else 0)

    def test_zero_maps_to_one(self):
        m = binarize_weights(np.zeros((1, 3)))
        assert np.all(m.to_bit_array() == 1)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            binarize_weights(np.array([[1.0, float("inf")]]))


def make_net(dims, seed=0, bn_eps=1e-3):
    cfg = TrainConfig(dims=dims, seed=seed, bn_eps=bn_eps)
    return TrainableNetwork.initialize(cfg)


class TestFoldModel:
    def test_zero_stats_give_zero_thresholds(self):
        net = make_net((8, 4, 3, 2))
        for layer in net.layers:
            layer.bn.mu[:] = 0.0
            layer.bn.beta[:] = 0.0
        folded = fold_model(net)
        assert np.all(folded.layers[0].thresholds == 0)
        assert np.all(folded.layers[1].thresholds == 0)
        assert folded.layers[2].thresholds is None

    def test_paper_architecture_threshold_counts(self):
        net = make_net((784, 128, 64, 10))
        folded = fold_model(net)
        assert folded.dims == (784, 128, 64, 10)
        assert folded.layers[0].thresholds.shape == (128,)
        assert folded.layers[1].thresholds.shape == (64,)
        assert folded.layers[2].thresholds is None

    def test_exhaustive_z_sweep_toy_net(self):
        # 4-2-2 net: hidden neurons see 4 inputs, so z in {-4,-2,0,2,4};
        # threshold comparison must equal sign(BN(z)) at all 5 points
        rng = np.random.default_rng(1)
        net = make_net((4, 2, 2), seed=2)
        hidden = net.layers[0]
        hidden.bn.mu = rng.normal(scale=2.0, size=2)
        hidden.bn.sigma2 = rng.uniform(0.5, 4.0, size=2)
        hidden.bn.beta = rng.normal(size=2)
        folded = fold_model(net)
        for j in range(2):
            t = folded.layers[0].thresholds[j]
            bn = hidden.bn
            for z in (-4, -2, 0, 2, 4):
                want = bn_of(z, bn.mu[j], bn.beta[j], bn.sigma2[j], bn.eps) >= 0
                assert (z >= t) == want

    def test_clamp_callback(self):
        net = make_net((8, 4, 2))
        net.layers[0].bn.mu[:] = 5000.0
        events = []
        fold_model(net, on_clamp=lambda i, n: events.append((i, n)))
        assert events == [(0, 4)]

    def test_fold_thresholds_matches_scalar(self):
        rng = np.random.default_rng(3)
        bn = BNStats(16, eps=1e-3)
        bn.mu = rng.normal(scale=20, size=16)
        bn.sigma2 = rng.uniform(0.1, 50, size=16)
        bn.beta = rng.normal(size=16)
        vec, clamped = fold_thresholds(bn)
        assert clamped == 0
        for j in range(16):
            assert vec[j] == fold_threshold(bn.mu[j], bn.beta[j], bn.sigma2[j], bn.eps)


class TestFoldedModelValidation:
    def test_output_layer_must_lack_thresholds(self):
        w = binarize_weights(np.ones((2, 4)))
        with pytest.raises(ValueError, match="output layer"):
            FoldedModel((FoldedLayer(w, np.zeros(2, np.int64)),))

    def test_hidden_layer_needs_thresholds(self):
        w1 = binarize_weights(np.ones((2, 4)))
        w2 = binarize_weights(np.ones((3, 2)))
        with pytest.raises(ValueError, match="hidden layer"):
            FoldedModel((FoldedLayer(w1, None), FoldedLayer(w2, None)))

    def test_dimension_chaining(self):
        w1 = binarize_weights(np.ones((2, 4)))
        w2 = binarize_weights(np.ones((3, 5)))
        with pytest.raises(ValueError, match="chain"):
            FoldedModel((FoldedLayer(w1, np.zeros(2, np.int64)), FoldedLayer(w2, None)))

    def test_threshold_range_enforced(self):
        w = binarize_weights(np.ones((1, 4)))
        with pytest.raises(ValueError, match="11|range|\\["):
            FoldedLayer(w, np.array([2000], np.int64))


class TestFoldedEquivalenceTrained:
    def test_trained_toy_model_full_z_sweep(self):
        # quick-trained small net; exhaustively check every achievable z of
        # every hidden neuron against the sign of the normalized value
        rng = np.random.default_rng(4)
        images = rng.integers(0, 256, size=(64, 28, 28)).astype(np.uint8)
        labels = rng.integers(0, 10, size=64).astype(np.uint8)
        ds = Dataset(images, labels, "train")
        cfg = TrainConfig(epochs=2, dims=(784, 8, 6, 10), seed=5, batch_size=16)
        net, _ = train(cfg, ds)
        folded = fold_model(net)
        for li in range(2):
            bn = net.layers[li].bn
            n = net.layers[li].in_features
            for j in range(net.layers[li].out_features):
                t = folded.layers[li].thresholds[j]
                for z in range(-n, n + 1, 2):
                    want = bn_of(z, bn.mu[j], bn.beta[j], bn.sigma2[j], bn.eps) >= 0
                    assert (z >= t) == want
