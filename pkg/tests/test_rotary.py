"""Rotation algebra, frequency modulation and feature extraction."""

import numpy as np
import pytest

from adaptcast.autodiff import Tensor, finite_diff_grad, grad
from adaptcast.rotary import (
    ModulationNet,
    adapt_frequencies,
    apply_rotation,
    base_frequencies,
    fft_feature_bins,
)


class TestBaseFrequencies:
    def test_first_frequency_is_one(self):
        for b in (2.0, 500.0, 10000.0):
            assert base_frequencies(64, b)[0] == 1.0

    def test_spot_value_at_last_pair(self):
        th = base_frequencies(64, 10000.0)
        assert abs(th[31] - 1.33e-4) / 1.33e-4 < 0.01

    def test_strictly_decreasing(self):
        th = base_frequencies(64)
        assert np.all(np.diff(th) < 0)

    def test_rejects_odd_dim_and_unit_base(self):
        with pytest.raises(ValueError):
            base_frequencies(7)
        with pytest.raises(ValueError):
            base_frequencies(4, 1.0)

    def test_direct_evaluation(self):
        th = base_frequencies(4, np.e)
        assert abs(th[1] - np.exp(-0.5)) < 1e-12


class TestRotation:
    def test_zero_position_is_identity(self):
        rng = np.random.default_rng(0)
        v = rng.normal(size=(1, 8))
        out = apply_rotation(v, [0], base_frequencies(8))
        np.testing.assert_allclose(out.data, v, atol=1e-15)

    def test_quarter_turn_by_hand(self):
        out = apply_rotation(np.array([[1.0, 0.0]]), [1], np.array([np.pi / 2]))
        np.testing.assert_allclose(out.data, [[0.0, 1.0]], atol=1e-12)

    def test_norm_preserved(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            d = 2 * int(rng.integers(1, 16))
            v = rng.normal(size=(5, d))
            pos = rng.integers(0, 1000, size=5)
            theta = rng.uniform(0, 2, size=d // 2)
            out = apply_rotation(v, pos, theta).data
            np.testing.assert_allclose(
                np.linalg.norm(out, axis=1), np.linalg.norm(v, axis=1), rtol=1e-10
            )

    def test_relative_position_identity(self):
        """<R_m q, R_n k> depends only on n - m."""
        rng = np.random.default_rng(2)
        for _ in range(300):
            d = 2 * int(rng.integers(1, 33))
            q = rng.normal(size=d)
            k = rng.normal(size=d)
            theta = rng.uniform(0, 1.5, size=d // 2)
            m = int(rng.integers(0, 513))
            n = int(rng.integers(max(0, m - 512), m + 513))
            rq = apply_rotation(q[None, :], [m], theta).data[0]
            rk = apply_rotation(k[None, :], [n], theta).data[0]
            rel = apply_rotation(k[None, :], [n - m], theta).data[0]
            assert abs(np.dot(rq, rk) - np.dot(q, rel)) < 1e-6


class TestAdaptFrequencies:
    def test_identity_modulation(self):
        th = base_frequencies(16)
        out = adapt_frequencies(th, np.ones(8), np.zeros(8)).data
        np.testing.assert_allclose(out, np.exp(np.log(th)))

    def test_zero_gamma_zero_beta_gives_unit_frequencies(self):
        th = base_frequencies(16)
        out = adapt_frequencies(th, np.zeros(8), np.zeros(8)).data
        np.testing.assert_allclose(out, np.ones(8))

    def test_beta_log2_doubles(self):
        th = base_frequencies(16)
        out = adapt_frequencies(th, np.ones(8), np.full(8, np.log(2.0))).data
        np.testing.assert_allclose(out, 2 * th, rtol=1e-12)

    def test_linear_space_option(self):
        th = base_frequencies(8)
        out = adapt_frequencies(th, np.full(4, 2.0), np.full(4, 0.5), log_space=False).data
        np.testing.assert_allclose(out, 2 * th + 0.5)


class TestFeatures:
    def test_all_masked_series_normalizes_to_offset(self):
        rng = np.random.default_rng(3)
        net = ModulationNet(8, 6, 8, 1, rng)
        net.ln_offset.data[:] = rng.normal(size=8)
        out = net.features(rng.normal(size=(1, 32)), mask=np.zeros((1, 32), dtype=bool))
        np.testing.assert_allclose(out.data[0], net.ln_offset.data, atol=1e-12)

    def test_constant_series_energy_at_dc(self):
        bins = fft_feature_bins(np.full(16, 3.0), n_features=4)
        assert bins[0] > 0
        np.testing.assert_allclose(bins[1:], 0.0, atol=1e-9)

    def test_sine_peaks_at_its_bin(self):
        t = np.arange(64)
        x = np.sin(2 * np.pi * 4 * t / 64)
        bins = fft_feature_bins(x, n_features=8)
        assert np.argmax(bins) == 4

    def test_short_series_zero_padded(self):
        bins = fft_feature_bins(np.ones(4), n_features=10)
        assert bins.shape == (10,)
        np.testing.assert_allclose(bins[3:], 0.0)


class TestModulationNet:
    def test_zero_init_gives_identity_modulation(self):
        rng = np.random.default_rng(4)
        net = ModulationNet(8, 6, 12, 2, rng)
        feats = net.features(rng.normal(size=(3, 40)))
        for layer in range(2):
            gamma, beta = net.modulate(feats, layer)
            np.testing.assert_allclose(gamma.data, 1.0)
            np.testing.assert_allclose(beta.data, 0.0)

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        net = ModulationNet(8, 6, 8, 1, rng)
        for p in net.layers[0].values():
            p.data[:] = rng.normal(size=p.data.shape)
        x = rng.normal(size=(2, 30))
        g1, b1 = net.modulate(net.features(x), 0)
        g2, b2 = net.modulate(net.features(x), 0)
        assert np.array_equal(g1.data, g2.data) and np.array_equal(b1.data, b2.data)

    def test_gradients_flow_through_norm_and_mlp(self):
        rng = np.random.default_rng(6)
        net = ModulationNet(6, 4, 8, 1, rng)
        for p in net.layers[0].values():
            p.data[:] = 0.1 * rng.normal(size=p.data.shape)
        x = rng.normal(size=(2, 20))
        w = rng.normal(size=(2, 4))
        params = list(net.named_parameters().values())

        def f():
            gamma, beta = net.modulate(net.features(x), 0)
            theta = adapt_frequencies(base_frequencies(8), gamma, beta)
            return (theta * w).sum()

        analytic = grad(f, params)
        numeric = finite_diff_grad(f, params, h=1e-5)
        for a, n in zip(analytic, numeric):
            denom = max(np.abs(a).max(), np.abs(n).max(), 1e-8)
            assert np.abs(a - n).max() / denom < 1e-4

    def test_differentiable_fft_option_matches_default_forward(self):
        rng = np.random.default_rng(7)
        net_a = ModulationNet(6, 4, 8, 1, rng)
        rng2 = np.random.default_rng(7)
        net_b = ModulationNet(6, 4, 8, 1, rng2, differentiable_fft=True)
        x = rng.normal(size=(2, 20))
        np.testing.assert_allclose(net_a.features(x).data, net_b.features(x).data, atol=1e-12)
