"""Gradient and spectrum checks for the numeric substrate.

Analytic gradients are verified against the central finite-difference oracle;
spectra are verified against a direct O(L^2) DFT summation.
"""

import numpy as np
import pytest

from adaptcast import autodiff as ad
from adaptcast.autodiff import Tensor, concat, finite_diff_grad, gelu, grad, layer_norm, softmax
from adaptcast.spectral import rfft_amplitude, rfft_amplitude_tensor


def direct_dft_amplitude(x):
    """Independent oracle: amplitude spectrum by explicit summation."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    bins = n // 2 + 1
    out = np.zeros(bins)
    for k in range(bins):
        acc = 0.0 + 0.0j
        for t in range(n):
            acc += x[t] * np.exp(-2j * np.pi * k * t / n)
        out[k] = abs(acc)
    return out


def rel_err(a, b):
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return np.max(np.abs(a - b)) / denom


class TestSpectrum:
    def test_constant_signal_all_energy_at_dc(self):
        c = -1.7
        amp = rfft_amplitude([c] * 8)
        np.testing.assert_allclose(amp, [8 * abs(c), 0, 0, 0, 0], atol=1e-12)

    def test_pure_sine_single_bin(self):
        t = np.arange(64)
        x = np.sin(2 * np.pi * 4 * t / 64)
        amp = rfft_amplitude(x)
        oracle = direct_dft_amplitude(x)
        np.testing.assert_allclose(amp, oracle, atol=1e-9)
        assert abs(amp[4] - 32.0) < 1e-9
        others = np.delete(amp, 4)
        assert np.all(others <= 1e-9)

    def test_zero_signal(self):
        np.testing.assert_allclose(rfft_amplitude(np.zeros(4)), [0, 0, 0])

    def test_empty_signal_rejected(self):
        with pytest.raises(ValueError, match="empty signal"):
            rfft_amplitude([])

    def test_matches_direct_dft_on_random_signals(self):
        rng = np.random.default_rng(0)
        for n in (1, 2, 3, 7, 16, 33, 128):
            x = rng.normal(size=n)
            assert rel_err(rfft_amplitude(x), direct_dft_amplitude(x)) < 1e-10

    def test_parseval(self):
        rng = np.random.default_rng(1)
        for n in (8, 129, 512, 1024):
            x = rng.normal(size=n)
            amp = rfft_amplitude(x)
            # rebuild the two-sided energy from the one-sided amplitudes
            two_sided = amp**2
            if n % 2 == 0:
                energy = two_sided[0] + 2 * two_sided[1:-1].sum() + two_sided[-1]
            else:
                energy = two_sided[0] + 2 * two_sided[1:].sum()
            lhs = np.sum(x * x)
            assert abs(lhs - energy / n) / abs(lhs) < 1e-8


class TestSoftmax:
    def test_symmetry(self):
        out = softmax(Tensor([0.0, 0.0])).data
        np.testing.assert_allclose(out, [0.5, 0.5])

    def test_hand_value(self):
        out = softmax(Tensor([np.log(1.0), np.log(3.0)])).data
        np.testing.assert_allclose(out, [0.25, 0.75], atol=1e-12)

    def test_no_overflow_on_large_logits(self):
        out = softmax(Tensor([1000.0, 0.0])).data
        assert np.all(np.isfinite(out))
        assert out[0] > 1 - 1e-12

    def test_probability_vector_for_extreme_inputs(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            x = rng.uniform(-1e6, 1e6, size=rng.integers(1, 12))
            out = softmax(Tensor(x)).data
            assert np.all(out >= 0)
            assert abs(out.sum() - 1.0) < 1e-12

    def test_shift_invariance(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=9)
        a = softmax(Tensor(x)).data
        b = softmax(Tensor(x + 123.456)).data
        np.testing.assert_allclose(a, b, atol=1e-12)


class TestLayerNorm:
    def test_constant_input_maps_to_offset(self):
        out = layer_norm(Tensor([1.0, 1.0, 1.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, [0.0, 0.0, 0.0], atol=1e-12)

    def test_hand_value(self):
        out = layer_norm(Tensor([-1.0, 1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-4)

    def test_zero_gain_returns_offset(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=6)
        off = rng.normal(size=6)
        out = layer_norm(Tensor(x), Tensor(np.zeros(6)), Tensor(off))
        np.testing.assert_allclose(out.data, off)

    def test_normalizes_mean_and_variance(self):
        rng = np.random.default_rng(5)
        x = rng.normal(2.0, 3.0, size=(4, 33))
        out = layer_norm(Tensor(x), Tensor(np.ones(33)), Tensor(np.zeros(33))).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)


class TestGradients:
    """Every differentiable op matches the finite-difference oracle."""

    def check(self, build, params, tol=1e-4, h=1e-4):
        analytic = grad(build, params)
        numeric = finite_diff_grad(build, params, h=h)
        for a, n in zip(analytic, numeric):
            assert rel_err(a, n) < tol, (a, n)

    def test_finite_diff_on_square(self):
        p = Tensor(3.0, requires_grad=True)
        (g,) = finite_diff_grad(lambda: p * p, [p])
        assert abs(g - 6.0) < 1e-6

    def test_finite_diff_on_constant(self):
        p = Tensor([1.0, 2.0], requires_grad=True)
        (g,) = finite_diff_grad(lambda: Tensor(5.0), [p])
        np.testing.assert_allclose(g, 0.0)

    def test_finite_diff_on_sum(self):
        p = Tensor([1.0, -2.0, 0.5], requires_grad=True)
        (g,) = finite_diff_grad(lambda: p.sum(), [p])
        np.testing.assert_allclose(g, 1.0, atol=1e-9)

    def test_arithmetic_chain(self):
        rng = np.random.default_rng(10)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(3, 4)), requires_grad=True)

        def f():
            return ((a * b + a - b / 2.0) * (a + 2.0)).sum()

        self.check(f, [a, b])

    def test_broadcasting(self):
        rng = np.random.default_rng(11)
        a = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4,)), requires_grad=True)

        def f():
            return ((a + b) * b).mean()

        self.check(f, [a, b])

    def test_matmul(self):
        rng = np.random.default_rng(12)
        a = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        b = Tensor(rng.normal(size=(5, 2)), requires_grad=True)

        def f():
            return ((a @ b) ** 2).sum()

        self.check(f, [a, b])

    def test_batched_matmul_with_broadcast(self):
        rng = np.random.default_rng(13)
        a = Tensor(rng.normal(size=(2, 3, 4, 5)), requires_grad=True)
        b = Tensor(rng.normal(size=(5, 3)), requires_grad=True)

        def f():
            return ((a @ b) * 0.3).sum()

        self.check(f, [a, b])

    def test_pointwise_nonlinearities(self):
        rng = np.random.default_rng(14)
        x = Tensor(rng.normal(size=7), requires_grad=True)

        def f():
            return (x.tanh() + x.exp() * 0.1 + gelu(x) + x.sin() - x.cos()).sum()

        self.check(f, [x])

    def test_log_sqrt(self):
        x = Tensor([0.5, 1.5, 4.0], requires_grad=True)

        def f():
            return (x.log() + x.sqrt()).sum()

        self.check(f, [x])

    def test_softmax_grad(self):
        rng = np.random.default_rng(15)
        x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        w = rng.normal(size=(4, 6))

        def f():
            return (softmax(x, axis=-1) * w).sum()

        self.check(f, [x])

    def test_layer_norm_grad(self):
        rng = np.random.default_rng(16)
        x = Tensor(rng.normal(size=(3, 8)), requires_grad=True)
        gain = Tensor(rng.normal(size=8), requires_grad=True)
        off = Tensor(rng.normal(size=8), requires_grad=True)
        w = rng.normal(size=(3, 8))

        def f():
            return (layer_norm(x, gain, off) * w).sum()

        self.check(f, [x, gain, off])

    def test_slicing_and_concat(self):
        rng = np.random.default_rng(17)
        x = Tensor(rng.normal(size=(6, 4)), requires_grad=True)

        def f():
            a = x[0::2]
            b = x[1::2]
            return (concat([a * 2.0, b], axis=0) ** 2).sum()

        self.check(f, [x])

    def test_take_with_duplicates(self):
        rng = np.random.default_rng(18)
        x = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        idx = np.array([0, 2, 2, 4, 0])

        def f():
            return (x.take(idx) * 1.5).sum()

        self.check(f, [x])

    def test_repeat(self):
        rng = np.random.default_rng(19)
        x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        w = rng.normal(size=(2, 6, 4))

        def f():
            return (x.repeat(2, axis=1) * w).sum()

        self.check(f, [x])

    def test_reshape_transpose(self):
        rng = np.random.default_rng(20)
        x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)

        def f():
            return (x.transpose((1, 0, 2)).reshape((3, 8)) ** 2).sum()

        self.check(f, [x])

    def test_rfft_amplitude_tensor_grad(self):
        rng = np.random.default_rng(21)
        x = Tensor(rng.normal(size=(2, 12)), requires_grad=True)
        w = rng.normal(size=(2, 7))

        def f():
            return (rfft_amplitude_tensor(x) * w).sum()

        self.check(f, [x], tol=1e-5)

    def test_random_small_tensor_compositions(self):
        rng = np.random.default_rng(22)
        for trial in range(5):
            a = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
            b = Tensor(rng.normal(size=(4, 4)), requires_grad=True)

            def f():
                h = (a @ b).tanh()
                return (softmax(h, axis=-1) * b.exp()).sum()

            self.check(f, [a, b])


class TestGraphDiscipline:
    def test_numpy_ufuncs_are_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(TypeError):
            np.sin(x)

    def test_backward_requires_scalar(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError):
            (x * 2.0).backward()

    def test_no_grad_blocks_recording(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with ad.no_grad():
            y = (x * 3.0).sum()
        assert not y.requires_grad

    def test_grad_accumulates_across_reuse(self):
        x = Tensor(2.0, requires_grad=True)
        y = x * x + x
        y.backward()
        assert abs(float(x.grad) - 5.0) < 1e-12
