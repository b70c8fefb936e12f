"""Real-FFT amplitude spectra, plain and differentiable."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, _make


def rfft_amplitude(signal) -> np.ndarray:
    """One-sided amplitude spectrum |X_k| for k = 0 .. floor(L/2).

    amplitudes[k] = |sum_t x_t * exp(-i 2 pi k t / L)|.
    """
    x = np.asarray(signal, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty signal")
    return np.abs(np.fft.rfft(x))


def rfft_amplitude_tensor(x: Tensor) -> Tensor:
    """Differentiable amplitude spectrum along the last axis.

    Gradient is exact except at bins with zero amplitude, where the
    subgradient 0 is used.
    """
    if x.data.shape[-1] == 0:
        raise ValueError("empty signal")
    c = np.fft.rfft(x.data, axis=-1)
    amp = np.abs(c)

    def bw(g, a=x, c=c, amp=amp):
        length = a.data.shape[-1]
        safe = np.where(amp > 0, amp, 1.0)
        v = g * (c / safe)
        v = np.where(amp > 0, v, 0.0)
        full = np.zeros(a.data.shape[:-1] + (length,), dtype=complex)
        full[..., : amp.shape[-1]] = np.conj(v)
        a._acc(np.real(np.fft.fft(full, axis=-1)))

    return _make(amp, (x,), bw)
