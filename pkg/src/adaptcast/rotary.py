"""Rotary position embeddings with per-instance frequency modulation.

Base rotation frequencies fall geometrically across coordinate pairs. A small
network turns each instance's low-frequency amplitude spectrum into per-layer
(scale, shift) pairs that remap the frequencies in log space:

    theta'_j = exp(gamma_j * ln(theta_j) + beta_j)

so gamma = 1, beta = 0 reproduces the unmodulated rotation exactly. The
final MLP layer is zero-initialized, which makes that identity the starting
point of training. Disabling modulation runs the same code path with
constant gamma = 1, beta = 0, so fixed-frequency inference is bit-identical
to the identity modulation.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, as_tensor, concat, gelu, layer_norm
from .spectral import rfft_amplitude, rfft_amplitude_tensor

__all__ = [
    "base_frequencies",
    "fft_feature_bins",
    "ModulationNet",
    "adapt_frequencies",
    "apply_rotation",
    "rotate_pairs",
]


def base_frequencies(head_dim: int, base: float = 10000.0) -> np.ndarray:
    """theta_j = base^(-2j / head_dim) for j = 0 .. head_dim/2 - 1."""
    if head_dim <= 0 or head_dim % 2:
        raise ValueError("head_dim must be a positive even integer")
    if base <= 1.0:
        raise ValueError("base must exceed 1")
    j = np.arange(head_dim // 2, dtype=np.float64)
    return base ** (-2.0 * j / head_dim)


def fft_feature_bins(values, mask=None, n_features: int = 32) -> np.ndarray:
    """First ``n_features`` amplitude bins of the masked series, zero-padded
    when the series is too short to supply them."""
    x = np.asarray(values, dtype=np.float64)
    if mask is not None:
        x = np.where(np.asarray(mask, dtype=bool), x, 0.0)
    amp = rfft_amplitude(x)
    out = np.zeros(n_features)
    k = min(n_features, amp.shape[-1])
    out[:k] = amp[:k]
    return out


class ModulationNet:
    """Per-layer MLPs mapping normalized FFT features to (gamma, beta).

    The feature layer norm is shared across layers; each transformer layer
    owns its own two-layer MLP. With ``differentiable_fft`` the amplitude
    extraction itself joins the gradient graph; by default gradients stop at
    the raw spectrum and flow only through the norm and MLPs.
    """

    def __init__(
        self,
        n_features: int,
        hidden: int,
        head_dim: int,
        n_layers: int,
        rng: np.random.Generator,
        differentiable_fft: bool = False,
    ):
        if head_dim % 2:
            raise ValueError("head_dim must be even")
        self.n_features = n_features
        self.head_dim = head_dim
        self.n_layers = n_layers
        self.differentiable_fft = differentiable_fft
        self.ln_gain = Tensor(np.ones(n_features), requires_grad=True)
        self.ln_offset = Tensor(np.zeros(n_features), requires_grad=True)
        lim = np.sqrt(6.0 / (n_features + hidden))
        self.layers = []
        for _ in range(n_layers):
            self.layers.append(
                {
                    "w1": Tensor(rng.uniform(-lim, lim, size=(n_features, hidden)), requires_grad=True),
                    "b1": Tensor(np.zeros(hidden), requires_grad=True),
                    # zero final layer: training starts at the identity modulation
                    "w2": Tensor(np.zeros((hidden, head_dim)), requires_grad=True),
                    "b2": Tensor(np.zeros(head_dim), requires_grad=True),
                }
            )

    def features(self, values: np.ndarray, mask=None) -> Tensor:
        """Normalized FFT feature vectors, one row per instance."""
        x = np.atleast_2d(np.asarray(values, dtype=np.float64))
        if mask is not None:
            x = np.where(np.atleast_2d(np.asarray(mask, dtype=bool)), x, 0.0)
        if self.differentiable_fft:
            amp = rfft_amplitude_tensor(as_tensor(x))
            k = min(self.n_features, amp.shape[-1])
            if k < self.n_features:
                pad = Tensor(np.zeros((x.shape[0], self.n_features - k)))
                feats = concat([amp[:, :k], pad], axis=1)
            else:
                feats = amp[:, : self.n_features]
        else:
            rows = [fft_feature_bins(row, n_features=self.n_features) for row in x]
            feats = as_tensor(np.stack(rows))
        return layer_norm(feats, self.ln_gain, self.ln_offset)

    def modulate(self, feats: Tensor, layer: int):
        """(gamma, beta) for one transformer layer, one row per instance."""
        p = self.layers[layer]
        h = gelu(feats @ p["w1"] + p["b1"])
        out = h @ p["w2"] + p["b2"]
        half = self.head_dim // 2
        gamma = out[:, :half] + 1.0
        beta = out[:, half:]
        return gamma, beta

    def identity_modulation(self, batch: int):
        half = self.head_dim // 2
        return Tensor(np.ones((batch, half))), Tensor(np.zeros((batch, half)))

    def named_parameters(self, prefix: str = "modnet") -> dict:
        out = {f"{prefix}.ln_gain": self.ln_gain, f"{prefix}.ln_offset": self.ln_offset}
        for i, p in enumerate(self.layers):
            for k, v in p.items():
                out[f"{prefix}.layer{i}.{k}"] = v
        return out


def adapt_frequencies(theta_init, gamma, beta, log_space: bool = True) -> Tensor:
    """Remap base frequencies by the instance's (gamma, beta).

    log_space: theta' = exp(gamma * ln(theta) + beta)   (default)
    linear:    theta' = gamma * theta + beta
    """
    g = as_tensor(gamma)
    b = as_tensor(beta)
    if log_space:
        log_theta = np.log(np.asarray(theta_init, dtype=np.float64))
        return (g * log_theta + b).exp()
    return g * np.asarray(theta_init, dtype=np.float64) + b


def rotate_pairs(vectors: Tensor, angles: Tensor) -> Tensor:
    """Rotate consecutive coordinate pairs (v_2j, v_2j+1) by ``angles``.

    vectors: (..., T, D); angles broadcastable to (..., T, D/2).
    """
    v = as_tensor(vectors)
    ang = as_tensor(angles)
    c = ang.cos()
    s = ang.sin()
    even = v[..., 0::2]
    odd = v[..., 1::2]
    re = even * c - odd * s
    im = even * s + odd * c
    stacked = concat(
        [re.reshape(re.shape + (1,)), im.reshape(im.shape + (1,))], axis=-1
    )
    return stacked.reshape(v.shape)


def apply_rotation(vectors, positions, theta) -> Tensor:
    """Rotate a (T, D) stack of vectors by angle position * theta per pair."""
    v = as_tensor(vectors)
    th = as_tensor(theta)
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    angles = as_tensor(pos) * th.reshape((1, -1))
    return rotate_pairs(v, angles)
