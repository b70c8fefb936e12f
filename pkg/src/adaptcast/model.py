"""Encoder-decoder quantile forecaster over dynamically patched tokens.

Pipeline per instance: standardize by context mean/scale, tokenize with the
dynamic patch router, encode with rotary self-attention whose frequencies are
modulated per instance, cross-attend a fixed set of learnable forecast
tokens, and decode each token into a span of future steps at nine quantile
levels. Horizons longer than one decoder pass are rolled out by appending the
median path to the context and re-running the pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, as_tensor, concat, gelu, layer_norm, no_grad
from .checkpoint import load_checkpoint, save_checkpoint
from .patching import (
    ExpertMLP,
    PatchConfig,
    RouterState,
    _decision_from_selection,
    _fuse_batch,
    _route_scores,
    _select,
    patchify_coarsest,
)
from .rotary import ModulationNet, adapt_frequencies, base_frequencies, rotate_pairs

__all__ = ["ModelConfig", "QuantileForecast", "Forecaster", "standardize_stats"]

DEFAULT_LEVELS = tuple(round(0.1 * k, 1) for k in range(1, 10))


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    heads: int = 2
    d_model: int = 64
    d_ff: int = 128
    d_expert: int = 64
    patch: PatchConfig = field(default_factory=PatchConfig)
    rope_base: float = 10000.0
    fft_features: int = 32
    mod_hidden: int = 32
    forecast_tokens: int = 2  # J: future patches emitted per decoder pass
    token_span: int = 24  # steps covered by one forecast token
    quantile_levels: tuple = DEFAULT_LEVELS
    adaptive_rope: bool = True
    rope_log_space: bool = True
    differentiable_fft: bool = False
    decoder_self_attention: bool = True

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if (self.d_model // self.heads) % 2:
            raise ValueError("per-head dimension must be even")
        if self.forecast_tokens < 1 or self.token_span < 1:
            raise ValueError("forecast_tokens and token_span must be >= 1")
        levels = tuple(float(a) for a in self.quantile_levels)
        if any(not (0 < a < 1) for a in levels) or any(
            a >= b for a, b in zip(levels, levels[1:])
        ):
            raise ValueError("quantile levels must be strictly increasing in (0, 1)")
        object.__setattr__(self, "quantile_levels", levels)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    @property
    def horizon_per_pass(self) -> int:
        return self.forecast_tokens * self.token_span

    def to_dict(self) -> dict:
        patch = {
            "patch_sizes": list(self.patch.patch_sizes),
            "n_null": self.patch.n_null,
            "top_k": self.patch.top_k,
            "target_load": list(self.patch.target_load),
            "bias_update_speed": self.patch.bias_update_speed,
            "softmax_over_all": self.patch.softmax_over_all,
        }
        out = {
            "layers": self.layers,
            "heads": self.heads,
            "d_model": self.d_model,
            "d_ff": self.d_ff,
            "d_expert": self.d_expert,
            "patch": patch,
            "rope_base": self.rope_base,
            "fft_features": self.fft_features,
            "mod_hidden": self.mod_hidden,
            "forecast_tokens": self.forecast_tokens,
            "token_span": self.token_span,
            "quantile_levels": list(self.quantile_levels),
            "adaptive_rope": self.adaptive_rope,
            "rope_log_space": self.rope_log_space,
            "differentiable_fft": self.differentiable_fft,
            "decoder_self_attention": self.decoder_self_attention,
        }
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        patch = d.pop("patch")
        return cls(
            patch=PatchConfig(
                patch_sizes=tuple(patch["patch_sizes"]),
                n_null=patch["n_null"],
                top_k=patch["top_k"],
                target_load=tuple(patch["target_load"]),
                bias_update_speed=patch["bias_update_speed"],
                softmax_over_all=patch["softmax_over_all"],
            ),
            **{k: tuple(v) if k == "quantile_levels" else v for k, v in d.items()},
        )


@dataclass
class QuantileForecast:
    """Horizon x quantile-level grid in original units, sorted per step."""

    values: np.ndarray
    levels: tuple
    context_mean: float
    context_scale: float

    def median(self) -> np.ndarray:
        idx = int(np.argmin(np.abs(np.asarray(self.levels) - 0.5)))
        return self.values[:, idx]

    def level(self, alpha: float) -> np.ndarray:
        idx = int(np.argmin(np.abs(np.asarray(self.levels) - alpha)))
        return self.values[:, idx]


def standardize_stats(values: np.ndarray, mask=None, floor: float = 1e-6):
    """Context mean and scale over observed points, scale floored."""
    x = np.asarray(values, dtype=np.float64)
    if mask is not None:
        x = x[np.asarray(mask, dtype=bool)]
    if x.size == 0:
        return 0.0, 1.0
    return float(x.mean()), float(max(x.std(), floor))


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        lim = np.sqrt(6.0 / (d_in + d_out))
        self.w = Tensor(rng.uniform(-lim, lim, size=(d_in, d_out)), requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b

    def named_parameters(self, prefix: str) -> dict:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class Norm:
    def __init__(self, dim: int):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.offset = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.offset)

    def named_parameters(self, prefix: str) -> dict:
        return {f"{prefix}.gain": self.gain, f"{prefix}.offset": self.offset}


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return x.reshape((b, t, heads, d // heads)).transpose((0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return x.transpose((0, 2, 1, 3)).reshape((b, t, h * dh))


class Attention:
    """Multi-head attention; optional rotary angles, optional key mask."""

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.scale = 1.0 / np.sqrt(d_model // heads)
        self.q = Linear(d_model, d_model, rng)
        self.k = Linear(d_model, d_model, rng)
        self.v = Linear(d_model, d_model, rng)
        self.o = Linear(d_model, d_model, rng)

    def __call__(self, x_q: Tensor, x_kv: Tensor, key_mask=None, angles=None) -> Tensor:
        q = _split_heads(self.q(x_q), self.heads)
        k = _split_heads(self.k(x_kv), self.heads)
        v = _split_heads(self.v(x_kv), self.heads)
        if angles is not None:
            q = rotate_pairs(q, angles)
            k = rotate_pairs(k, angles)
        scores = (q @ k.transpose((0, 1, 3, 2))) * self.scale
        if key_mask is not None:
            bias = np.where(np.asarray(key_mask, dtype=bool), 0.0, -1e30)
            scores = scores + as_tensor(bias[:, None, None, :])
        att = scores.softmax(axis=-1)
        return self.o(_merge_heads(att @ v))

    def named_parameters(self, prefix: str) -> dict:
        out = {}
        for name, lin in (("q", self.q), ("k", self.k), ("v", self.v), ("o", self.o)):
            out.update(lin.named_parameters(f"{prefix}.{name}"))
        return out


class EncoderLayer:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.ln1 = Norm(cfg.d_model)
        self.attn = Attention(cfg.d_model, cfg.heads, rng)
        self.ln2 = Norm(cfg.d_model)
        self.ff1 = Linear(cfg.d_model, cfg.d_ff, rng)
        self.ff2 = Linear(cfg.d_ff, cfg.d_model, rng)

    def __call__(self, x: Tensor, key_mask, angles) -> Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h, key_mask=key_mask, angles=angles)
        return x + self.ff2(gelu(self.ff1(self.ln2(x))))

    def named_parameters(self, prefix: str) -> dict:
        out = {}
        out.update(self.ln1.named_parameters(f"{prefix}.ln1"))
        out.update(self.attn.named_parameters(f"{prefix}.attn"))
        out.update(self.ln2.named_parameters(f"{prefix}.ln2"))
        out.update(self.ff1.named_parameters(f"{prefix}.ff1"))
        out.update(self.ff2.named_parameters(f"{prefix}.ff2"))
        return out


class DecoderLayer:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.self_attention = cfg.decoder_self_attention
        if self.self_attention:
            self.ln_self = Norm(cfg.d_model)
            self.attn_self = Attention(cfg.d_model, cfg.heads, rng)
        self.ln_cross = Norm(cfg.d_model)
        self.attn_cross = Attention(cfg.d_model, cfg.heads, rng)
        self.ln_ff = Norm(cfg.d_model)
        self.ff1 = Linear(cfg.d_model, cfg.d_ff, rng)
        self.ff2 = Linear(cfg.d_ff, cfg.d_model, rng)

    def __call__(self, x: Tensor, memory: Tensor, memory_mask) -> Tensor:
        if self.self_attention:
            h = self.ln_self(x)
            x = x + self.attn_self(h, h)
        x = x + self.attn_cross(self.ln_cross(x), memory, key_mask=memory_mask)
        return x + self.ff2(gelu(self.ff1(self.ln_ff(x))))

    def named_parameters(self, prefix: str) -> dict:
        out = {}
        if self.self_attention:
            out.update(self.ln_self.named_parameters(f"{prefix}.ln_self"))
            out.update(self.attn_self.named_parameters(f"{prefix}.attn_self"))
        out.update(self.ln_cross.named_parameters(f"{prefix}.ln_cross"))
        out.update(self.attn_cross.named_parameters(f"{prefix}.attn_cross"))
        out.update(self.ln_ff.named_parameters(f"{prefix}.ln_ff"))
        out.update(self.ff1.named_parameters(f"{prefix}.ff1"))
        out.update(self.ff2.named_parameters(f"{prefix}.ff2"))
        return out


class ResidualHead:
    """Shared prediction head: FFN core plus a linear skip path."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        out_dim = cfg.token_span * len(cfg.quantile_levels)
        self.hidden = Linear(cfg.d_model, cfg.d_ff, rng)
        self.out = Linear(cfg.d_ff, out_dim, rng)
        self.skip = Linear(cfg.d_model, out_dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.out(gelu(self.hidden(x))) + self.skip(x)

    def named_parameters(self, prefix: str) -> dict:
        out = {}
        out.update(self.hidden.named_parameters(f"{prefix}.hidden"))
        out.update(self.out.named_parameters(f"{prefix}.out"))
        out.update(self.skip.named_parameters(f"{prefix}.skip"))
        return out


class Forecaster:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.router = RouterState.init(cfg.patch, rng)
        self.experts = [
            ExpertMLP(p, cfg.d_expert, cfg.d_model, rng) for p in cfg.patch.patch_sizes
        ]
        self.modnet = ModulationNet(
            cfg.fft_features,
            cfg.mod_hidden,
            cfg.head_dim,
            cfg.layers,
            rng,
            differentiable_fft=cfg.differentiable_fft,
        )
        self.theta_init = base_frequencies(cfg.head_dim, cfg.rope_base)
        self.encoder = [EncoderLayer(cfg, rng) for _ in range(cfg.layers)]
        self.encoder_norm = Norm(cfg.d_model)
        self.decoder = [DecoderLayer(cfg, rng) for _ in range(cfg.layers)]
        self.decoder_norm = Norm(cfg.d_model)
        lim = np.sqrt(6.0 / (2 * cfg.d_model))
        self.forecast_tokens = Tensor(
            rng.uniform(-lim, lim, size=(cfg.forecast_tokens, cfg.d_model)),
            requires_grad=True,
        )
        self.head = ResidualHead(cfg, rng)

    # -- parameters -----------------------------------------------------------

    def named_parameters(self) -> dict:
        out = {"router.weights": self.router.weights}
        for i, e in enumerate(self.experts):
            out.update(e.named_parameters(f"experts.{i}"))
        out.update(self.modnet.named_parameters("modnet"))
        for i, layer in enumerate(self.encoder):
            out.update(layer.named_parameters(f"encoder.{i}"))
        out.update(self.encoder_norm.named_parameters("encoder_norm"))
        for i, layer in enumerate(self.decoder):
            out.update(layer.named_parameters(f"decoder.{i}"))
        out.update(self.decoder_norm.named_parameters("decoder_norm"))
        out["forecast_tokens"] = self.forecast_tokens
        out.update(self.head.named_parameters("head"))
        return out

    def modulation_parameter_names(self) -> set:
        return set(self.modnet.named_parameters("modnet"))

    # -- forward pieces ---------------------------------------------------------

    def _batch_tokens(self, values: np.ndarray, masks: np.ndarray, force_selected=None):
        """Tokenize a batch of equal-length series into padded embeddings.

        Returns (embeddings (B, T', d_model), token_valid (B, T'), decisions
        grouped per instance). Fusion runs once over all coarsest patches of
        the whole batch.
        """
        pcfg = self.cfg.patch
        b = values.shape[0]
        patch_rows = []
        pad_rows = []
        for i in range(b):
            x = np.where(masks[i], values[i], 0.0)
            patches, padm = patchify_coarsest(x, pcfg.coarsest)
            patch_rows.append(patches)
            pad_rows.append(padm)
        n = patch_rows[0].shape[0]
        stacked = as_tensor(np.concatenate(patch_rows, axis=0))
        sprime = _route_scores(stacked, self.router, pcfg)
        decisions = []
        for r in range(b * n):
            forced = None if force_selected is None else force_selected[r]
            sel = _select(sprime.data[r], pcfg, forced)
            d = _decision_from_selection(sprime.data[r], sel, pcfg, patch_index=r % n)
            decisions.append(d)
        flat, _ = _fuse_batch(stacked, sprime, decisions, pcfg, self.experts)

        counts = []
        valid_rows = []
        for i in range(b):
            cnt = 0
            vrow = []
            for d in decisions[i * n : (i + 1) * n]:
                pk = d.finest_size
                for m in range(d.token_count):
                    span = pad_rows[i][d.patch_index, m * pk : (m + 1) * pk]
                    vrow.append(not span.all())
                cnt += d.token_count
            counts.append(cnt)
            valid_rows.append(vrow)
        tmax = max(counts)
        pad_row_idx = flat.data.shape[0]
        idx = np.full((b, tmax), pad_row_idx, dtype=np.intp)
        offset = 0
        for i, cnt in enumerate(counts):
            idx[i, :cnt] = offset + np.arange(cnt)
            offset += cnt
        flat = concat([flat, Tensor(np.zeros((1, self.cfg.d_model)))], axis=0)
        emb = flat.take(idx.reshape(-1)).reshape((b, tmax, self.cfg.d_model))
        token_valid = np.zeros((b, tmax), dtype=bool)
        for i, vrow in enumerate(valid_rows):
            token_valid[i, : len(vrow)] = vrow
        grouped = [decisions[i * n : (i + 1) * n] for i in range(b)]
        return emb, token_valid, grouped

    def _layer_frequencies(self, values_std, masks, mode="adaptive", override=None):
        """Adapted rotation frequencies per encoder layer, (B, head_dim/2)."""
        b = values_std.shape[0]
        thetas = []
        if override is not None:
            for gamma, beta in override:
                thetas.append(
                    adapt_frequencies(
                        self.theta_init,
                        as_tensor(np.atleast_2d(gamma)),
                        as_tensor(np.atleast_2d(beta)),
                        log_space=self.cfg.rope_log_space,
                    )
                )
            return thetas
        if mode == "adaptive" and self.cfg.adaptive_rope:
            feats = self.modnet.features(values_std, masks)
            for layer in range(self.cfg.layers):
                gamma, beta = self.modnet.modulate(feats, layer)
                thetas.append(
                    adapt_frequencies(
                        self.theta_init, gamma, beta, log_space=self.cfg.rope_log_space
                    )
                )
            return thetas
        for _ in range(self.cfg.layers):
            gamma, beta = self.modnet.identity_modulation(b)
            thetas.append(
                adapt_frequencies(
                    self.theta_init, gamma, beta, log_space=self.cfg.rope_log_space
                )
            )
        return thetas

    def encode(self, emb: Tensor, token_valid: np.ndarray, thetas) -> Tensor:
        if emb.data.shape[1] == 0:
            raise ValueError("empty token sequence")
        b, t, _ = emb.shape
        positions = np.arange(t, dtype=np.float64).reshape(1, 1, t, 1)
        x = emb
        for layer, theta in zip(self.encoder, thetas):
            bsz = theta.shape[0]
            angles = as_tensor(positions) * theta.reshape((bsz, 1, 1, theta.shape[-1]))
            x = layer(x, token_valid, angles)
        return self.encoder_norm(x)

    def decode(self, memory: Tensor, memory_mask) -> Tensor:
        x = self.forecast_tokens.reshape((1,) + self.forecast_tokens.shape)
        for layer in self.decoder:
            x = layer(x, memory, memory_mask)
        return self.decoder_norm(x)

    def forward_std(self, values_std, masks, mode="adaptive", override=None, force_selected=None):
        """One decoder pass over standardized contexts.

        Returns (predictions (B, J * token_span, n_levels), decisions per
        instance). Predictions are raw (quantiles may cross); sorting happens
        at inference only.
        """
        values_std = np.atleast_2d(np.asarray(values_std, dtype=np.float64))
        masks = np.atleast_2d(np.asarray(masks, dtype=bool))
        emb, token_valid, decisions = self._batch_tokens(values_std, masks, force_selected)
        thetas = self._layer_frequencies(values_std, masks, mode=mode, override=override)
        memory = self.encode(emb, token_valid, thetas)
        h_de = self.decode(memory, token_valid)
        out = self.head(h_de)
        b = values_std.shape[0]
        j = self.cfg.forecast_tokens
        span = self.cfg.token_span
        k = len(self.cfg.quantile_levels)
        preds = out.reshape((b, j, span, k)).reshape((b, j * span, k))
        return preds, decisions

    def _forecast_pass(self, values_std, masks, mode="adaptive", override=None) -> np.ndarray:
        preds, _ = self.forward_std(values_std, masks, mode=mode, override=override)
        return preds.data[0]

    # -- public inference --------------------------------------------------------

    def forecast(self, values, horizon: int, mask=None, mode="adaptive", override=None) -> QuantileForecast:
        """Quantile forecast for an arbitrary horizon.

        When the horizon exceeds one decoder pass, the median path is
        appended to the context and the pipeline repeats on the extended
        series; output is truncated to exactly ``horizon`` steps and each
        step's quantiles are sorted ascending.
        """
        if horizon < 1:
            raise ValueError("horizon must be >= 1")
        ctx = np.asarray(values, dtype=np.float64).copy()
        msk = (
            np.ones(ctx.size, dtype=bool)
            if mask is None
            else np.asarray(mask, dtype=bool).copy()
        )
        levels = np.asarray(self.cfg.quantile_levels)
        med_idx = int(np.argmin(np.abs(levels - 0.5)))
        first_stats = None
        chunks = []
        produced = 0
        with no_grad():
            while produced < horizon:
                mu, sd = standardize_stats(ctx, msk)
                if first_stats is None:
                    first_stats = (mu, sd)
                std = (ctx - mu) / sd
                preds = self._forecast_pass(std[None, :], msk[None, :], mode=mode, override=override)
                vals = preds * sd + mu
                chunks.append(vals)
                produced += vals.shape[0]
                ctx = np.concatenate([ctx, vals[:, med_idx]])
                msk = np.concatenate([msk, np.ones(vals.shape[0], dtype=bool)])
        full = np.concatenate(chunks, axis=0)[:horizon]
        full = np.sort(full, axis=1)
        return QuantileForecast(
            values=full,
            levels=self.cfg.quantile_levels,
            context_mean=first_stats[0],
            context_scale=first_stats[1],
        )

    def instance_modulations(self, values, mask=None):
        """Per-layer (gamma, beta) for one series, as plain arrays."""
        x = np.asarray(values, dtype=np.float64)
        msk = np.ones(x.size, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        mu, sd = standardize_stats(x, msk)
        std = (x - mu) / sd
        with no_grad():
            feats = self.modnet.features(std[None, :], msk[None, :])
            out = []
            for layer in range(self.cfg.layers):
                gamma, beta = self.modnet.modulate(feats, layer)
                out.append((gamma.data[0].copy(), beta.data[0].copy()))
        return out

    # -- persistence ---------------------------------------------------------------

    def state_tensors(self) -> dict:
        tensors = {name: p.data for name, p in self.named_parameters().items()}
        tensors["router.bias"] = self.router.bias
        return tensors

    def save(self, path, extra_meta=None, extra_tensors=None) -> None:
        meta = {"config": self.cfg.to_dict()}
        if extra_meta:
            meta.update(extra_meta)
        tensors = self.state_tensors()
        if extra_tensors:
            tensors.update(extra_tensors)
        save_checkpoint(path, meta, tensors)

    @classmethod
    def load(cls, path):
        meta, tensors = load_checkpoint(path)
        model = cls(ModelConfig.from_dict(meta["config"]))
        model.load_state(tensors)
        extra = {k: v for k, v in tensors.items() if k.startswith("opt.")}
        return model, meta, extra

    def load_state(self, tensors: dict) -> None:
        params = self.named_parameters()
        for name, p in params.items():
            if name not in tensors:
                raise ValueError(f"checkpoint missing tensor {name}")
            if tuple(tensors[name].shape) != p.data.shape:
                raise ValueError(f"shape mismatch for {name}")
            p.data = tensors[name].astype(np.float64).copy()
        self.router.bias = tensors["router.bias"].astype(np.float64).copy()
