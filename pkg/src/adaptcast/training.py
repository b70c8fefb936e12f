"""Quantile training objective, optimizer and training loop.

The loss averages pinball terms over nine quantile levels with a per-step
weight (ln H - ln t) / H that front-loads the horizon; the weight of the
final step is exactly zero under this formula, and ``weight_floor`` can lift
it. Parameters update with decoupled weight decay and linearly decaying
learning rates; the frequency-modulation network trains at its own, much
smaller rate. Router biases never see a gradient: one balancing update runs
after each optimizer step from that batch's routing loads.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, as_tensor
from .model import Forecaster, standardize_stats
from .patching import accumulate_load, update_bias

__all__ = [
    "LossConfig",
    "OptimConfig",
    "TrainingDiverged",
    "pinball",
    "horizon_weights",
    "batch_loss",
    "lr_at",
    "AdamW",
    "train",
]

DEFAULT_LEVELS = tuple(round(0.1 * k, 1) for k in range(1, 10))


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, batch_seed, value):
        super().__init__(f"non-finite loss {value} at step {step} (batch seed {batch_seed})")
        self.step = step
        self.batch_seed = batch_seed


@dataclass(frozen=True)
class LossConfig:
    quantile_levels: tuple = DEFAULT_LEVELS
    horizon: int = 48
    weight_floor: float = 0.0

    def __post_init__(self):
        levels = tuple(float(a) for a in self.quantile_levels)
        if any(not (0 < a < 1) for a in levels) or any(
            a >= b for a, b in zip(levels, levels[1:])
        ):
            raise ValueError("quantile levels must be strictly increasing in (0, 1)")
        object.__setattr__(self, "quantile_levels", levels)


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    modulation_lr: float = 1e-5
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float = 1.0
    batch_size: int = 16
    total_steps: int = 2000
    seed: int = 0


def pinball(y, q, alpha: float):
    """(alpha - 1[y < q]) * (y - q); non-negative for alpha in (0, 1)."""
    if not (0 < alpha < 1):
        raise ValueError("alpha must lie in (0, 1)")
    y = np.asarray(y, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    ind = (y < q).astype(np.float64)
    out = (alpha - ind) * (y - q)
    return float(out) if out.ndim == 0 else out


def horizon_weights(h: int, weight_floor: float = 0.0) -> np.ndarray:
    """w(t) = (ln H - ln t) / H for t = 1..H, clipped below at the floor."""
    if h < 1:
        raise ValueError("horizon must be >= 1")
    t = np.arange(1, h + 1, dtype=np.float64)
    return np.maximum((np.log(h) - np.log(t)) / h, weight_floor)


def batch_loss(targets, forecasts, cfg: LossConfig, target_mask=None) -> Tensor:
    """Time-weighted mean pinball loss over a batch of quantile forecasts.

    targets: (B, H); forecasts: (B, H, K) raw quantile predictions; masked
    target steps contribute nothing.
    """
    y = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    q = as_tensor(forecasts)
    b, h = y.shape
    k = len(cfg.quantile_levels)
    if q.data.shape != (b, h, k):
        raise ValueError(
            f"shape mismatch: targets {(b, h)} with {k} levels needs forecasts "
            f"{(b, h, k)}, got {q.data.shape}"
        )
    w = horizon_weights(h, cfg.weight_floor)
    if target_mask is not None:
        w = w[None, :] * np.asarray(target_mask, dtype=np.float64)
    else:
        w = np.broadcast_to(w[None, :], (b, h))
    alphas = np.asarray(cfg.quantile_levels)
    ind = (y[:, :, None] < q.data).astype(np.float64)
    coeff = (alphas[None, None, :] - ind) * w[:, :, None] / (b * k)
    # (alpha - 1[y<q]) and the weights are locally constant in q, so the
    # whole loss is linear in q with coefficient -coeff
    return ((as_tensor(y[:, :, None]) - q) * coeff).sum()


def lr_at(step: int, cfg: OptimConfig, base: float) -> float:
    """Linear decay: base * (1 - step / total), exactly 0 at the final step."""
    return base * (1.0 - step / cfg.total_steps)


class AdamW:
    """Adaptive moments with decoupled weight decay, reimplemented.

    Two rate groups: modulation-network parameters use ``modulation_lr``;
    everything else uses ``lr``. Names listed in ``no_decay`` skip the decay
    term (forecast tokens by default). Router biases are not parameters here
    at all; they are updated by the load balancer.
    """

    def __init__(self, params: dict, cfg: OptimConfig, modulation_names=(), no_decay=("forecast_tokens",)):
        self.params = dict(params)
        self.cfg = cfg
        self.modulation_names = set(modulation_names)
        self.no_decay = set(no_decay)
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.t = 0

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def clip_gradients(self) -> float:
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                total += float((p.grad * p.grad).sum())
        norm = float(np.sqrt(total))
        limit = self.cfg.clip_norm
        if limit and norm > limit:
            scale = limit / norm
            for p in self.params.values():
                if p.grad is not None:
                    p.grad *= scale
        return norm

    def step(self, step_index: int):
        self.t += 1
        b1, b2 = self.cfg.betas
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            base = self.cfg.modulation_lr if name in self.modulation_names else self.cfg.lr
            lr = lr_at(step_index, self.cfg, base)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            update = m_hat / (np.sqrt(v_hat) + self.cfg.eps)
            if name not in self.no_decay:
                update = update + self.cfg.weight_decay * p.data
            p.data = p.data - lr * update

    def state_tensors(self) -> dict:
        out = {"opt.t": np.array(float(self.t))}
        for name in self.params:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state(self, tensors: dict):
        self.t = int(np.asarray(tensors["opt.t"]).reshape(-1)[0])
        for name in self.params:
            self.m[name] = tensors[f"opt.m.{name}"].copy()
            self.v[name] = tensors[f"opt.v.{name}"].copy()


def standardize_batch(contexts, ctx_masks, targets):
    """Per-instance standardization by context stats; returns stats too."""
    b = contexts.shape[0]
    ctx_std = np.empty_like(contexts)
    tgt_std = np.empty_like(targets)
    stats = []
    for i in range(b):
        mu, sd = standardize_stats(contexts[i], ctx_masks[i])
        ctx_std[i] = (contexts[i] - mu) / sd
        tgt_std[i] = (targets[i] - mu) / sd
        stats.append((mu, sd))
    return ctx_std, tgt_std, stats


def train_step(model: Forecaster, batch: dict, optimizer: AdamW, loss_cfg: LossConfig, step: int):
    """One optimization step; returns (loss value, expert load vector)."""
    ctx_std, tgt_std, _ = standardize_batch(
        batch["context"], batch["context_mask"], batch["target"]
    )
    preds, decisions = model.forward_std(ctx_std, batch["context_mask"])
    loss = batch_loss(tgt_std, preds, loss_cfg, target_mask=batch.get("target_mask"))
    value = float(loss)
    if not np.isfinite(value):
        raise TrainingDiverged(step, batch.get("seed"), value)
    optimizer.zero_grad()
    loss.backward()
    optimizer.clip_gradients()
    optimizer.step(step)
    load = accumulate_load([d for group in decisions for d in group])
    update_bias(model.router, load, model.cfg.patch)
    return value, load


def train(
    model: Forecaster,
    sample_fn,
    loss_cfg: LossConfig,
    optim_cfg: OptimConfig,
    out_dir=None,
    log_every: int = 50,
    checkpoint_every: int = 500,
    start_step: int = 0,
    stop_step: int | None = None,
    optimizer: AdamW | None = None,
):
    """Run the training loop; deterministic given the config seed.

    ``sample_fn(step, batch_size)`` must return a batch dict with keys
    context, context_mask, target and optionally target_mask and seed.
    Writes a JSON-lines loss log and periodic checkpoints when ``out_dir``
    is given. ``stop_step`` pauses a run early without shortening the
    learning-rate schedule. Returns (optimizer, history list).
    """
    if optimizer is None:
        optimizer = AdamW(
            model.named_parameters(),
            optim_cfg,
            modulation_names=model.modulation_parameter_names(),
        )
    log_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, "loss_log.jsonl"), "a")
    history = []
    last = optim_cfg.total_steps if stop_step is None else min(stop_step, optim_cfg.total_steps)
    try:
        for step in range(start_step, last):
            batch = sample_fn(step, optim_cfg.batch_size)
            value, load = train_step(model, batch, optimizer, loss_cfg, step)
            history.append(value)
            if log_fh is not None and (step % log_every == 0 or step == last - 1):
                record = {
                    "step": step,
                    "loss": value,
                    "lr": lr_at(step, optim_cfg, optim_cfg.lr),
                    "expert_load": [float(x) for x in load],
                }
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
                log_fh.flush()
            if (
                out_dir is not None
                and checkpoint_every
                and (step + 1) % checkpoint_every == 0
            ):
                model.save(
                    os.path.join(out_dir, "checkpoint.bin"),
                    extra_meta={"step": step + 1},
                    extra_tensors=optimizer.state_tensors(),
                )
        if out_dir is not None:
            model.save(
                os.path.join(out_dir, "checkpoint.bin"),
                extra_meta={"step": last},
                extra_tensors=optimizer.state_tensors(),
            )
    finally:
        if log_fh is not None:
            log_fh.close()
    return optimizer, history
