"""Dynamic multi-granularity patch tokenization.

A series is left-padded with zeros and cut into coarsest patches of size
``p_S``. A learned router scores one expert per candidate patch size plus a
number of null slots (selectable but computation-free), picks the top K, and
the finest selected real size decides how many tokens the patch becomes.
Each token embedding is a gate-weighted fusion of every active granularity:
expert i sees the aligned ancestor slice of its own size that contains the
token's span.

Router biases are not trained by gradient descent. They are nudged once per
batch toward a target load distribution, which rebalances future top-K
selections without an auxiliary loss term.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, as_tensor, gelu

__all__ = [
    "PatchConfig",
    "RouterState",
    "RoutingDecision",
    "TokenSequence",
    "ExpertMLP",
    "patchify_coarsest",
    "route",
    "ancestor",
    "fuse",
    "tokenize",
    "accumulate_load",
    "update_bias",
]


@dataclass(frozen=True)
class PatchConfig:
    """Expert layout of the dynamic patch router.

    patch_sizes must form a divisibility chain (each size divides the next)
    so that ancestor slices align to every possible finest grid.
    top_k > n_null guarantees at least one real expert in every selection.
    """

    patch_sizes: tuple = (8, 16, 32)
    n_null: int = 2
    top_k: int = 3
    target_load: tuple = (0.55, 0.1, 0.05, 0.15, 0.15)
    bias_update_speed: float = 0.01
    # True: normalize affinity scores over real + null experts (default).
    # False: denominator runs over real experts only.
    softmax_over_all: bool = True

    def __post_init__(self):
        sizes = tuple(int(p) for p in self.patch_sizes)
        if len(sizes) == 0 or any(p <= 0 for p in sizes):
            raise ValueError("patch sizes must be positive")
        if any(a >= b for a, b in zip(sizes, sizes[1:])):
            raise ValueError("patch sizes must be strictly increasing")
        if any(b % a for a, b in zip(sizes, sizes[1:])):
            raise ValueError("each patch size must divide the next")
        object.__setattr__(self, "patch_sizes", sizes)
        s, z, k = len(sizes), self.n_null, self.top_k
        if z < 0:
            raise ValueError("n_null must be >= 0")
        if not (1 <= k <= s + z):
            raise ValueError("top_k must be in [1, n_experts]")
        if k <= z:
            raise ValueError("top_k must exceed n_null")
        tau = tuple(float(t) for t in self.target_load)
        if len(tau) != s + z:
            raise ValueError("target_load must have one entry per expert (real + null)")
        if any(t < 0 for t in tau):
            raise ValueError("target_load entries must be non-negative")
        if abs(sum(tau) - 1.0) > 1e-9:
            raise ValueError("target_load must sum to 1")
        object.__setattr__(self, "target_load", tau)
        if self.bias_update_speed <= 0:
            raise ValueError("bias_update_speed must be positive")

    @property
    def n_real(self) -> int:
        return len(self.patch_sizes)

    @property
    def n_experts(self) -> int:
        return self.n_real + self.n_null

    @property
    def coarsest(self) -> int:
        return self.patch_sizes[-1]

    @property
    def finest(self) -> int:
        return self.patch_sizes[0]


@dataclass
class RouterState:
    """Score weights (gradient-trained) and balancing biases (rule-updated)."""

    weights: Tensor  # (n_experts, p_S)
    bias: np.ndarray  # (n_experts,)

    @classmethod
    def init(cls, cfg: PatchConfig, rng: np.random.Generator) -> "RouterState":
        lim = np.sqrt(6.0 / (cfg.coarsest + 1))
        w = rng.uniform(-lim, lim, size=(cfg.n_experts, cfg.coarsest))
        return cls(Tensor(w, requires_grad=True), np.zeros(cfg.n_experts))


@dataclass
class RoutingDecision:
    """Outcome of routing one coarsest patch."""

    selected: tuple  # K expert indices, ascending
    gates: np.ndarray  # (n_real,) zero outside selected real experts
    finest_size: int
    token_count: int
    # normalized selection weight over all experts (real and null); the
    # per-patch contribution to the balancing load, summing to 1
    selection_load: np.ndarray
    patch_index: int = 0
    # detached copy of the full normalized score row (n_experts,)
    scores: np.ndarray | None = field(default=None, repr=False)
    # live graph node holding this patch's normalized scores (n_experts,)
    sprime: Tensor | None = field(default=None, repr=False)

    def active_real(self) -> list:
        return [i for i in range(len(self.gates)) if self.gates[i] > 0]

    def to_record(self) -> dict:
        return {
            "patch_index": int(self.patch_index),
            "selected": [int(i) for i in self.selected],
            "gates": [float(g) for g in self.gates],
            "finest_size": int(self.finest_size),
        }


@dataclass
class TokenSequence:
    """Fused patch embeddings plus per-token bookkeeping."""

    embeddings: Tensor  # (T', d_model)
    token_positions: np.ndarray  # (T', 2) start index and length, padded coords
    valid: np.ndarray  # (T',) False where the span is entirely padding
    decisions: list

    def __len__(self) -> int:
        return self.embeddings.data.shape[0]


class ExpertMLP:
    """One-hidden-layer MLP mapping a patch of fixed size to an embedding."""

    def __init__(self, patch_size: int, hidden: int, d_model: int, rng: np.random.Generator):
        self.patch_size = patch_size
        lim1 = np.sqrt(6.0 / (patch_size + hidden))
        lim2 = np.sqrt(6.0 / (hidden + d_model))
        self.w1 = Tensor(rng.uniform(-lim1, lim1, size=(patch_size, hidden)), requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.w2 = Tensor(rng.uniform(-lim2, lim2, size=(hidden, d_model)), requires_grad=True)
        self.b2 = Tensor(np.zeros(d_model), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return gelu(x @ self.w1 + self.b1) @ self.w2 + self.b2

    def named_parameters(self, prefix: str) -> dict:
        return {
            f"{prefix}.w1": self.w1,
            f"{prefix}.b1": self.b1,
            f"{prefix}.w2": self.w2,
            f"{prefix}.b2": self.b2,
        }


def patchify_coarsest(values: np.ndarray, p_S: int):
    """Split a series into ceil(T / p_S) coarsest patches, left-padding zeros.

    Returns (patches, pad_mask) with patches of shape (N, p_S) and pad_mask
    True where a position is padding rather than data.
    """
    if p_S <= 0:
        raise ValueError("patch size must be positive")
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("series must be a non-empty 1-D array")
    t = x.size
    n = -(-t // p_S)
    pad = n * p_S - t
    padded = np.concatenate([np.zeros(pad), x])
    pad_mask = np.zeros(n * p_S, dtype=bool)
    pad_mask[:pad] = True
    return padded.reshape(n, p_S), pad_mask.reshape(n, p_S)


def _route_scores(patches: Tensor, state: RouterState, cfg: PatchConfig) -> Tensor:
    """Normalized affinity scores s' for a stack of coarsest patches.

    The balancing bias enters inside the exponent, so it shifts both the
    top-K selection and the gate values.
    """
    logits = patches @ state.weights.transpose((1, 0)) + state.bias
    if cfg.softmax_over_all:
        return logits.softmax(axis=-1)
    # literal variant: denominator over real experts only
    z = logits - Tensor(logits.data.max(axis=-1, keepdims=True))
    e = z.exp()
    denom = e[:, : cfg.n_real].sum(axis=-1, keepdims=True)
    return e / denom


def _select(sprime_row: np.ndarray, cfg: PatchConfig, force_selected=None) -> tuple:
    if force_selected is not None:
        sel = tuple(sorted(int(i) for i in force_selected))
        if len(sel) != cfg.top_k:
            raise ValueError("forced selection must contain top_k experts")
    else:
        order = np.argsort(-sprime_row, kind="stable")
        sel = tuple(sorted(int(i) for i in order[: cfg.top_k]))
    if all(i >= cfg.n_real for i in sel):
        raise ValueError("selection contains no real expert")
    return sel


def _decision_from_selection(
    sprime_row: np.ndarray, sel: tuple, cfg: PatchConfig, patch_index: int = 0
) -> RoutingDecision:
    gates = np.zeros(cfg.n_real)
    for i in sel:
        if i < cfg.n_real:
            gates[i] = sprime_row[i]
    finest = min(cfg.patch_sizes[i] for i in sel if i < cfg.n_real)
    load = np.zeros(cfg.n_experts)
    sel_weights = np.array([sprime_row[i] for i in sel])
    sel_weights = sel_weights / sel_weights.sum()
    for i, w in zip(sel, sel_weights):
        load[i] = w
    return RoutingDecision(
        selected=sel,
        gates=gates,
        finest_size=finest,
        token_count=cfg.coarsest // finest,
        selection_load=load,
        patch_index=patch_index,
        scores=np.array(sprime_row),
    )


def route(patch, state: RouterState, cfg: PatchConfig, force_selected=None) -> RoutingDecision:
    """Route one coarsest patch to its top-K experts."""
    p = np.asarray(patch, dtype=np.float64).reshape(1, -1)
    if p.shape[1] != cfg.coarsest:
        raise ValueError("patch length must equal the coarsest patch size")
    sprime = _route_scores(as_tensor(p), state, cfg)
    sel = _select(sprime.data[0], cfg, force_selected)
    decision = _decision_from_selection(sprime.data[0], sel, cfg)
    decision.sprime = sprime[0]
    return decision


def ancestor(m: int, p_k: int, p_i: int) -> tuple:
    """Index range [lo, hi] (1-based, inclusive) of the finest patches covered
    by the size-``p_i`` ancestor of finest patch ``m``."""
    if p_i < p_k:
        raise ValueError("ancestor coarser than finest required")
    if p_i % p_k:
        raise ValueError("ancestor size must be a multiple of the finest size")
    if m < 1:
        raise ValueError("finest patch index is 1-based")
    ratio = p_i // p_k
    lo = ((m - 1) * p_k // p_i) * ratio + 1
    hi = ((m - 1) * p_k // p_i + 1) * ratio
    return lo, hi


def _fuse_batch(patches: Tensor, sprime: Tensor, decisions: list, cfg: PatchConfig, experts: list):
    """Fuse a stack of routed patches into a flat token embedding matrix.

    Every expert runs on the full stack (vectorized); inactive contributions
    are zeroed by their gate weight, so gradients only flow through selected
    real experts' gates.
    """
    nb = patches.data.shape[0]
    s = cfg.n_real
    p1 = cfg.finest
    p_big = cfg.coarsest
    rows_per_patch = p_big // p1

    active = np.zeros((nb, s))
    for n, d in enumerate(decisions):
        for i in d.active_real():
            active[n, i] = 1.0
    g_real = sprime[:, :s] * active
    alpha = g_real / g_real.sum(axis=1, keepdims=True)

    full = None
    for i, size in enumerate(cfg.patch_sizes):
        n_sub = p_big // size
        slices = patches.reshape((nb * n_sub, size))
        emb = experts[i](slices)
        d_model = emb.data.shape[-1]
        emb = emb.reshape((nb, n_sub, d_model))
        rep = size // p1
        if rep > 1:
            emb = emb.repeat(rep, axis=1)
        term = emb * alpha[:, i : i + 1].reshape((nb, 1, 1))
        full = term if full is None else full + term

    rows = []
    for n, d in enumerate(decisions):
        stride = d.finest_size // p1
        rows.extend(n * rows_per_patch + np.arange(d.token_count) * stride)
    d_model = full.data.shape[-1]
    flat = full.reshape((nb * rows_per_patch, d_model)).take(np.asarray(rows, dtype=np.intp))
    return flat, alpha


def fuse(patch, decision: RoutingDecision, experts: list, cfg: PatchConfig) -> Tensor:
    """Embed one routed coarsest patch as token_count fused embeddings."""
    p = as_tensor(np.asarray(patch, dtype=np.float64).reshape(1, -1))
    if decision.sprime is not None:
        sprime = decision.sprime.reshape((1, -1))
    else:
        sprime = as_tensor(np.concatenate([decision.gates, np.zeros(cfg.n_null)]).reshape(1, -1))
    flat, _ = _fuse_batch(p, sprime, [decision], cfg, experts)
    return flat


def tokenize(
    values,
    state: RouterState,
    cfg: PatchConfig,
    experts: list,
    mask=None,
    force_selected=None,
) -> TokenSequence:
    """Tokenize one series: patchify, route, fuse, concatenate in order.

    Missing values (mask False) are zero-filled before patchifying; tokens
    whose span lies entirely in the left padding are flagged invalid.
    """
    x = np.asarray(values, dtype=np.float64)
    if mask is not None:
        x = np.where(np.asarray(mask, dtype=bool), x, 0.0)
    patches, pad_mask = patchify_coarsest(x, p_S=cfg.coarsest)
    n = patches.shape[0]
    patches_t = as_tensor(patches)
    sprime = _route_scores(patches_t, state, cfg)
    decisions = []
    for i in range(n):
        forced = None if force_selected is None else force_selected[i]
        sel = _select(sprime.data[i], cfg, forced)
        d = _decision_from_selection(sprime.data[i], sel, cfg, patch_index=i)
        d.sprime = sprime[i]
        decisions.append(d)
    flat, _ = _fuse_batch(patches_t, sprime, decisions, cfg, experts)

    positions = []
    valid = []
    for i, d in enumerate(decisions):
        pk = d.finest_size
        for m in range(d.token_count):
            start = i * cfg.coarsest + m * pk
            positions.append((start, pk))
            valid.append(not pad_mask[i, m * pk : (m + 1) * pk].all())
    return TokenSequence(
        embeddings=flat,
        token_positions=np.asarray(positions, dtype=np.intp),
        valid=np.asarray(valid, dtype=bool),
        decisions=decisions,
    )


def accumulate_load(decisions) -> np.ndarray:
    """Sum per-selection normalized weights into a load vector over experts."""
    decisions = list(decisions)
    if not decisions:
        raise ValueError("no routing decisions")
    load = np.zeros_like(decisions[0].selection_load)
    for d in decisions:
        load += d.selection_load
    return load


def update_bias(state: RouterState, load: np.ndarray, cfg: PatchConfig) -> np.ndarray:
    """Nudge each bias toward the target load share; deltas sum to zero."""
    total = float(np.sum(load))
    if total <= 0:
        warnings.warn("zero routing load; bias update skipped")
        return state.bias
    tau = np.asarray(cfg.target_load)
    state.bias = state.bias + cfg.bias_update_speed * (tau * total - load) / total
    return state.bias
