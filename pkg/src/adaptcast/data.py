"""Series containers, synthetic generators, corpus sampling and file I/O.

Two generator families produce training data. Composite series add up to
three components: tiled seasonal cycles (spike trains or smooth interpolated
templates, optionally doubled at a seven-fold harmonic period), a trend
(linear, exponential, or a cumulated ARMA walk, damped when seasonality is
present), and white Gaussian noise; at least one of seasonality/trend is
always present. Industrial series are a constant baseline with a trapezoid
event repeating at exact period multiples, plus optional global noise.

The corpus sampler draws 80% real / 20% synthetic by default, picks a
predictability tier for real draws by configured weights, then a uniform
series and a uniform window.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import PchipInterpolator

__all__ = [
    "TimeSeries",
    "CompositeGenConfig",
    "IndustrialGenConfig",
    "CorpusSampler",
    "Corpus",
    "gen_composite",
    "gen_industrial",
    "sample_industrial_config",
    "sample_batch",
    "load_jsonl",
    "save_jsonl",
    "load_csv",
]

SYNTHETIC_TIER = 0


@dataclass
class TimeSeries:
    """Univariate series with an observation mask and a frequency tag.

    tier 1..5 ranks real data by predictability; tier 0 marks synthetic.
    """

    values: np.ndarray
    mask: np.ndarray = None
    freq: str = ""
    tier: int = SYNTHETIC_TIER
    id: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.mask is None:
            self.mask = np.ones(self.values.size, dtype=bool)
        else:
            self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.size != self.mask.size:
            raise ValueError("values and mask must have equal length")
        if not self.mask.any():
            raise ValueError("series must contain at least one observed point")

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class CompositeGenConfig:
    length: int = 4096
    primary_periods: tuple = (24, 48, 288, 360)
    harmonic_multiplier: int = 7
    double_period_prob: float = 0.2
    amplitude_range: tuple = (1.0, 3.0)
    trend_types: tuple = ("linear", "exp", "arma")
    trend_damping_range: tuple = (0.1, 0.3)
    noise_sigma_range: tuple = (0.01, 0.1)
    seasonal_patterns: tuple = ("spike", "interpolated")
    prob_seasonal: float = 0.8
    prob_trend: float = 0.5
    prob_noise: float = 0.8
    magnitude_bound: float = 10.0


@dataclass(frozen=True)
class IndustrialGenConfig:
    pattern: str = "spikes"  # or "inverted_u"
    baseline: float = 0.5
    period: int = 128
    amplitude: float = 1.0
    event_width: int = 16
    noise_sigma: float = 0.0
    length: int = 4096


def _spike_cycle(period: int, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    width = max(1, period // 20)
    cycle = np.zeros(period)
    profile = amplitude * np.bartlett(width + 2)[1:-1]
    pos = int(rng.integers(0, period))
    for k, v in enumerate(profile):
        cycle[(pos + k) % period] += v
    return cycle


def _interpolated_cycle(period: int, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    n_pts = int(rng.integers(4, 9))
    n_pts = min(n_pts, period)
    xs = np.sort(rng.choice(period, size=n_pts, replace=False)).astype(np.float64)
    xs -= xs[0]
    ys = rng.uniform(-amplitude, amplitude, size=n_pts)
    # close the loop so tiling stays continuous
    xs = np.append(xs, period)
    ys = np.append(ys, ys[0])
    return PchipInterpolator(xs, ys)(np.arange(period, dtype=np.float64))


def _pattern_cycle(pattern: str, period: int, amplitude: float, rng) -> np.ndarray:
    if pattern == "spike":
        return _spike_cycle(period, amplitude, rng)
    if pattern == "interpolated":
        return _interpolated_cycle(period, amplitude, rng)
    raise ValueError(f"unknown seasonal pattern {pattern!r}")


def _trend(kind: str, length: int, rng: np.random.Generator) -> np.ndarray:
    u = np.arange(length, dtype=np.float64) / max(length - 1, 1)
    sign = -1.0 if rng.random() < 0.5 else 1.0
    amp = sign * rng.uniform(1.0, 3.0)
    if kind == "linear":
        return amp * u
    if kind == "exp":
        c = rng.uniform(1.0, 3.0)
        return amp * (np.exp(c * u) - 1.0) / (np.exp(c) - 1.0)
    if kind == "arma":
        # cumulated ARMA(1,1), phi=0.8, theta=0.3, rescaled to unit range
        eps = rng.normal(0.0, 0.05, size=length)
        y = np.zeros(length)
        for t in range(1, length):
            y[t] = 0.8 * y[t - 1] + eps[t] + 0.3 * eps[t - 1]
        walk = np.cumsum(y)
        span = walk.max() - walk.min()
        if span > 0:
            walk = (walk - walk.min()) / span
        return amp * walk
    raise ValueError(f"unknown trend type {kind!r}")


def gen_composite(cfg: CompositeGenConfig, seed: int) -> TimeSeries:
    """Seasonal + trend + noise composite; at least one of the first two."""
    rng = np.random.default_rng(seed)
    while True:
        f_s = rng.random() < cfg.prob_seasonal
        f_t = rng.random() < cfg.prob_trend
        f_n = rng.random() < cfg.prob_noise
        if f_s or f_t:
            break
    length = cfg.length
    total = np.zeros(length)
    if f_s:
        double = rng.random() < cfg.double_period_prob
        p1 = int(rng.choice(np.asarray(cfg.primary_periods)))
        periods = [p1] + ([cfg.harmonic_multiplier * p1] if double else [])
        for p in periods:
            amplitude = rng.uniform(*cfg.amplitude_range)
            pattern = cfg.seasonal_patterns[int(rng.integers(0, len(cfg.seasonal_patterns)))]
            cycle = _pattern_cycle(pattern, p, amplitude, rng)
            reps = -(-length // p)
            total += np.tile(cycle, reps)[:length]
    if f_t:
        kind = cfg.trend_types[int(rng.integers(0, len(cfg.trend_types)))]
        trend = _trend(kind, length, rng)
        if f_s:
            trend = trend * rng.uniform(*cfg.trend_damping_range)
        total += trend
    if f_n:
        sigma = rng.uniform(*cfg.noise_sigma_range)
        total += rng.normal(0.0, sigma, size=length)
    total = np.clip(total, -cfg.magnitude_bound, cfg.magnitude_bound)
    return TimeSeries(total, freq="synthetic", tier=SYNTHETIC_TIER, id=f"composite-{seed}")


def _trapezoid(width: int, amplitude: float) -> np.ndarray:
    ramp = -(-width // 4)  # ceil(w / 4)
    if width < 2 * ramp:
        ramp = width // 2
    plateau = width - 2 * ramp
    up = amplitude * np.arange(1, ramp + 1) / max(ramp, 1)
    return np.concatenate([up, np.full(plateau, amplitude), up[::-1]])


def sample_industrial_config(rng: np.random.Generator, noise_prob: float = 0.5, length: int = 4096) -> IndustrialGenConfig:
    pattern = "inverted_u" if rng.random() < 0.5 else "spikes"
    sigma = float(rng.uniform(0.005, 0.05)) if rng.random() < noise_prob else 0.0
    return IndustrialGenConfig(
        pattern=pattern,
        baseline=float(rng.uniform(0.0, 1.0)),
        period=int(rng.integers(64, 513)),
        amplitude=float(rng.uniform(0.5, 2.0)),
        event_width=int(rng.integers(8, 33)),
        noise_sigma=sigma,
        length=length,
    )


def gen_industrial(cfg: IndustrialGenConfig, seed: int) -> TimeSeries:
    """Baseline plus a fixed trapezoid event at exact period multiples."""
    rng = np.random.default_rng(seed)
    x = np.full(cfg.length, cfg.baseline)
    event = _trapezoid(cfg.event_width, cfg.amplitude)
    sign = -1.0 if cfg.pattern == "inverted_u" else 1.0
    for start in range(0, cfg.length, cfg.period):
        end = min(start + cfg.event_width, cfg.length)
        x[start:end] += sign * event[: end - start]
    if cfg.noise_sigma > 0:
        x += rng.normal(0.0, cfg.noise_sigma, size=cfg.length)
    return TimeSeries(x, freq="synthetic", tier=SYNTHETIC_TIER, id=f"industrial-{seed}")


@dataclass(frozen=True)
class CorpusSampler:
    tier_weights: tuple = (0.35, 0.25, 0.2, 0.12, 0.08)
    synthetic_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        w = tuple(float(x) for x in self.tier_weights)
        if any(x <= 0 for x in w):
            raise ValueError("tier weights must be positive")
        total = sum(w)
        object.__setattr__(self, "tier_weights", tuple(x / total for x in w))


@dataclass
class Corpus:
    """Series grouped by tier; tier 0 is the synthetic pool."""

    by_tier: dict = field(default_factory=dict)

    @classmethod
    def from_series(cls, series) -> "Corpus":
        by_tier = {}
        for s in series:
            by_tier.setdefault(int(s.tier), []).append(s)
        return cls(by_tier)

    @property
    def synthetic(self):
        return self.by_tier.get(SYNTHETIC_TIER, [])

    def real_tiers(self):
        return sorted(t for t in self.by_tier if t != SYNTHETIC_TIER)


def _draw_series(corpus: Corpus, sampler: CorpusSampler, rng: np.random.Generator) -> TimeSeries:
    tiers = corpus.real_tiers()
    use_synth = rng.random() < sampler.synthetic_fraction
    if use_synth and corpus.synthetic:
        pool = corpus.synthetic
    elif tiers:
        weights = np.array([sampler.tier_weights[t - 1] for t in tiers])
        weights = weights / weights.sum()
        tier = tiers[int(rng.choice(len(tiers), p=weights))]
        pool = corpus.by_tier[tier]
    elif corpus.synthetic:
        pool = corpus.synthetic
    else:
        raise ValueError("corpus is empty")
    return pool[int(rng.integers(0, len(pool)))]


def sample_batch(sampler: CorpusSampler, corpus: Corpus, batch_size: int, context_len: int, horizon: int, step: int = 0) -> dict:
    """Draw (context, target) windows; deterministic per (seed, step).

    Series shorter than context + horizon are left-padded with masked
    zeros; series shorter than horizon + 1 are skipped with a warning.
    """
    rng = np.random.default_rng((sampler.seed, step))
    ctx = np.zeros((batch_size, context_len))
    ctx_mask = np.zeros((batch_size, context_len), dtype=bool)
    tgt = np.zeros((batch_size, horizon))
    tgt_mask = np.zeros((batch_size, horizon), dtype=bool)
    filled = 0
    attempts = 0
    while filled < batch_size:
        attempts += 1
        if attempts > 100 * batch_size:
            raise ValueError("could not assemble a batch; series too short")
        s = _draw_series(corpus, sampler, rng)
        n = len(s)
        if n < horizon + 1:
            warnings.warn(f"series {s.id or '?'} shorter than horizon + 1; skipped")
            continue
        if n >= context_len + horizon:
            start = int(rng.integers(0, n - (context_len + horizon) + 1))
            t0 = start + context_len
        else:
            t0 = n - horizon
        lo = max(0, t0 - context_len)
        chunk = s.values[lo:t0]
        mchunk = s.mask[lo:t0]
        ctx[filled, context_len - chunk.size :] = chunk
        ctx_mask[filled, context_len - chunk.size :] = mchunk
        tgt[filled] = s.values[t0 : t0 + horizon]
        tgt_mask[filled] = s.mask[t0 : t0 + horizon]
        filled += 1
    return {
        "context": ctx,
        "context_mask": ctx_mask,
        "target": tgt,
        "target_mask": tgt_mask,
        "seed": step,
    }


def save_jsonl(series, path) -> None:
    with open(path, "w") as fh:
        for s in series:
            record = {
                "id": s.id,
                "freq": s.freq,
                "tier": int(s.tier),
                "values": [float(v) for v in s.values],
            }
            if not s.mask.all():
                record["mask"] = [int(m) for m in s.mask]
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_jsonl(path):
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                values = np.asarray(record["values"], dtype=np.float64)
                mask = record.get("mask")
                series = TimeSeries(
                    values=values,
                    mask=None if mask is None else np.asarray(mask, dtype=bool),
                    freq=record.get("freq", ""),
                    tier=int(record.get("tier", SYNTHETIC_TIER)),
                    id=str(record.get("id", f"series-{lineno}")),
                )
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise ValueError(f"line {lineno}: malformed series record ({exc})") from exc
            out.append(series)
    return out


def load_csv(path):
    """One series per column; header row holds ids; blank cells are masked."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError("line 1: empty csv")
    header = rows[0]
    n_cols = len(header)
    columns = [[] for _ in range(n_cols)]
    masks = [[] for _ in range(n_cols)]
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) > n_cols:
            raise ValueError(f"line {lineno}: more cells than header columns")
        for c in range(n_cols):
            cell = row[c].strip() if c < len(row) else ""
            if cell == "":
                columns[c].append(0.0)
                masks[c].append(False)
            else:
                try:
                    columns[c].append(float(cell))
                except ValueError as exc:
                    raise ValueError(f"line {lineno}: bad number {cell!r}") from exc
                masks[c].append(True)
    return [
        TimeSeries(np.asarray(columns[c]), np.asarray(masks[c], dtype=bool), id=header[c])
        for c in range(n_cols)
    ]
