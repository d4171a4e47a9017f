"""Losses, analytic-gradient training loops and threshold grid search.

The trainer works on logits: frame cross-entropy and the utterance max-pool
loss are both written as softplus terms, which equal the clamped
probability-domain formulas wherever the clamp is inactive and stay finite
when it would be.
"""

from __future__ import annotations

import copy
import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ConstraintViolation, DataError, TrainingDiverged
from .net import AttentionKws, KwsNetwork, build_attention, load_checkpoint

PROB_CLAMP = 1e-7


# -- losses ------------------------------------------------------------------

def _clamp(p):
    return np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def maxpool_loss(posteriors, y) -> float:
    """Utterance loss on the product over parts of each part's peak posterior.

    ``posteriors`` is (T,) for a single part or (T, K) for K parts.
    """
    x = np.asarray(posteriors, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] == 0:
        raise DataError("max-pool loss needs at least one frame")
    log_p = np.log(_clamp(x.max(axis=0))).sum()
    log_p = min(max(log_p, np.log(PROB_CLAMP)), np.log1p(-PROB_CLAMP))
    if y:
        return float(-log_p)
    return float(-np.log1p(-np.exp(log_p)))


def frame_ce_loss(posteriors, targets) -> float:
    """Mean binary cross-entropy over frames."""
    p = _clamp(np.asarray(posteriors, dtype=np.float64))
    y = np.asarray(targets, dtype=np.float64)
    if p.shape != y.shape:
        raise ConfigError(f"{p.shape} posteriors vs {y.shape} targets")
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def batch_loss(logits, frame_targets, labels, maxpool_weight):
    """Mean over utterances of frame CE + weight * max-pool loss, with d/dlogits.

    ``logits`` and ``frame_targets`` are (B, T); ``labels`` is (B,).
    """
    B, T = logits.shape
    y = frame_targets
    ce_u = (_softplus(logits) - y * logits).mean(axis=1)
    d = (_sigmoid(logits) - y) / (T * B)
    peak_t = logits.argmax(axis=1)  # first maximum on ties
    peak = logits[np.arange(B), peak_t]
    sign = np.where(labels > 0, -1.0, 1.0)
    mp_u = _softplus(sign * peak)
    if maxpool_weight:
        d[np.arange(B), peak_t] += maxpool_weight * sign * _sigmoid(sign * peak) / B
    ce, mp = float(ce_u.mean()), float(mp_u.mean())
    return ce, mp, ce + maxpool_weight * mp, d


# -- batches -----------------------------------------------------------------

@dataclass
class UtteranceBatch:
    features: np.ndarray        # (C, B, T, 40)
    frame_targets: np.ndarray   # (B, T)
    labels: np.ndarray          # (B,)

    def __post_init__(self):
        if np.any((self.labels == 0)[:, None] & (self.frame_targets > 0)):
            raise DataError("negative utterance with positive frame targets")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 10
    maxpool_weight: float = 0.5
    crop_frames: int = 150
    grad_clip: float = 5.0
    freeze_epochs: int = 0
    seed: int = 0

    def validate(self):
        if not 0.0 <= self.maxpool_weight <= 1.0:
            raise ConfigError("maxpool_weight must lie in [0, 1]")
        if self.epochs < 0 or self.batch_size < 1 or self.crop_frames < 1:
            raise ConfigError("epochs, batch_size and crop_frames must be positive")


class Adam:
    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict, skip=()):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            if k.startswith(tuple(skip)):
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            self.params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def forward_backward(model, batch: UtteranceBatch, maxpool_weight=0.5):
    """Losses and parameter gradients for one batch."""
    if isinstance(model, AttentionKws):
        post, cache = model.forward(batch.features, keep_cache=True)
        logits = cache[3][2]
    else:
        if batch.features.shape[0] != 1:
            raise ConfigError("a base network takes a single channel")
        post, cache = model.forward(batch.features[0], keep_cache=True)
        logits = cache[2]
    ce, mp, total, dlogits = batch_loss(logits, batch.frame_targets, batch.labels, maxpool_weight)
    grads, _ = model.backward(cache, dlogits)
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad or not np.isfinite(total):
        raise TrainingDiverged(f"non-finite loss {total} or gradients in {bad}")
    return (ce, mp, total), grads


def _clip_grads(grads, max_norm):
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm
    return norm


def round_to_storage(model):
    """Round parameters to float32 so the in-memory model equals its checkpoint."""
    for v in model.parameters().values():
        v[...] = v.astype(np.float32).astype(np.float64)
    return model


# -- training loops ----------------------------------------------------------

@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def append(self, epoch, ce, mp, total, wall):
        self.rows.append({"epoch": epoch, "frame_ce": ce, "maxpool": mp, "total": total, "wall_seconds": wall})

    @property
    def totals(self) -> list[float]:
        return [r["total"] for r in self.rows]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["epoch", "frame_ce", "maxpool", "total", "wall_seconds"])
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in r.items()})


def train_model(model, data, channels, config: TrainConfig, log: TrainLog | None = None):
    """Adam over shuffled crops of ``data`` read from ``channels``; returns (model, log).

    ``data`` must provide ``__len__``, ``has_channels(tags)`` and
    ``batch(indices, tags, crop_frames, rng)``.
    """
    config.validate()
    if len(data) == 0:
        raise DataError("empty training set")
    if not data.has_positives_and_negatives():
        raise DataError("training set needs both positives and negatives")
    missing = [c for c in channels if not data.has_channel(c)]
    if missing:
        raise DataError(f"training data has no channel(s) {missing}")
    log = log or TrainLog()
    params = model.parameters()
    opt = Adam(params, config.lr, config.beta1, config.beta2, config.adam_eps)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x7EA1]))
    start = time.perf_counter()
    for epoch in range(config.epochs):
        skip = ("base/",) if isinstance(model, AttentionKws) and epoch < config.freeze_epochs else ()
        order = rng.permutation(len(data))
        sums = np.zeros(3)
        n = 0
        for i in range(0, len(order), config.batch_size):
            idx = np.sort(order[i:i + config.batch_size])
            batch = data.batch(idx, channels, config.crop_frames, rng)
            losses, grads = forward_backward(model, batch, config.maxpool_weight)
            if losses[2] > 1e3:
                raise TrainingDiverged(f"loss {losses[2]:.3g} at epoch {epoch}")
            _clip_grads(grads, config.grad_clip)
            opt.step(grads, skip)
            sums += np.array(losses) * len(idx)
            n += len(idx)
        ce, mp, total = sums / n
        log.append(epoch, float(ce), float(mp), float(total), time.perf_counter() - start)
    round_to_storage(model)
    return model, log


def evaluate_loss(model, data, channels, config: TrainConfig, seed=0) -> float:
    """Mean total loss over every utterance with a fixed crop draw (no parameter update)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE7A1]))
    sums, n = 0.0, 0
    for i in range(0, len(data), config.batch_size):
        idx = np.arange(i, min(i + config.batch_size, len(data)))
        batch = data.batch(idx, channels, config.crop_frames, rng)
        if isinstance(model, AttentionKws):
            logits = model.forward(batch.features, keep_cache=True)[1][3][2]
        else:
            logits = model.forward(batch.features[0], keep_cache=True)[1][2]
        sums += batch_loss(logits, batch.frame_targets, batch.labels, config.maxpool_weight)[2] * len(idx)
        n += len(idx)
    return sums / n


def train_base(data, config: TrainConfig, model: KwsNetwork, channel="omni"):
    """Train a base detector on one channel (normally omni) from its initial weights."""
    model.channel = channel
    return train_model(model, data, [channel], config)


def _load(base):
    if isinstance(base, (str, Path)):
        if not Path(base).exists():
            raise DataError(f"base checkpoint {base} not found")
        base, _ = load_checkpoint(base)
    if not isinstance(base, KwsNetwork):
        raise ConfigError("fine-tuning starts from a base network")
    return base


def finetune_channel(base, data, channel: str, config: TrainConfig):
    """Copy a base network and train all of its parameters on another channel."""
    model = copy.deepcopy(_load(base))
    model.channel = channel
    return train_model(model, data, [channel], config)


def finetune_attention(base, data, channel_tags, config: TrainConfig, scale="desk", seed=0):
    """Put a zero-output keys network in front of a copy of ``base`` and train both."""
    channel_tags = list(channel_tags)
    if len(channel_tags) < 2:
        raise ConfigError("attention needs at least two channels")
    model = build_attention(copy.deepcopy(_load(base)), channel_tags, scale, seed, zero_output=True)
    return train_model(model, data, channel_tags, config)


# -- confidence cache and threshold search -----------------------------------

@dataclass
class ConfidenceTable:
    """Peak confidence per scoring unit (utterance or negative segment) and channel."""

    utterance_ids: list
    channel_tags: list
    confidences: np.ndarray     # (N, C)
    is_positive: np.ndarray     # (N,)
    durations: np.ndarray       # (N,) seconds

    def __post_init__(self):
        self.confidences = np.asarray(self.confidences, dtype=np.float64).reshape(len(self.utterance_ids), -1)
        self.is_positive = np.asarray(self.is_positive, dtype=bool)
        self.durations = np.asarray(self.durations, dtype=np.float64)
        if self.confidences.shape[1] != len(self.channel_tags):
            raise DataError("confidence columns do not match channel tags")

    @property
    def negative_hours(self) -> float:
        return float(self.durations[~self.is_positive].sum() / 3600.0)

    @property
    def n_positive(self) -> int:
        return int(self.is_positive.sum())

    def select(self, tags) -> "ConfidenceTable":
        cols = [self.channel_tags.index(t) for t in tags]
        return ConfidenceTable(self.utterance_ids, list(tags), self.confidences[:, cols],
                               self.is_positive, self.durations)

    def write_jsonl(self, path):
        with open(path, "w") as fh:
            for i, uid in enumerate(self.utterance_ids):
                for j, tag in enumerate(self.channel_tags):
                    fh.write(json.dumps({"utterance_id": uid, "channel_tag": tag,
                                         "max_confidence": float(self.confidences[i, j]),
                                         "is_positive": bool(self.is_positive[i]),
                                         "duration_s": float(self.durations[i])}) + "\n")

    @classmethod
    def read_jsonl(cls, path) -> "ConfidenceTable":
        rows = {}
        tags = []
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                r = json.loads(line)
                if r["channel_tag"] not in tags:
                    tags.append(r["channel_tag"])
                rows.setdefault(r["utterance_id"], {})[r["channel_tag"]] = r
        if not rows:
            raise DataError(f"{path}: empty confidence cache")
        ids = list(rows)
        try:
            conf = [[rows[u][t]["max_confidence"] for t in tags] for u in ids]
        except KeyError as exc:
            raise DataError(f"{path}: utterance without channel {exc}") from None
        first = [next(iter(rows[u].values())) for u in ids]
        return cls(ids, tags, conf, [r["is_positive"] for r in first], [r["duration_s"] for r in first])


@dataclass
class ThresholdVector:
    thresholds: tuple
    grid_step: float
    frr: float
    fa_per_hour: float
    violated: bool = False
    channel_tags: tuple = ()

    def to_dict(self):
        return asdict(self)


def threshold_grid(step: float) -> np.ndarray:
    """{step, 2 step, ..., 1 - step}."""
    k = int(round(1.0 / step))
    if k < 2 or abs(k * step - 1.0) > 1e-9:
        raise ConfigError(f"grid step {step} must divide 1")
    return np.round(np.arange(1, k) * step, 12)


def grid_search_thresholds(table: ConfidenceTable, target_fah=0.1, grid_step=0.001) -> ThresholdVector:
    """Per-channel thresholds for an OR ensemble: least FRR with FA/h <= target.

    A unit stays silent at threshold vector ``g`` iff every confidence is
    <= its threshold, so the silent count over the whole grid is a
    C-dimensional cumulative histogram of each unit's smallest silencing
    grid index.  Ties prefer the lexicographically largest vector.
    """
    if table.n_positive == 0:
        raise DataError("no positive utterances for FRR")
    hours = table.negative_hours
    if hours <= 0:
        raise DataError("no negative audio for FA/h")
    grid = threshold_grid(grid_step)
    K = len(grid)
    C = table.confidences.shape[1]
    if (K + 1) ** C > 5e7:
        raise ConfigError(f"grid of {K}^{C} points is too large")
    first_silent = np.searchsorted(grid, table.confidences, side="left")  # == K: fires everywhere

    def silent_counts(mask):
        hist = np.zeros((K + 1,) * C, dtype=np.int64)
        np.add.at(hist, tuple(first_silent[mask].T), 1)
        for ax in range(C):
            np.cumsum(hist, axis=ax, out=hist)
        return hist[(slice(0, K),) * C]

    pos = table.is_positive
    missed = silent_counts(pos)
    fa = ((~pos).sum() - silent_counts(~pos)) / hours
    frr = missed / pos.sum()
    feasible = fa <= target_fah + 1e-12
    if not feasible.any():
        idx = (K - 1,) * C
        return ThresholdVector(tuple(float(grid[i]) for i in idx), grid_step, float(frr[idx]), float(fa[idx]),
                               violated=True, channel_tags=tuple(table.channel_tags))
    best = frr[feasible].min()
    cand = np.argwhere(feasible & (frr == best))
    idx = tuple(cand[-1])  # argwhere is in lexicographic order
    return ThresholdVector(tuple(float(grid[i]) for i in idx), grid_step, float(frr[idx]), float(fa[idx]),
                           channel_tags=tuple(table.channel_tags))


def require_feasible(tv: ThresholdVector) -> ThresholdVector:
    if tv.violated:
        raise ConstraintViolation(f"no thresholds reach the FA/h target; best {tv.fa_per_hour:.3g} FA/h")
    return tv
