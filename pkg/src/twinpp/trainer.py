"""Mini-batch RMSprop training with class re-weighting and early stopping."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import (Batch, ClassWeights, ModelConfig, Sample, backward, collate,
                    forward, init_params, per_sample_loss)
from .numcore import ParamStore

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    rms_decay: float = 0.9
    rms_eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 30
    patience: int = 5
    rng_seed: int = 0
    grad_clip_norm: float = 5.0
    class_weighting: bool = True
    init_time_bias: bool = False    # start the gap head at the mean training gap

    def __post_init__(self):
        if not 0 < self.rms_decay < 1:
            raise ValueError("rms_decay must be in (0, 1)")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 0:
            raise ValueError("batch_size >= 1, max_epochs >= 0, patience >= 0 required")


class OptimizerState(dict):
    """Running mean of squared gradients, keyed by parameter name."""

    @classmethod
    def for_params(cls, params: ParamStore) -> "OptimizerState":
        return cls({k: np.zeros_like(params[k]) for k in params})


class TrainingDiverged(RuntimeError):
    pass


def inverse_frequency_weights(counts) -> np.ndarray:
    """N / n_k per class, rescaled so the weights average to 1."""
    counts = np.asarray(counts, dtype=np.float64)
    missing = np.flatnonzero(counts <= 0)
    if missing.size:
        raise ValueError(f"class {int(missing[0])} has no training samples")
    raw = counts.sum() / counts
    return raw / raw.mean()


def compute_class_weights(samples: Sequence[Sample], cfg: ModelConfig,
                          names: dict | None = None) -> ClassWeights:
    """Class weights for both heads; a disabled head gets all-zero weights.

    ``names`` optionally maps ``{"main": [...], "sub": [...]}`` ids to names
    for the error message when a class is absent.
    """
    mains = np.bincount([s.target_main for s in samples], minlength=cfg.k_main)
    subs = np.bincount([s.target_sub for s in samples], minlength=cfg.k_sub)

    def weights(counts, level, enabled):
        if not enabled:
            return np.zeros(len(counts))
        try:
            return inverse_frequency_weights(counts)
        except ValueError:
            k = int(np.flatnonzero(counts <= 0)[0])
            label = names[level][k] if names else k
            raise ValueError(f"{level} class {label!r} absent from training data") from None

    return ClassWeights(
        weights(mains, "main", cfg.loss_mode != "sub"),
        weights(subs, "sub", cfg.loss_mode != "main"),
    )


def clip_gradients(params: ParamStore, max_norm: float) -> float:
    """Rescale all gradients so their global L2 norm is at most ``max_norm``."""
    norm = params.grad_norm()
    if not math.isfinite(norm):
        raise TrainingDiverged("non-finite gradient norm")
    if norm > max_norm:
        scale = max_norm / norm
        for k in params:
            params.grad(k)[...] *= scale
    return norm


def rmsprop_step(params: ParamStore, state: OptimizerState, cfg: TrainConfig) -> None:
    for k in params:
        g = params.grad(k)
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for {k}")
        cache = state[k]
        cache *= cfg.rms_decay
        cache += (1.0 - cfg.rms_decay) * g * g
        params[k][...] -= cfg.learning_rate * g / (np.sqrt(cache) + cfg.rms_eps)
    params.zero_grad()


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Shuffled sample order, a pure function of (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def dataset_loss(params: ParamStore, batch: Batch, w: ClassWeights, cfg: ModelConfig,
                 chunk: int = 1024) -> float:
    total = 0.0
    for start in range(0, batch.size, chunk):
        sub = _slice(batch, np.arange(start, min(start + chunk, batch.size)))
        total += float(per_sample_loss(forward(params, sub, cfg), sub, w, cfg).sum())
    return total / batch.size


def _slice(batch: Batch, idx: np.ndarray) -> Batch:
    return Batch(batch.ts[idx], batch.ev_types[idx], batch.ev_dts[idx],
                 batch.main[idx], batch.sub[idx], batch.gap[idx])


@dataclass
class LossCurve:
    epochs: list[int] = field(default_factory=list)
    train: list[float] = field(default_factory=list)
    val: list[float] = field(default_factory=list)

    def append(self, epoch: int, train: float, val: float) -> None:
        self.epochs.append(epoch)
        self.train.append(train)
        self.val.append(val)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        for row in zip(self.epochs, self.train, self.val):
            w.writerow([row[0], repr(row[1]), repr(row[2])])
        return buf.getvalue()

    @property
    def best_epoch(self) -> int:
        return self.epochs[int(np.argmin(self.val))]


def train(dataset: Sequence[Sample], val_dataset: Sequence[Sample], model_cfg: ModelConfig,
          train_cfg: TrainConfig, weights: ClassWeights | None = None,
          params: ParamStore | None = None) -> tuple[ParamStore, LossCurve]:
    """Fit the network; returns the parameters with the lowest validation loss.

    Epoch 0 of the curve is the loss of the initial parameters.
    """
    if len(dataset) == 0 or len(val_dataset) == 0:
        raise ValueError("training and validation sets must be non-empty")
    if weights is None:
        weights = (compute_class_weights(dataset, model_cfg) if train_cfg.class_weighting
                   else ClassWeights.ones(model_cfg))
    if params is None:
        bias = float(np.mean([s.target_gap for s in dataset])) if train_cfg.init_time_bias else None
        params = init_params(model_cfg, seed=train_cfg.rng_seed, time_bias=bias)
    train_b, val_b = collate(dataset), collate(val_dataset)
    state = OptimizerState.for_params(params)

    curve = LossCurve()

    def record(epoch):
        tr = dataset_loss(params, train_b, weights, model_cfg)
        va = dataset_loss(params, val_b, weights, model_cfg)
        if not (math.isfinite(tr) and math.isfinite(va)):
            raise TrainingDiverged(f"loss became non-finite at epoch {epoch}")
        curve.append(epoch, tr, va)
        log.info("epoch %d train %.5f val %.5f", epoch, tr, va)
        return va

    best_val = record(0)
    best = params.copy()
    since_best = 0
    for epoch in range(1, train_cfg.max_epochs + 1):
        order = epoch_order(train_b.size, train_cfg.rng_seed, epoch)
        for start in range(0, train_b.size, train_cfg.batch_size):
            mb = _slice(train_b, order[start:start + train_cfg.batch_size])
            params.zero_grad()
            value = backward(params, mb, weights, model_cfg)
            if not math.isfinite(value):
                raise TrainingDiverged(f"loss became non-finite at epoch {epoch}")
            clip_gradients(params, train_cfg.grad_clip_norm)
            rmsprop_step(params, state, train_cfg)
        va = record(epoch)
        if va < best_val:
            best_val, best, since_best = va, params.copy(), 0
        else:
            since_best += 1
            if since_best > train_cfg.patience:
                break
    return best, curve
