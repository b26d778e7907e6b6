"""Training loops: plain cross-entropy pretraining and Gatekeeper fine-tuning.

Both loops share one minibatch SGD driver. For fine-tuning the correctness
masks are recomputed from the current parameters on every batch.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import astuple, dataclass, fields
from pathlib import Path

import numpy as np

from .data import SequenceDataset, TabularDataset, batches
from .errors import ConfigError, DataError, NumericDomainError, TrainingDivergedError
from .loss import (GatekeeperConfig, correctness_masks, cross_entropy_loss,
                   gatekeeper_loss_classification, gatekeeper_loss_token)
from .numerics import softmax
from .models import MlpParams, TokenModelParams, backward, forward, sgd_step, token_backward, token_forward


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    l_corr: float
    l_incorr: float
    l_total: float
    train_acc: float
    n_corr: int
    n_incorr: int


STATS_COLUMNS = tuple(f.name for f in fields(EpochStats))


def stats_csv(stats, path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(STATS_COLUMNS)
    for s in stats:
        w.writerow([repr(v) if isinstance(v, float) else v for v in astuple(s)])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def model_logits(params, inputs):
    """Logits and a backprop closure for either model kind."""
    if isinstance(params, TokenModelParams):
        logits, trace = token_forward(params, inputs)
        return logits, lambda g: token_backward(params, trace, g)
    trace = forward(params, inputs)
    return trace.logits, lambda g: backward(params, trace, g)


def _split_xy(params, data):
    if isinstance(params, TokenModelParams):
        if not isinstance(data, SequenceDataset):
            raise DataError("token models train on SequenceDataset")
        return data.sequences, data.sequences
    if isinstance(params, MlpParams):
        if not isinstance(data, TabularDataset):
            raise DataError("MLP classifiers train on TabularDataset")
        return data.features, data.labels
    raise TypeError(f"unsupported parameter type {type(params).__name__}")


def _train(params, data, loss_fn, opt: OptimizerConfig, epochs: int, seed):
    if epochs < 0:
        raise ConfigError("epochs must be >= 0")
    X, Y = _split_xy(params, data)
    n = len(data)
    if n == 0:
        raise DataError("empty training set")
    velocity = None
    history = []
    for epoch in range(epochs):
        sums = np.zeros(3)
        n_corr = n_incorr = 0
        for idx in batches(n, opt.batch_size, epoch, seed):
            logits, back = model_logits(params, X[idx])
            try:
                corr, incorr, total, grad = loss_fn(logits, Y[idx])
            except NumericDomainError as exc:
                raise TrainingDivergedError(
                    f"non-finite logits at epoch {epoch}: {exc}; lower the learning rate"
                ) from exc
            if not (math.isfinite(total) and np.all(np.isfinite(grad))):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}: l_total={total}; lower the learning rate"
                )
            m_corr, _ = correctness_masks(logits, Y[idx])
            nc = int(m_corr.sum())
            n_corr += nc
            n_incorr += m_corr.size - nc
            sums += len(idx) * np.array([corr, incorr, total])
            params, velocity = sgd_step(params, back(grad), opt.lr, opt.momentum, velocity)
        l_corr, l_incorr, l_total = (sums / n).tolist()
        history.append(EpochStats(epoch, l_corr, l_incorr, l_total,
                                  n_corr / (n_corr + n_incorr), n_corr, n_incorr))
    return params, history


def pretrain(params, data, opt: OptimizerConfig, epochs: int, seed):
    """Standard cross-entropy training. Stats report CE as ``l_total``."""

    def loss_fn(logits, y):
        ce, grad = cross_entropy_loss(logits, y)
        return ce, 0.0, ce, grad

    return _train(params, data, loss_fn, opt, epochs, seed)


def finetune(params, data, cfg: GatekeeperConfig, opt: OptimizerConfig, epochs: int, seed):
    """Gatekeeper fine-tuning; returns ``(params, [EpochStats per epoch])``."""
    token = isinstance(params, TokenModelParams)

    def loss_fn(logits, y):
        if token:
            bd, grad = gatekeeper_loss_token(logits, y, cfg)
        else:
            bd, grad = gatekeeper_loss_classification(logits, y, cfg)
        return bd.l_corr, bd.l_incorr, bd.l_total, grad

    return _train(params, data, loss_fn, opt, epochs, seed)


def predict_proba(params, inputs) -> np.ndarray:
    logits, _ = model_logits(params, inputs)
    return softmax(logits)
