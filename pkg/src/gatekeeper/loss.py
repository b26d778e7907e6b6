"""The Gatekeeper hybrid loss and its logit gradients.

Every example (or token) whose argmax prediction matches its label
contributes cross-entropy; every mismatched one contributes KL divergence
to the uniform distribution. The two parts are blended as
``alpha * l_corr + (1 - alpha) * l_incorr``. Both parts are divided by the
batch size N, not by the mask counts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics
from .errors import ConfigError, ShapeError
from .numerics import CLIP_EPS

TOKEN_NORMALIZATIONS = ("per_batch", "per_token")


@dataclass(frozen=True)
class GatekeeperConfig:
    alpha: float
    token_normalization: str = "per_batch"
    clip_eps: float = CLIP_EPS

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise ConfigError(f"alpha must lie strictly inside (0, 1), got {self.alpha}")
        if self.token_normalization not in TOKEN_NORMALIZATIONS:
            raise ConfigError(f"token_normalization must be one of {TOKEN_NORMALIZATIONS}")
        if not self.clip_eps > 0:
            raise ConfigError("clip_eps must be positive")


@dataclass(frozen=True)
class LossBreakdown:
    l_corr: float
    l_incorr: float
    l_total: float
    n_corr: int
    n_incorr: int


def correctness_masks(logits, labels):
    """Boolean ``(m_corr, m_incorr)`` from argmax agreement (ties go to the lowest index).

    Works for (N, C) logits with (N,) labels and for (N, T, C) with (N, T).
    The masks are plain arrays, i.e. constants as far as gradients go.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    if z.shape[:-1] != y.shape:
        raise ShapeError(f"logits {z.shape} and labels {y.shape} disagree")
    C = z.shape[-1]
    if y.size and (y.min() < 0 or y.max() >= C):
        raise IndexError(f"label out of range [0, {C})")
    m_corr = np.argmax(z, axis=-1) == y
    return m_corr, ~m_corr


def _ce_and_kl(logits, labels, clip_eps):
    """Per-row CE and KL-to-uniform values together with their logit gradients."""
    logp = numerics.log_softmax(logits)
    p = np.exp(logp)
    log_eps = np.log(clip_eps)

    y = labels[..., None].astype(np.int64)
    logp_y = np.take_along_axis(logp, y, axis=-1)[..., 0]
    ce = -np.maximum(logp_y, log_eps)
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, y, 1.0, axis=-1)
    ce_grad = (p - onehot) * (logp_y >= log_eps)[..., None]

    # value goes through the shared primitive; the gradient below is derived
    # independently so a broken primitive shows up in the gradient check
    kl = numerics.kl_to_uniform(p, clip_eps)
    lg = np.maximum(logp, log_eps)
    g = lg + (logp >= log_eps)  # d/dp of p*log(max(p, eps))
    kl_grad = p * (g - (p * g).sum(axis=-1, keepdims=True))
    return np.asarray(ce), np.asarray(kl), ce_grad, kl_grad


def _hybrid(logits, labels, cfg: GatekeeperConfig, norm: float, masks):
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    if masks is None:
        m_corr, m_incorr = correctness_masks(z, y)
    else:
        m_corr = np.asarray(masks[0], dtype=bool)
        m_incorr = np.asarray(masks[1], dtype=bool)
        if m_corr.shape != y.shape or m_incorr.shape != y.shape:
            raise ShapeError("mask shapes must match label shape")
        correctness_masks(z, y)  # shape/range validation only
    ce, kl, ce_grad, kl_grad = _ce_and_kl(z, y, cfg.clip_eps)
    l_corr = float((ce * m_corr).sum() / norm)
    l_incorr = float((kl * m_incorr).sum() / norm)
    a = cfg.alpha
    grad = (a / norm) * ce_grad * m_corr[..., None] + ((1.0 - a) / norm) * kl_grad * m_incorr[..., None]
    breakdown = LossBreakdown(
        l_corr=l_corr,
        l_incorr=l_incorr,
        l_total=a * l_corr + (1.0 - a) * l_incorr,
        n_corr=int(m_corr.sum()),
        n_incorr=int(m_incorr.sum()),
    )
    return breakdown, grad


def gatekeeper_loss_classification(logits, labels, cfg: GatekeeperConfig, masks=None):
    """Hybrid loss over an (N, C) batch.

    Returns ``(LossBreakdown, dL_dlogits)``. ``masks`` overrides the
    argmax-derived ``(m_corr, m_incorr)``; gradient checks use this to keep
    the masks fixed while logits are perturbed.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2:
        raise ShapeError(f"expected (N, C) logits, got {z.shape}")
    if z.shape[0] < 1:
        raise ShapeError("empty batch")
    return _hybrid(z, labels, cfg, float(z.shape[0]), masks)


def gatekeeper_loss_token(position_logits, sequences, cfg: GatekeeperConfig, masks=None):
    """Hybrid loss over teacher-forced (N, T, C) logits aligned with (N, T) targets.

    ``per_batch`` divides the double sum over sequences and positions by N;
    ``per_token`` divides by N*T. Ragged batches are not accepted.
    """
    z = np.asarray(position_logits, dtype=np.float64)
    if z.ndim == 2:
        z = z[None]
    try:
        y = np.asarray(sequences, dtype=np.int64)
    except ValueError as exc:
        raise ShapeError("ragged sequence batches are not supported; pad to equal length") from exc
    if y.ndim == 1:
        y = y[None]
    if z.ndim != 3 or y.shape != z.shape[:2]:
        raise ShapeError(f"logits {z.shape} do not align with sequences {y.shape}")
    N, T = y.shape
    if N < 1 or T < 1:
        raise ShapeError("empty batch")
    norm = float(N) if cfg.token_normalization == "per_batch" else float(N * T)
    if masks is not None:
        masks = tuple(np.asarray(m).reshape(N, T) for m in masks)
    breakdown, grad = _hybrid(z, y, cfg, norm, masks)
    return breakdown, grad


def cross_entropy_loss(logits, labels, clip_eps: float = CLIP_EPS):
    """Mean cross-entropy over all rows (any leading shape) and its logit gradient."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    if z.shape[:-1] != y.shape:
        raise ShapeError(f"logits {z.shape} and labels {y.shape} disagree")
    count = y.size
    if count == 0:
        raise ShapeError("empty batch")
    ce, _, ce_grad, _ = _ce_and_kl(z, y, clip_eps)
    return float(ce.sum() / count), ce_grad / count
