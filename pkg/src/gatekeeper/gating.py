"""Deferral signals computed from the small model and the threshold rule.

Higher signal means more confident. An input is answered by the small
model when ``signal >= tau`` and deferred to the large model otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DataError, ShapeError
from .numerics import CLIP_EPS, entropy

GATING_KINDS = ("max_softmax", "neg_pred_entropy")
ACCEPT, DEFER = "accept", "defer"


@dataclass(frozen=True)
class GatingFunction:
    kind: str = "max_softmax"

    def __post_init__(self):
        if self.kind not in GATING_KINDS:
            raise ValueError(f"gating kind must be one of {GATING_KINDS}, got {self.kind!r}")

    def __call__(self, probs, lengths=None):
        if self.kind == "max_softmax":
            return g_cl(probs)
        return g_nent(probs, lengths)


@dataclass(frozen=True)
class DeferralRule:
    gating: GatingFunction
    tau: float


def g_cl(p):
    """Max softmax probability; works row-wise on (N, C)."""
    p = np.asarray(p, dtype=np.float64)
    out = p.max(axis=-1)
    return float(out) if out.ndim == 0 else out


def g_nent(dists, lengths=None, clip_eps: float = CLIP_EPS):
    """Negative predictive entropy averaged over positions.

    ``dists`` is (T, C) for one sequence or (N, T, C) for a batch; a single
    (C,) distribution is treated as T = 1. ``lengths`` limits the average
    to the first ``lengths[i]`` positions (see :func:`sequence_lengths`).
    """
    d = np.asarray(dists, dtype=np.float64)
    if d.ndim == 1:
        d = d[None, :]
    single = d.ndim == 2
    if single:
        d = d[None]
    if d.ndim != 3:
        raise ShapeError(f"expected (T, C) or (N, T, C), got {np.shape(dists)}")
    N, T, _ = d.shape
    if T < 1:
        raise ShapeError("empty sequence")
    h = entropy(d, clip_eps)  # (N, T)
    if lengths is None:
        out = -h.mean(axis=1)
    else:
        lengths = np.broadcast_to(np.asarray(lengths, dtype=np.int64), (N,))
        if np.any(lengths < 1) or np.any(lengths > T):
            raise ShapeError("lengths must lie in [1, T]")
        keep = np.arange(T)[None, :] < lengths[:, None]
        out = -(h * keep).sum(axis=1) / lengths
    return float(out[0]) if single else out


def sequence_lengths(tokens, eos_token: int | None) -> np.ndarray:
    """Positions up to and including the first ``eos_token`` (all T if absent)."""
    tok = np.atleast_2d(np.asarray(tokens))
    T = tok.shape[1]
    if eos_token is None:
        return np.full(tok.shape[0], T, dtype=np.int64)
    hit = tok == eos_token
    first = np.where(hit.any(axis=1), hit.argmax(axis=1) + 1, T)
    return first.astype(np.int64)


def cascade_decide(signal: float, rule: DeferralRule) -> str:
    return ACCEPT if signal >= rule.tau else DEFER


class Calibration(NamedTuple):
    tau: float
    achieved_ratio: float


def calibrate_threshold(signals, target_deferral_ratio: float) -> Calibration:
    """Pick tau so the fraction of signals below it is as close as possible to the target.

    Only cuts between distinct signal values are achievable; ties in
    distance go to fewer deferrals. ``target = 1`` gives ``tau = inf``.
    """
    s = np.sort(np.asarray(signals, dtype=np.float64))
    n = s.size
    if n == 0:
        raise DataError("cannot calibrate a threshold on an empty signal set")
    if not 0.0 <= target_deferral_ratio <= 1.0:
        raise ValueError("target deferral ratio must lie in [0, 1]")
    # deferring the k smallest is possible when k in {0, n} or s[k-1] < s[k]
    ks = np.concatenate([[0], np.nonzero(s[1:] > s[:-1])[0] + 1, [n]])
    dist = np.abs(ks / n - target_deferral_ratio)
    k = int(ks[np.nonzero(dist <= dist.min() + 1e-12)[0][0]])
    tau = math.inf if k == n else float(s[k])
    return Calibration(tau, k / n)
