"""Probability primitives and a finite-difference gradient checker.

Dense matrices are plain 2-D ``float64`` numpy arrays (row-major). A
"probability vector" is any array whose last axis sums to one; every
function here broadcasts over leading axes, so a batch of N distributions
is an (N, C) array and a batch of token sequences is (N, T, C).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import NumericDomainError, ShapeError

CLIP_EPS = 1e-12


def _finite(x: np.ndarray, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericDomainError(f"{what} contains non-finite values")
    return x


def as_prob_vector(p, atol: float = 1e-9) -> np.ndarray:
    """Validate ``p`` as (a batch of) probability vectors and return it as float64."""
    p = _finite(p, "probability vector")
    if p.ndim == 0 or p.shape[-1] < 2:
        raise ShapeError(f"probability vectors need at least 2 classes, got shape {p.shape}")
    if np.any(p < -atol) or np.any(p > 1 + atol):
        raise NumericDomainError("probabilities must lie in [0, 1]")
    if not np.allclose(p.sum(axis=-1), 1.0, rtol=0.0, atol=atol):
        raise NumericDomainError("probabilities must sum to 1")
    return p


def uniform(class_count: int) -> np.ndarray:
    if class_count < 2:
        raise ShapeError("class_count must be >= 2")
    return np.full(class_count, 1.0 / class_count)


def log_softmax(logits) -> np.ndarray:
    z = _finite(logits, "logits")
    if z.ndim == 0 or z.shape[-1] < 2:
        raise ShapeError(f"logits need at least 2 classes, got shape {z.shape}")
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits) -> np.ndarray:
    """Max-subtracted softmax over the last axis."""
    z = _finite(logits, "logits")
    if z.ndim == 0 or z.shape[-1] < 2:
        raise ShapeError(f"logits need at least 2 classes, got shape {z.shape}")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def clipped_log(p, clip_eps: float = CLIP_EPS) -> np.ndarray:
    return np.log(np.maximum(p, clip_eps))


def cross_entropy(p, y, clip_eps: float = CLIP_EPS):
    """``-log(max(p[y], clip_eps))``; ``p`` may be (C,) with scalar ``y`` or (N, C) with (N,) labels."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y)
    C = p.shape[-1]
    if np.any(y < 0) or np.any(y >= C):
        raise IndexError(f"label out of range [0, {C})")
    picked = np.take_along_axis(p, y[..., None].astype(np.int64), axis=-1)[..., 0]
    out = -np.log(np.maximum(picked, clip_eps))
    return float(out) if out.ndim == 0 else out


def entropy(p, clip_eps: float = CLIP_EPS):
    """Shannon entropy in nats, logs floored at ``clip_eps``."""
    p = np.asarray(p, dtype=np.float64)
    out = -(p * clipped_log(p, clip_eps)).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def kl_to_uniform(p, clip_eps: float = CLIP_EPS):
    """KL(p || U) = log C - H(p), with the same clipping as :func:`entropy`."""
    p = np.asarray(p, dtype=np.float64)
    out = np.log(p.shape[-1]) - entropy(p, clip_eps)
    return float(out) if np.ndim(out) == 0 else out


def finite_diff_gradient(f: Callable[[np.ndarray], float], theta, h: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(θ + h e_j) - f(θ - h e_j)) / 2h`` for every coordinate."""
    if not h > 0:
        raise ValueError("step size h must be positive")
    theta = np.array(theta, dtype=np.float64)
    flat = theta.reshape(-1)
    grad = np.empty_like(flat)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        fp = f(theta)
        flat[j] = orig - h
        fm = f(theta)
        flat[j] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericDomainError(f"f is not finite around coordinate {j}")
        grad[j] = (fp - fm) / (2.0 * h)
    return grad.reshape(theta.shape)


@dataclass(frozen=True)
class GradCheckReport:
    max_relative_error: float
    param_count: int
    step_size: float

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_relative_error < tol


def relative_error(analytic, numeric, floor: float = 1e-12) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


def grad_check(f: Callable[[np.ndarray], float], analytic_grad, theta, h: float = 1e-5) -> GradCheckReport:
    numeric = finite_diff_gradient(f, theta, h)
    return GradCheckReport(
        max_relative_error=relative_error(analytic_grad, numeric),
        param_count=int(np.size(theta)),
        step_size=h,
    )
