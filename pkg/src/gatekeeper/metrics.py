"""Evaluation metrics for a small/large model cascade.

* ``kde_overlap``  -- area under the pointwise minimum of the KDE densities
  of the confidence scores of correct and incorrect predictions (lower is
  better separated).
* ``auroc``        -- Mann-Whitney estimate of P(score_correct > score_incorrect).
* deferral curves  -- joint accuracy as a function of the deferral ratio for
  random, ideal and realized deferral, and ``deferral_performance`` which is
  the share of the ideal-over-random area the realized curve achieves.
* ``pearson`` and ``factuality_prob`` for graded (non-binary) quality scores.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from typing import Protocol

import numpy as np
from scipy.integrate import trapezoid
from scipy.special import expit

from .errors import ConfigError, DataError, OrderingError, ShapeError

log = logging.getLogger(__name__)

KDE_DOMAINS = ("unit_interval_reflected", "data_span_padded")
BANDWIDTH_FLOOR = 1e-3
_SQRT_2PI = math.sqrt(2.0 * math.pi)


# ------------------------------------------------------------------- overlap


@dataclass(frozen=True)
class KdeConfig:
    grid_points: int = 512
    bandwidth: str | float = "silverman"  # or a fixed positive bandwidth
    domain: str = "unit_interval_reflected"

    def __post_init__(self):
        if self.grid_points < 16:
            raise ConfigError("grid_points must be >= 16")
        if isinstance(self.bandwidth, str):
            if self.bandwidth != "silverman":
                raise ConfigError(f"unknown bandwidth rule {self.bandwidth!r}")
        elif not self.bandwidth > 0:
            raise ConfigError("fixed bandwidth must be positive")
        if self.domain not in KDE_DOMAINS:
            raise ConfigError(f"domain must be one of {KDE_DOMAINS}")


def silverman_bandwidth(x) -> float:
    """0.9 * min(std, IQR/1.34) * n^(-1/5), floored at 1e-3."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    sigma = float(np.std(x, ddof=1))
    q75, q25 = np.percentile(x, [75, 25])
    iqr = float(q75 - q25)
    spread = min(sigma, iqr / 1.34) if iqr > 0 else sigma
    return max(0.9 * spread * n ** -0.2, BANDWIDTH_FLOOR)


def _bandwidth(x, cfg: KdeConfig) -> float:
    return silverman_bandwidth(x) if cfg.bandwidth == "silverman" else float(cfg.bandwidth)


def gaussian_kde(x, grid, h: float, reflect_unit: bool = False) -> np.ndarray:
    """Gaussian KDE of samples ``x`` evaluated on ``grid``.

    With ``reflect_unit`` the samples are mirrored at 0 and 1 so the mass
    stays inside the unit interval.
    """
    x = np.asarray(x, dtype=np.float64)
    centers = np.concatenate([x, -x, 2.0 - x]) if reflect_unit else x
    dens = np.zeros_like(grid)
    for start in range(0, centers.size, 2048):
        u = (grid[:, None] - centers[None, start:start + 2048]) / h
        dens += np.exp(-0.5 * u * u).sum(axis=1)
    return dens / (x.size * h * _SQRT_2PI)


def kde_overlap(scores_correct, scores_incorrect, cfg: KdeConfig | None = None) -> float:
    """Integral of min(density_correct, density_incorrect), clamped to [0, 1]."""
    cfg = cfg or KdeConfig()
    a = np.asarray(scores_correct, dtype=np.float64).ravel()
    b = np.asarray(scores_incorrect, dtype=np.float64).ravel()
    if a.size < 2 or b.size < 2:
        raise DataError("kde_overlap needs at least 2 scores in each set")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise DataError("scores must be finite")
    ha, hb = _bandwidth(a, cfg), _bandwidth(b, cfg)
    if cfg.domain == "unit_interval_reflected":
        grid = np.linspace(0.0, 1.0, cfg.grid_points)
        reflect = True
    else:
        pad = 3.0 * max(ha, hb)
        lo = min(a.min(), b.min()) - pad
        hi = max(a.max(), b.max()) + pad
        grid = np.linspace(lo, hi, cfg.grid_points)
        reflect = False
    fa = gaussian_kde(a, grid, ha, reflect)
    fb = gaussian_kde(b, grid, hb, reflect)
    return float(np.clip(trapezoid(np.minimum(fa, fb), grid), 0.0, 1.0))


# --------------------------------------------------------------------- AUROC


def midranks(values) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions."""
    v = np.asarray(values, dtype=np.float64)
    uniq, inverse, counts = np.unique(v, return_inverse=True, return_counts=True)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    return (starts + (counts + 1) / 2.0)[inverse]


def auroc(scores_correct, scores_incorrect) -> float:
    """Fraction of (correct, incorrect) pairs ranked correctly, ties counting one half."""
    a = np.asarray(scores_correct, dtype=np.float64).ravel()
    b = np.asarray(scores_incorrect, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise DataError("auroc needs at least one score in each set")
    ranks = midranks(np.concatenate([a, b]))
    u = ranks[: a.size].sum() - a.size * (a.size + 1) / 2.0
    return float(u / (a.size * b.size))


def auroc_pairwise(scores_correct, scores_incorrect) -> float:
    """O(n^2) reference count of wins plus half-ties."""
    a = np.asarray(scores_correct, dtype=np.float64).ravel()
    b = np.asarray(scores_incorrect, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise DataError("auroc needs at least one score in each set")
    wins = ties = 0
    for x in a:
        for y in b:
            if x > y:
                wins += 1
            elif x == y:
                ties += 1
    return (wins + 0.5 * ties) / (a.size * b.size)


# ------------------------------------------------------------ deferral curves


@dataclass
class DeferralCurve:
    ratios: np.ndarray
    accuracies: np.ndarray
    p_s: float
    p_l: float

    def __post_init__(self):
        self.ratios = np.asarray(self.ratios, dtype=np.float64)
        self.accuracies = np.asarray(self.accuracies, dtype=np.float64)
        if self.ratios.shape != self.accuracies.shape or self.ratios.ndim != 1:
            raise ShapeError("ratios and accuracies must be 1-D and equally long")
        if self.ratios.size < 2 or self.ratios[0] != 0.0 or self.ratios[-1] != 1.0:
            raise ShapeError("a deferral curve must run from r=0 to r=1")
        if np.any(np.diff(self.ratios) < 0):
            raise ShapeError("ratios must be ascending")

    def area(self) -> float:
        return float(trapezoid(self.accuracies, self.ratios))


def default_grid(points: int = 101) -> np.ndarray:
    return np.linspace(0.0, 1.0, points)


def _check_endpoints(p_s: float, p_l: float) -> None:
    if not (0.0 <= p_s <= 1.0 and 0.0 <= p_l <= 1.0):
        raise ValueError("accuracies must lie in [0, 1]")
    if p_s > p_l:
        raise OrderingError(f"small-model accuracy {p_s} exceeds large-model accuracy {p_l}")


def deferral_curve_random(p_s: float, p_l: float, grid=None) -> DeferralCurve:
    """Expected joint accuracy when a uniformly random r-fraction is deferred."""
    _check_endpoints(p_s, p_l)
    r = default_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    return DeferralCurve(r, (1.0 - r) * p_s + r * p_l, p_s, p_l)


def deferral_curve_ideal(p_s: float, p_l: float, grid=None) -> DeferralCurve:
    """Oracle curve: linear from p_s to p_l on [0, 1 - p_s], flat at p_l afterwards."""
    _check_endpoints(p_s, p_l)
    r = default_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    if p_s >= 1.0:
        return DeferralCurve(r, np.ones_like(r), p_s, p_l)
    knee = 1.0 - p_s
    acc = np.where(r <= knee, p_s + (p_l - p_s) / knee * r, p_l)
    return DeferralCurve(r, acc, p_s, p_l)


def _curve_from_order(order, s_values, l_values) -> DeferralCurve:
    s = np.asarray(s_values, dtype=np.float64)
    l = np.asarray(l_values, dtype=np.float64)
    n = s.size
    gains = (l - s)[order]
    acc = (s.sum() + np.concatenate([[0.0], np.cumsum(gains)])) / n
    acc[-1] = l.sum() / n  # exact endpoint, no accumulated rounding
    return DeferralCurve(np.arange(n + 1) / n, acc, float(acc[0]), float(acc[-1]))


def _check_values(s_values, l_values):
    s = np.asarray(s_values, dtype=np.float64)
    l = np.asarray(l_values, dtype=np.float64)
    if s.ndim != 1 or s.shape != l.shape:
        raise ShapeError("small and large values must be aligned 1-D arrays")
    if s.size == 0:
        raise DataError("need at least one record")
    return s, l


def deferral_curve_ideal_discrete(s_values, l_values, mode: str = "binary") -> DeferralCurve:
    """Oracle deferral evaluated at every r = k/n.

    Binary mode defers every small-model mistake first (index order), then
    the rest. Graded mode defers in order of decreasing score gain
    ``l - s`` (stable on index).
    """
    s, l = _check_values(s_values, l_values)
    if mode == "binary":
        order = np.argsort(s, kind="stable")
    else:
        order = np.argsort(-(l - s), kind="stable")
    return _curve_from_order(order, s, l)


def deferral_curve_realized(signals, s_values, l_values) -> DeferralCurve:
    """Defer the k lowest-signal records (ties in index order) for every k = 0..n."""
    s, l = _check_values(s_values, l_values)
    g = np.asarray(signals, dtype=np.float64)
    if g.shape != s.shape:
        raise ShapeError("signals must align with records")
    return _curve_from_order(np.argsort(g, kind="stable"), s, l)


def deferral_performance(realized: DeferralCurve, random: DeferralCurve,
                         ideal: DeferralCurve) -> float | None:
    """Realized area over random divided by ideal area over random.

    Returns None when the ideal and random curves enclose no area (p_s == p_l).
    """
    r = realized.ratios
    if not (np.array_equal(r, random.ratios) and np.array_equal(r, ideal.ratios)):
        raise ShapeError("all three curves must share one ratio grid")
    denom = trapezoid(ideal.accuracies - random.accuracies, r)
    if abs(denom) < 1e-12:
        return None
    return float(trapezoid(realized.accuracies - random.accuracies, r) / denom)


# -------------------------------------------------------------- graded scores


def pearson(signals, quality_scores) -> float | None:
    x = np.asarray(signals, dtype=np.float64).ravel()
    y = np.asarray(quality_scores, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ShapeError("pearson needs equally long inputs")
    if x.size < 2:
        raise DataError("pearson needs at least 2 points")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        log.warning("pearson correlation undefined: one input has zero variance")
        return None
    return float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))


@dataclass(frozen=True)
class FactualityScore:
    p_same: float

    @property
    def p_diff(self) -> float:
        return 1.0 - self.p_same


def factuality_prob(loglik_same: float, loglik_diff: float) -> FactualityScore:
    """Two-way softmax of the judge's "Same"/"Different" log-likelihoods."""
    if not (math.isfinite(loglik_same) and math.isfinite(loglik_diff)):
        raise ValueError("log-likelihoods must be finite")
    return FactualityScore(float(expit(loglik_same - loglik_diff)))


class FactualityJudge(Protocol):
    def logliks(self, candidate: str, reference: str) -> tuple[float, float]:
        """Return ``(loglik_same, loglik_diff)`` for a candidate/reference pair."""


@dataclass
class MockJudge:
    """Offline judge: word-overlap (Jaccard) mapped to log-odds of "Same"."""

    sharpness: float = 6.0

    def logliks(self, candidate: str, reference: str) -> tuple[float, float]:
        a, b = set(candidate.lower().split()), set(reference.lower().split())
        jac = len(a & b) / len(a | b) if (a or b) else 1.0
        logit = self.sharpness * (jac - 0.5)
        # log-sigmoid pair, so the two likelihoods sum to one
        return -math.log1p(math.exp(-logit)), -math.log1p(math.exp(logit))


def factuality_score(judge: FactualityJudge, candidate: str, reference: str) -> float:
    return factuality_prob(*judge.logliks(candidate, reference)).p_same


# -------------------------------------------------------------------- report

METRIC_COLUMNS = ("dataset", "alpha", "seed", "gating", "acc_s", "acc_l", "delta",
                  "s_o", "s_auroc", "s_d", "pearson_rho")


@dataclass
class MetricsReport:
    acc_s: float
    acc_l: float
    s_o: float | None = None
    s_auroc: float | None = None
    s_d: float | None = None
    pearson_rho: float | None = None
    delta: float | None = None

    def row(self, dataset: str, alpha, seed, gating: str) -> dict:
        values = {"dataset": dataset, "alpha": alpha, "seed": seed, "gating": gating,
                  "acc_s": self.acc_s, "acc_l": self.acc_l, "delta": self.delta,
                  "s_o": self.s_o, "s_auroc": self.s_auroc, "s_d": self.s_d,
                  "pearson_rho": self.pearson_rho}
        return {k: _fmt(values[k]) for k in METRIC_COLUMNS}


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(rows, path=None) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow(row)
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text
