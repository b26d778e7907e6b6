"""Per-example cascade records, the dominance check, and threshold sweeps.

Records are the interchange unit between models and metrics: each holds
the small model's deferral signal and how well each model did on that
example (a 0/1 correctness bit in binary mode, a score in [0, 1] in graded
mode). The signal is always computed from the small model alone.
"""

from __future__ import annotations

import csv
import io
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics
from .errors import DataError, OrderingError, ParseError, ShapeError, UnsupportedModeError
from .gating import DeferralRule, GatingFunction
from .metrics import DeferralCurve, KdeConfig, MetricsReport

log = logging.getLogger(__name__)

MODES = ("binary", "graded")
DOMINANCE_WARN_THRESHOLD = 0.05
RECORD_COLUMNS = ("index", "signal", "s_value", "l_value", "mode")


class DominanceWarning(UserWarning):
    """The large model is wrong where the small one is right too often."""


@dataclass(frozen=True)
class ExampleRecord:
    index: int
    signal: float
    s_value: float  # 0/1 correctness (binary) or score in [0, 1] (graded)
    l_value: float
    mode: str = "binary"


@dataclass
class CascadeDataset:
    """Column-oriented, immutable-by-convention record set."""

    index: np.ndarray
    signal: np.ndarray
    s_value: np.ndarray
    l_value: np.ndarray
    mode: str = "binary"

    def __post_init__(self):
        self.index = np.asarray(self.index, dtype=np.int64)
        self.signal = np.asarray(self.signal, dtype=np.float64)
        self.s_value = np.asarray(self.s_value, dtype=np.float64)
        self.l_value = np.asarray(self.l_value, dtype=np.float64)
        n = self.index.size
        if not (self.signal.shape == self.s_value.shape == self.l_value.shape == (n,)):
            raise ShapeError("record columns must be aligned 1-D arrays")
        if self.mode not in MODES:
            raise UnsupportedModeError(f"mode must be one of {MODES}")
        if np.unique(self.index).size != n:
            raise DataError("record indices must be unique")
        for col in (self.s_value, self.l_value):
            if self.mode == "binary" and not np.all((col == 0) | (col == 1)):
                raise DataError("binary records need 0/1 correctness values")
            if self.mode == "graded" and not np.all((col >= 0) & (col <= 1)):
                raise DataError("graded scores must lie in [0, 1]")
        if not np.all(np.isfinite(self.signal)):
            raise DataError("signals must be finite")

    def __len__(self):
        return self.index.size

    @property
    def acc_s(self) -> float:
        return float(self.s_value.mean())

    @property
    def acc_l(self) -> float:
        return float(self.l_value.mean())

    @property
    def delta(self) -> float | None:
        if self.mode != "binary":
            return None
        return float(np.mean((self.l_value == 0) & (self.s_value == 1)))

    def records(self) -> list[ExampleRecord]:
        return [ExampleRecord(int(i), float(g), float(s), float(l), self.mode)
                for i, g, s, l in zip(self.index, self.signal, self.s_value, self.l_value)]

    @classmethod
    def from_records(cls, records) -> "CascadeDataset":
        records = list(records)
        if not records:
            raise DataError("no records")
        modes = {r.mode for r in records}
        if len(modes) != 1:
            raise DataError("records mix binary and graded modes")
        return cls(
            index=[r.index for r in records],
            signal=[r.signal for r in records],
            s_value=[r.s_value for r in records],
            l_value=[r.l_value for r in records],
            mode=modes.pop(),
        )

    def with_signal(self, signal) -> "CascadeDataset":
        return CascadeDataset(self.index, signal, self.s_value, self.l_value, self.mode)


def build_records(small_probs, large_preds, labels, gating: GatingFunction | None = None,
                  small_preds=None, lengths=None) -> CascadeDataset:
    """Binary records from small-model distributions and large-model predictions.

    Classification: ``small_probs`` (N, C), ``large_preds`` and ``labels`` (N,).
    Sequences: ``small_probs`` (N, T, C), ``large_preds`` and ``labels`` (N, T);
    an example counts as correct only if every token is.
    """
    gating = gating or GatingFunction("max_softmax")
    p = np.asarray(small_probs, dtype=np.float64)
    y = np.asarray(labels)
    lp = np.asarray(large_preds)
    sp = np.argmax(p, axis=-1) if small_preds is None else np.asarray(small_preds)
    if p.shape[:-1] != y.shape or lp.shape != y.shape or sp.shape != y.shape:
        raise ShapeError(
            f"misaligned outputs: small {p.shape}, large {lp.shape}, labels {y.shape}"
        )
    if y.shape[0] == 0:
        raise DataError("no examples")
    if p.ndim == 2:
        if gating.kind != "max_softmax":
            signal = gating(p[:, None, :])
        else:
            signal = gating(p)
        s_ok, l_ok = sp == y, lp == y
    elif p.ndim == 3:
        if gating.kind == "max_softmax":
            raise UnsupportedModeError("max_softmax gating applies to single distributions")
        signal = gating(p, lengths)
        s_ok, l_ok = np.all(sp == y, axis=1), np.all(lp == y, axis=1)
    else:
        raise ShapeError(f"small_probs must be (N, C) or (N, T, C), got {p.shape}")
    n = y.shape[0]
    return CascadeDataset(np.arange(n), signal, s_ok.astype(np.float64), l_ok.astype(np.float64))


def build_graded_records(signals, s_scores, l_scores) -> CascadeDataset:
    s = np.asarray(s_scores, dtype=np.float64)
    return CascadeDataset(np.arange(s.size), signals, s, l_scores, mode="graded")


def dominance_delta(dataset: CascadeDataset) -> float:
    """Empirical P(large wrong and small right); warns above 0.05."""
    if dataset.mode != "binary":
        raise UnsupportedModeError("dominance is only defined for binary correctness")
    delta = dataset.delta
    if delta > DOMINANCE_WARN_THRESHOLD:
        warnings.warn(
            f"dominance assumption weak: large model wrong where small is right on "
            f"{delta:.3f} of examples", DominanceWarning, stacklevel=2,
        )
    return delta


def joint_accuracy_at(dataset: CascadeDataset, rule: DeferralRule) -> tuple[float, float]:
    """``(deferral_ratio, joint_accuracy)`` when small answers iff signal >= tau."""
    accept = dataset.signal >= rule.tau
    joint = np.where(accept, dataset.s_value, dataset.l_value)
    return float(1.0 - accept.mean()), float(joint.mean())


@dataclass
class SweepResult:
    realized: DeferralCurve
    ideal: DeferralCurve
    random: DeferralCurve
    report: MetricsReport


def sweep(dataset: CascadeDataset, kde: KdeConfig | None = None) -> SweepResult:
    """Realized, oracle and random curves at all n+1 cut points plus the metric report."""
    if len(dataset) == 0:
        raise DataError("cannot sweep an empty dataset")
    s, l, g = dataset.s_value, dataset.l_value, dataset.signal
    realized = metrics.deferral_curve_realized(g, s, l)
    ideal = metrics.deferral_curve_ideal_discrete(s, l, dataset.mode)
    p_s, p_l = realized.p_s, realized.p_l
    try:
        random = metrics.deferral_curve_random(p_s, p_l, realized.ratios)
    except OrderingError:
        log.warning("small model beats large model (%.4f > %.4f); s_d is not meaningful", p_s, p_l)
        r = realized.ratios
        random = DeferralCurve(r, (1.0 - r) * p_s + r * p_l, p_s, p_l)
    report = MetricsReport(acc_s=p_s, acc_l=p_l,
                           s_d=metrics.deferral_performance(realized, random, ideal))
    if dataset.mode == "binary":
        report.delta = dominance_delta(dataset)
        good, bad = g[s == 1], g[s == 0]
        try:
            report.s_o = metrics.kde_overlap(good, bad, kde)
        except DataError:
            report.s_o = None
        try:
            report.s_auroc = metrics.auroc(good, bad)
        except DataError:
            report.s_auroc = None
    else:
        report.pearson_rho = metrics.pearson(g, s)
    return SweepResult(realized, ideal, random, report)


# ---------------------------------------------------------------- interchange


def write_records_csv(dataset: CascadeDataset, path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_COLUMNS)
    binary = dataset.mode == "binary"
    for i, g, s, l in zip(dataset.index, dataset.signal, dataset.s_value, dataset.l_value):
        sv = str(int(s)) if binary else repr(float(s))
        lv = str(int(l)) if binary else repr(float(l))
        w.writerow([int(i), repr(float(g)), sv, lv, dataset.mode])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def read_records_csv(path) -> CascadeDataset:
    """Parse the record interchange CSV (header: index, signal, s_value, l_value, mode)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != RECORD_COLUMNS:
            raise ParseError(f"{path}: header must be {','.join(RECORD_COLUMNS)}")
        records = []
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(RECORD_COLUMNS):
                raise ParseError(f"{path}: row {row_no} has {len(row)} cells")
            try:
                rec = ExampleRecord(int(row[0]), float(row[1]), float(row[2]), float(row[3]),
                                    row[4].strip())
            except ValueError as exc:
                raise ParseError(f"{path}: row {row_no}: {exc}") from None
            records.append(rec)
    try:
        return CascadeDataset.from_records(records)
    except (DataError, UnsupportedModeError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
