"""Metric CSV parsing, SVG line plots and the summary table.

SVG is written by hand so output depends only on the input numbers: no
timestamps, no renderer version strings, and every coordinate is printed
with fixed precision.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from html import escape
from pathlib import Path

import numpy as np

from ..cascade import read_records_csv
from ..errors import ParseError
from ..metrics import (METRIC_COLUMNS, deferral_curve_ideal_discrete, deferral_curve_realized)

FLOAT_COLUMNS = ("acc_s", "acc_l", "delta", "s_o", "s_auroc", "s_d", "pearson_rho")
PANELS = (("s_o", "Overlap s_o (lower is better)"),
          ("s_d", "Deferral performance s_d"),
          ("acc_s", "Small-model accuracy"))
CURVE_POINTS = 201

W, H = 480, 320
LEFT, RIGHT, TOP, BOTTOM = 60, 20, 36, 44


@dataclass(frozen=True)
class MetricRow:
    dataset: str
    alpha: float | None  # None marks the baseline
    seed: int
    gating: str
    values: dict

    def get(self, column: str) -> float | None:
        return self.values.get(column)


def read_metrics_csv(path) -> list[MetricRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != METRIC_COLUMNS:
            raise ParseError(f"{path}: row 1: header must be {','.join(METRIC_COLUMNS)}")
        rows = []
        for row_no, cells in enumerate(reader, start=2):
            if not cells:
                continue
            if len(cells) != len(METRIC_COLUMNS):
                raise ParseError(f"{path}: row {row_no}: expected {len(METRIC_COLUMNS)} cells, got {len(cells)}")
            rec = dict(zip(METRIC_COLUMNS, (c.strip() for c in cells)))
            try:
                alpha = None if rec["alpha"] == "baseline" else float(rec["alpha"])
                seed = int(rec["seed"])
                values = {c: (float(rec[c]) if rec[c] != "" else None) for c in FLOAT_COLUMNS}
            except ValueError as exc:
                raise ParseError(f"{path}: row {row_no}: {exc}") from None
            rows.append(MetricRow(rec["dataset"], alpha, seed, rec["gating"], values))
    if not rows:
        raise ParseError(f"{path}: no data rows")
    return rows


@dataclass
class Band:
    alphas: list[float]
    median: list[float]
    low: list[float]
    high: list[float]
    baseline: float | None


def band(rows: list[MetricRow], column: str) -> Band:
    """Per-alpha median and min/max over seeds, plus the baseline median."""
    by_alpha: dict[float, list[float]] = {}
    base = []
    for r in rows:
        v = r.get(column)
        if v is None or not math.isfinite(v):
            continue
        if r.alpha is None:
            base.append(v)
        else:
            by_alpha.setdefault(r.alpha, []).append(v)
    alphas = sorted(by_alpha)
    med = [float(np.median(by_alpha[a])) for a in alphas]
    return Band(alphas, med, [min(by_alpha[a]) for a in alphas], [max(by_alpha[a]) for a in alphas],
                float(np.median(base)) if base else None)


# ------------------------------------------------------------------------ svg


def _f(x: float) -> str:
    return f"{x:.2f}"


class _Frame:
    def __init__(self, x_range, y_range):
        self.x0, self.x1 = x_range
        self.y0, self.y1 = y_range
        if self.x1 <= self.x0:
            self.x0, self.x1 = self.x0 - 0.5, self.x0 + 0.5
        if self.y1 <= self.y0:
            self.y0, self.y1 = self.y0 - 0.5, self.y0 + 0.5

    def x(self, v):
        return LEFT + (v - self.x0) / (self.x1 - self.x0) * (W - LEFT - RIGHT)

    def y(self, v):
        return H - BOTTOM - (v - self.y0) / (self.y1 - self.y0) * (H - TOP - BOTTOM)

    def points(self, xs, ys):
        return " ".join(f"{_f(self.x(a))},{_f(self.y(b))}" for a, b in zip(xs, ys))


def _axes(fr: _Frame, title: str, xlabel: str, ylabel: str) -> list[str]:
    out = [
        f'<text x="{W / 2:.0f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{LEFT}" y1="{H - BOTTOM}" x2="{W - RIGHT}" y2="{H - BOTTOM}" stroke="black"/>',
        f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{H - BOTTOM}" stroke="black"/>',
        f'<text x="{(LEFT + W - RIGHT) / 2:.0f}" y="{H - 8}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
        f'<text x="14" y="{(TOP + H - BOTTOM) / 2:.0f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {(TOP + H - BOTTOM) / 2:.0f})">{escape(ylabel)}</text>',
    ]
    for i in range(5):
        xv = fr.x0 + (fr.x1 - fr.x0) * i / 4
        yv = fr.y0 + (fr.y1 - fr.y0) * i / 4
        out.append(f'<text x="{_f(fr.x(xv))}" y="{H - BOTTOM + 16}" text-anchor="middle" font-size="10">{xv:.2f}</text>')
        out.append(f'<text x="{LEFT - 6}" y="{_f(fr.y(yv) + 3)}" text-anchor="end" font-size="10">{yv:.2f}</text>')
        out.append(f'<line x1="{LEFT}" y1="{_f(fr.y(yv))}" x2="{W - RIGHT}" y2="{_f(fr.y(yv))}" '
                   f'stroke="#dddddd" stroke-width="0.5"/>')
    return out


def _doc(body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
            f'viewBox="0 0 {W} {H}">\n<rect width="{W}" height="{H}" fill="white"/>')
    return "\n".join([head, *body, "</svg>"]) + "\n"


def _legend(items: list[tuple[str, str, str]]) -> list[str]:
    out = []
    for i, (label, color, dash) in enumerate(items):
        y = TOP + 6 + 14 * i
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        out.append(f'<line x1="{W - RIGHT - 120}" y1="{y}" x2="{W - RIGHT - 100}" y2="{y}" '
                   f'stroke="{color}" stroke-width="2"{extra}/>')
        out.append(f'<text x="{W - RIGHT - 96}" y="{y + 4}" font-size="10">{escape(label)}</text>')
    return out


def alpha_panel_svg(b: Band, column: str, title: str) -> str:
    """Median line with a min-max band across seeds; the baseline is a dashed horizontal line."""
    values = b.low + b.high + ([b.baseline] if b.baseline is not None else [])
    lo = min(values) if values else 0.0
    hi = max(values) if values else 1.0
    if column == "s_d":
        y_range = (min(0.0, lo), 1.0)
    else:
        pad = 0.05 * (hi - lo) if hi > lo else 0.05
        y_range = (lo - pad, hi + pad)
    x_range = (0.0, 1.0)
    fr = _Frame(x_range, y_range)
    body = _axes(fr, title, "alpha", column)
    if b.alphas:
        poly = fr.points(b.alphas + b.alphas[::-1], b.high + b.low[::-1])
        body.append(f'<polygon points="{poly}" fill="#1f77b4" fill-opacity="0.2" stroke="none"/>')
        body.append(f'<polyline points="{fr.points(b.alphas, b.median)}" fill="none" stroke="#1f77b4" stroke-width="2"/>')
        for a, m in zip(b.alphas, b.median):
            body.append(f'<circle cx="{_f(fr.x(a))}" cy="{_f(fr.y(m))}" r="3" fill="#1f77b4"/>')
    legend = [("median over seeds", "#1f77b4", "")]
    if b.baseline is not None:
        yb = _f(fr.y(b.baseline))
        body.append(f'<line x1="{LEFT}" y1="{yb}" x2="{W - RIGHT}" y2="{yb}" stroke="#d62728" '
                    f'stroke-width="1.5" stroke-dasharray="6,4"/>')
        legend.append(("baseline", "#d62728", "6,4"))
    return _doc(body + _legend(legend))


def _thin(xs: np.ndarray, ys: np.ndarray):
    if xs.size <= CURVE_POINTS:
        return xs, ys
    idx = np.unique(np.linspace(0, xs.size - 1, CURVE_POINTS).round().astype(int))
    return xs[idx], ys[idx]


def deferral_curves_svg(records, title: str) -> str:
    """Random, ideal and realized joint accuracy against deferral ratio for one run."""
    realized = deferral_curve_realized(records.signal, records.s_value, records.l_value)
    ideal = deferral_curve_ideal_discrete(records.s_value, records.l_value, records.mode)
    r = realized.ratios
    random_acc = (1.0 - r) * realized.p_s + r * realized.p_l
    curves = [("random", random_acc, "#7f7f7f", "4,3"),
              ("ideal", ideal.accuracies, "#2ca02c", ""),
              ("realized", realized.accuracies, "#1f77b4", "")]
    lo = min(float(c[1].min()) for c in curves)
    hi = max(float(c[1].max()) for c in curves)
    pad = 0.05 * (hi - lo) if hi > lo else 0.05
    fr = _Frame((0.0, 1.0), (lo - pad, hi + pad))
    body = _axes(fr, title, "deferral ratio", "joint accuracy")
    for _, acc, color, dash in curves:
        xs, ys = _thin(r, acc)
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        body.append(f'<polyline points="{fr.points(xs, ys)}" fill="none" stroke="{color}" stroke-width="2"{extra}/>')
    return _doc(body + _legend([(n, c, d) for n, _, c, d in curves]))


# -------------------------------------------------------------------- summary


def _cell(v) -> str:
    return "" if v is None else f"{v:.4f}"


def summary_table(rows: list[MetricRow]) -> str:
    """Markdown table of per-alpha medians over seeds; the baseline comes first."""
    cols = ("acc_s", "acc_l", "delta", "s_o", "s_auroc", "s_d", "pearson_rho")
    groups: dict = {}
    for r in rows:
        groups.setdefault(r.alpha, []).append(r)
    keys = ([None] if None in groups else []) + sorted(k for k in groups if k is not None)
    lines = ["| alpha | seeds | " + " | ".join(cols) + " |",
             "|---" * (len(cols) + 2) + "|"]
    for k in keys:
        meds = []
        for c in cols:
            vals = [r.get(c) for r in groups[k] if r.get(c) is not None]
            meds.append(_cell(float(np.median(vals)) if vals else None))
        label = "baseline" if k is None else repr(k)
        lines.append(f"| {label} | {len(groups[k])} | " + " | ".join(meds) + " |")
    return "\n".join(lines) + "\n"


def write_report(metrics_path, out_dir, records_dir=None) -> list[Path]:
    """Write the alpha panels, per-run deferral curves for the first seed, and summary.md."""
    rows = read_metrics_csv(metrics_path)
    out_dir = Path(out_dir)
    plots = out_dir / "plots"
    plots.mkdir(parents=True, exist_ok=True)
    written = []
    for column, title in PANELS:
        path = plots / f"{column}_vs_alpha.svg"
        path.write_text(alpha_panel_svg(band(rows, column), column, title))
        written.append(path)
    if records_dir is not None:
        first_seed = min(r.seed for r in rows)
        for r in rows:
            if r.seed != first_seed:
                continue
            name = (f"baseline_seed{r.seed}" if r.alpha is None else f"a{r.alpha!r}_seed{r.seed}")
            rec_path = Path(records_dir) / f"{name}.csv"
            if not rec_path.exists():
                continue
            path = plots / f"curves_{name}.svg"
            label = "baseline" if r.alpha is None else f"alpha={r.alpha!r}"
            path.write_text(deferral_curves_svg(read_records_csv(rec_path), f"Deferral curves, {label}, seed {r.seed}"))
            written.append(path)
    summary = out_dir / "summary.md"
    summary.write_text(summary_table(rows))
    written.append(summary)
    return written
