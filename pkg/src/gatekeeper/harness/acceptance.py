"""The acceptance suite: ten pass/fail criteria with runtime budgets, plus a mutation canary.

Used by ``tests/test_acceptance.py`` and by the ``selfcheck`` CLI command.
Criteria 6, 8 and 10 share pipeline runs on the reference blob
configuration; :class:`AcceptanceSuite` caches them.
"""

from __future__ import annotations

import math
import tempfile
import time
import traceback
import warnings
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .. import numerics
from ..cascade import DominanceWarning
from ..loss import GatekeeperConfig, correctness_masks, gatekeeper_loss_classification, gatekeeper_loss_token
from ..metrics import (DeferralCurve, KdeConfig, auroc, auroc_pairwise, deferral_curve_ideal,
                       deferral_curve_ideal_discrete, deferral_curve_random, deferral_curve_realized,
                       deferral_performance, factuality_prob, kde_overlap)
from ..models import backward, forward, init_params, init_token_params, token_backward, token_forward
from . import pipeline
from .config import DatasetConfig, ExperimentConfig, ModelConfig, StageConfig
from .report import band, read_metrics_csv

BLOB_BUDGET = 240.0


@dataclass
class CriterionResult:
    number: int
    title: str
    passed: bool
    detail: str
    seconds: float
    budget: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"[{status}] criterion {self.number:2d} {self.title}: {self.detail} "
                f"({self.seconds:.1f}s, budget {self.budget:.0f}s)")


def blob_reference_config(output_dir) -> ExperimentConfig:
    """2-D blobs, C=4, flip 0.15, 8000/2000 split, width-1 small MLP, Bayes-oracle large model."""
    # width 1 leaves a clear capacity gap to the Bayes classifier
    return ExperimentConfig(name="blobs", small_model=ModelConfig(hidden=(1,)), output_dir=str(output_dir))


def token_reference_config(output_dir) -> ExperimentConfig:
    """Copy-with-noise, vocab 8, T=16, a quarter of positions random; fine-tune at alpha 0.1."""
    return ExperimentConfig(
        name="tokens",
        dataset=DatasetConfig(kind="sequences", vocab_size=8, length=16, rule="copy_with_noise",
                              ambiguous_fraction=0.25, n_train=4000, n_eval=2000),
        small_model=ModelConfig(hidden=(32,), context_window=4),
        pretrain=StageConfig(epochs=10, lr=0.05, batch_size=32),
        finetune=StageConfig(epochs=5, lr=0.005, batch_size=32),
        alphas=(0.1,),
        gating="neg_pred_entropy",
        output_dir=str(output_dir),
    )


# ------------------------------------------------------------ criterion 1


def _mixed_classification_case(rng):
    D, Hd, C, N = (int(v) for v in (rng.integers(2, 5), rng.integers(2, 6), rng.integers(2, 6), rng.integers(4, 9)))
    params = init_params(int(rng.integers(2**31)), [D, Hd, C], "tanh")
    X = rng.standard_normal((N, D))
    pred = np.argmax(forward(params, X).logits, axis=1)
    labels = pred.copy()
    wrong = rng.permutation(N)[: max(1, N // 2)]
    labels[wrong] = (pred[wrong] + rng.integers(1, C, size=wrong.size)) % C
    return params, X, labels


def _mixed_token_case(rng):
    for _ in range(200):
        C, k, T, N = (int(v) for v in (rng.integers(2, 4), rng.integers(1, 3), rng.integers(2, 5), rng.integers(2, 4)))
        params = init_token_params(int(rng.integers(2**31)), C, k, (int(rng.integers(2, 5)),), "tanh")
        seqs = rng.integers(0, C, size=(N, T))
        logits, _ = token_forward(params, seqs)
        m_corr, _ = correctness_masks(logits, seqs)
        if 0 < m_corr.sum() < m_corr.size:
            return params, seqs
    raise RuntimeError("could not draw a token batch with mixed correctness")


def gradient_trial(rng, h: float = 1e-5) -> float:
    """Max relative error between backprop and central differences for one random triple."""
    alpha = float(rng.uniform(0.05, 0.95))
    if rng.random() < 0.25:
        params, seqs = _mixed_token_case(rng)
        cfg = GatekeeperConfig(alpha, "per_token" if rng.random() < 0.5 else "per_batch")
        logits, trace = token_forward(params, seqs)
        masks = correctness_masks(logits, seqs)
        _, g = gatekeeper_loss_token(logits, seqs, cfg, masks)
        analytic = token_backward(params, trace, g).flatten()

        def f(theta):
            z, _ = token_forward(params.unflatten(theta), seqs)
            return gatekeeper_loss_token(z, seqs, cfg, masks)[0].l_total
    else:
        params, X, labels = _mixed_classification_case(rng)
        cfg = GatekeeperConfig(alpha)
        trace = forward(params, X)
        masks = correctness_masks(trace.logits, labels)
        _, g = gatekeeper_loss_classification(trace.logits, labels, cfg, masks)
        analytic = backward(params, trace, g).flatten()

        def f(theta):
            z = forward(params.unflatten(theta), X).logits
            return gatekeeper_loss_classification(z, labels, cfg, masks)[0].l_total
    return numerics.grad_check(f, analytic, params.flatten(), h).max_relative_error


def _c1(suite, trials: int = 100):
    rng = np.random.default_rng(20240601)
    errs = [gradient_trial(rng) for _ in range(trials)]
    worst = max(errs)
    return worst < 1e-4, f"max relative error {worst:.2e} over {trials} triples (need < 1e-4)"


@contextmanager
def kl_sign_flip():
    """Temporarily negate ``numerics.kl_to_uniform`` (the mutation canary)."""
    original = numerics.kl_to_uniform
    numerics.kl_to_uniform = lambda p, clip_eps=numerics.CLIP_EPS: -original(p, clip_eps)
    try:
        yield
    finally:
        numerics.kl_to_uniform = original


def mutation_canary(trials: int = 20) -> tuple[bool, str]:
    """With the KL sign flipped, the gradient check must fail."""
    with kl_sign_flip():
        ok, detail = _c1(None, trials)
    return (not ok), f"sign flip in kl_to_uniform {'caught' if not ok else 'NOT caught'}: {detail}"


# ------------------------------------------------------------ criteria 2-5


def _c2(suite):
    rng = np.random.default_rng(2)
    for i in range(200):
        n = int(rng.integers(2, 501))
        n1 = int(rng.integers(1, n))
        levels = int(rng.integers(2, 30))
        scores = rng.integers(0, levels, size=n) / levels if i % 2 == 0 else rng.random(n)
        a, b = scores[:n1], scores[n1:]
        if auroc(a, b) != auroc_pairwise(a, b):
            return False, f"instance {i}: {auroc(a, b)!r} != {auroc_pairwise(a, b)!r}"
    hand = auroc([0.9, 0.4], [0.6, 0.1])
    return hand == 0.75, f"200 random instances exact; hand case = {hand!r} (want 0.75)"


def _c3(suite):
    rng = np.random.default_rng(3)
    n = 200
    worst = 0.0
    for _ in range(100):
        s = (rng.random(n) < rng.uniform(0.05, 0.95)).astype(float)
        l = np.ones(n)
        disc = deferral_curve_ideal_discrete(s, l)
        ref = deferral_curve_ideal(float(s.mean()), 1.0, disc.ratios)
        worst = max(worst, float(np.max(np.abs(disc.accuracies - ref.accuracies))))
    spot = deferral_curve_ideal(0.6, 0.9, [0.0, 0.2, 0.5, 1.0]).accuracies
    spot_ok = spot[1] == 0.75 and spot[2] == 0.9
    return (worst <= 1.0 / n and spot_ok,
            f"max gap {worst:.2e} (need <= {1 / n}); acc(0.2)={float(spot[1])!r}, acc(0.5)={float(spot[2])!r}")


def _binary_records(rng, n):
    s = (rng.random(n) < 0.6).astype(float)
    l = np.where(s == 1, 1.0, (rng.random(n) < 0.8).astype(float))
    return s, l


def _sd(signal, s, l):
    realized = deferral_curve_realized(signal, s, l)
    ideal = deferral_curve_ideal_discrete(s, l)
    random = deferral_curve_random(realized.p_s, realized.p_l, realized.ratios)
    return deferral_performance(realized, random, ideal)


def _c4(suite):
    rng = np.random.default_rng(4)
    s, l = _binary_records(rng, 2000)
    oracle = _sd(s, s, l)
    rand = [_sd(np.random.default_rng(1000 + k).random(2000), *_binary_records(np.random.default_rng(k), 2000))
            for k in range(100)]
    med = float(np.median(rand))
    r = np.linspace(0, 1, 101)
    rnd = deferral_curve_random(0.6, 0.9, r)
    ide = deferral_curve_ideal(0.6, 0.9, r)
    mid = DeferralCurve(r, 0.5 * (rnd.accuracies + ide.accuracies), 0.6, 0.9)
    half = deferral_performance(mid, rnd, ide)
    ok = abs(oracle - 1) <= 1e-6 and abs(med) <= 0.05 and abs(half - 0.5) <= 1e-9
    return ok, f"oracle s_d={oracle:.9f}, random median={med:+.4f}, midpoint={half:.12f}"


def _c5(suite):
    rng = np.random.default_rng(5)
    x = rng.beta(5, 2, size=2000)
    same = kde_overlap(x, x)
    disjoint = kde_overlap(rng.uniform(0.0, 0.3, 2000), rng.uniform(0.7, 1.0, 2000))
    cfg = KdeConfig(domain="data_span_padded")
    gauss = kde_overlap(rng.normal(0.0, 1.0, 5000), rng.normal(2.0, 1.0, 5000), cfg)
    target = 2.0 * norm.cdf(-1.0)  # overlap of two unit normals 2 sigma apart
    ok = same >= 0.95 and disjoint <= 0.05 and abs(gauss - target) <= 0.03
    return ok, f"identical {same:.4f}, disjoint {disjoint:.4f}, 2-sigma {gauss:.4f} vs {target:.4f}"


# --------------------------------------------------------- criteria 6-10


def _medians(rows, column):
    b = band(rows, column)
    return dict(zip(b.alphas, b.median)), b.baseline


def _c6(suite):
    run = suite.blob_run(0)
    rows = run["rows"]
    sd, sd_base = _medians(rows, "s_d")
    so, so_base = _medians(rows, "s_o")
    acc, acc_base = _medians(rows, "acc_s")
    lo = min(sd)
    checks = {
        "s_d gain": sd[lo] >= sd_base + 0.10,
        "s_o drop": so[lo] <= so_base - 0.10,
        "s_d trend": all(sd[b] <= sd[a] + 0.03 for a, b in zip(sorted(sd), sorted(sd)[1:])),
        "acc trade-off": acc[lo] <= acc_base,
    }
    trend = ", ".join(f"{a:g}:{sd[a]:.3f}" for a in sorted(sd))
    detail = (f"s_d {sd[lo]:.3f} vs baseline {sd_base:.3f}; s_o {so[lo]:.3f} vs {so_base:.3f}; "
              f"acc {acc[lo]:.3f} vs {acc_base:.3f}; s_d by alpha [{trend}]")
    failed = [k for k, v in checks.items() if not v]
    if failed:
        detail += f"; failed: {', '.join(failed)}"
    return not failed, detail


def _c7(suite):
    cfg = token_reference_config(suite.workdir / "tokens")
    pipeline.run_all(cfg)
    rows = read_metrics_csv(Path(cfg.output_dir) / pipeline.METRICS_FILE)
    base = {r.seed: r.get("s_auroc") for r in rows if r.alpha is None}
    ft = {r.seed: r.get("s_auroc") for r in rows if r.alpha == 0.1}
    if any(v is None for v in [*base.values(), *ft.values()]):
        return False, "AUROC undefined (a run has no correct or no incorrect sequences)"
    mb, mf = float(np.median(list(base.values()))), float(np.median(list(ft.values())))
    return mf - mb >= 0.05, f"median AUROC baseline {mb:.3f}, alpha=0.1 {mf:.3f}, gain {mf - mb:+.3f} (need >= +0.05)"


def _c8(suite):
    run = suite.blob_run(0)
    rows = run["rows"]
    base = [r.get("delta") for r in rows if r.alpha is None]
    worst_any = max(r.get("delta") for r in rows)
    ok = max(base) <= 0.02 and run["warnings"] == 0 and worst_any <= 0.05
    return ok, (f"baseline delta max {max(base):.4f} (need <= 0.02); largest delta over all runs "
                f"{worst_any:.4f}; dominance warnings {run['warnings']}")


def _c9(suite):
    even = factuality_prob(-1.3, -1.3).p_same
    three = factuality_prob(math.log(3.0), 0.0).p_same
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(1000):
        a, b = rng.normal(0, 5, size=2)
        s1, s2 = factuality_prob(a, b), factuality_prob(b, a)
        worst = max(worst, abs(s1.p_same + s2.p_same - 1.0), abs(s1.p_same + s1.p_diff - 1.0))
    ok = even == 0.5 and abs(three - 0.75) <= 1e-12 and worst <= 1e-12
    return ok, f"equal -> {even!r}; ln 3 -> {three!r}; complement error {worst:.1e}"


def _c10(suite):
    first, second = suite.blob_run(0), suite.blob_run(1)
    names = ["metrics.csv", *sorted(p.relative_to(first["dir"]).as_posix()
                                    for p in (first["dir"] / "plots").glob("*.svg"))]
    diffs = [n for n in names if (first["dir"] / n).read_bytes() != (second["dir"] / n).read_bytes()]
    return not diffs, (f"{len(names)} files compared, {len(diffs)} differ"
                       + (f": {', '.join(diffs[:3])}" if diffs else ""))


CRITERIA = (
    (1, "gradient fidelity", _c1, 30.0),
    (2, "AUROC oracle equivalence", _c2, 10.0),
    (3, "ideal-curve consistency", _c3, 10.0),
    (4, "s_d endpoints", _c4, 30.0),
    (5, "overlap sanity", _c5, 20.0),
    (6, "blob directional reproduction", _c6, BLOB_BUDGET),
    (7, "token directional reproduction", _c7, 180.0),
    (8, "dominance check", _c8, BLOB_BUDGET),
    (9, "factuality normalization", _c9, 1.0),
    (10, "determinism", _c10, 2 * BLOB_BUDGET),
)


class AcceptanceSuite:
    """Runs criteria on demand; pipeline runs live under ``workdir``."""

    def __init__(self, workdir=None):
        self._tmp = None
        if workdir is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="gatekeeper-accept-")
            workdir = self._tmp.name
        self.workdir = Path(workdir)
        self._blob_runs: dict[int, dict] = {}

    def blob_run(self, index: int) -> dict:
        """The reference blob pipeline, run into its own directory (cached per index)."""
        if index not in self._blob_runs:
            cfg = blob_reference_config(self.workdir / f"blobs_run{index}")
            t0 = time.perf_counter()
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", DominanceWarning)
                pipeline.run_all(cfg)
            rows = read_metrics_csv(Path(cfg.output_dir) / pipeline.METRICS_FILE)
            self._blob_runs[index] = {
                "dir": Path(cfg.output_dir),
                "rows": rows,
                "warnings": sum(issubclass(w.category, DominanceWarning) for w in caught),
                "seconds": time.perf_counter() - t0,
            }
        return self._blob_runs[index]

    def run(self, number: int) -> CriterionResult:
        num, title, fn, budget = CRITERIA[number - 1]
        cached = {i: r["seconds"] for i, r in self._blob_runs.items()}
        t0 = time.perf_counter()
        try:
            ok, detail = fn(self)
        except Exception as exc:  # reported as a failure, never a crash
            ok = False
            detail = f"error: {type(exc).__name__}: {exc}"
            tb = traceback.format_exc(limit=3).strip().splitlines()
            if tb:
                detail += f" [{tb[-1]}]"
        seconds = time.perf_counter() - t0
        # shared pipeline runs count toward every criterion that uses them
        if num in (6, 8):
            seconds += cached.get(0, 0.0)
        elif num == 10:
            seconds += sum(cached.get(i, 0.0) for i in (0, 1))
        return CriterionResult(num, title, bool(ok) and seconds <= budget, detail, seconds, budget)

    def run_all(self) -> list[CriterionResult]:
        return [self.run(n) for n in range(1, len(CRITERIA) + 1)]

    def close(self):
        if self._tmp is not None:
            self._tmp.cleanup()
