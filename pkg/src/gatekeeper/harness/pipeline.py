"""The three-stage pipeline: pretrain, Gatekeeper fine-tune sweep, evaluate; plus reporting.

Every stage reads and writes plain files under one output directory::

    config.yaml                 resolved configuration
    baseline.json               seed -> pretrained small-model checkpoint
    checkpoints/                small_seed<s>.json, a<alpha>_seed<s>.json, large.json
                                (or large_model.json, a tag record in bayes_oracle mode)
    stats/                      per-epoch training CSVs
    records/<run>.csv           per-example cascade records
    metrics.csv                 one row per run
    plots/, summary.md          written by the report stage
    manifest.json               config hash, artifact paths, wall-clock per stage

Cells of the (alpha, seed) grid are independent: each derives its own
seed from the cell values and owns its output files, so they can run in
any order or in parallel.
"""

from __future__ import annotations

import functools
import hashlib
import json
import logging
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import __version__
from ..cascade import DominanceWarning, build_records, sweep, write_records_csv
from ..data import (BayesBlobClassifier, SequenceTaskSpec, SyntheticBlobSpec, gen_blobs,
                    gen_sequences, load_csv, load_idx, ring_means, rule_predictions, split)
from ..errors import DataError, DependencyError
from ..gating import GatingFunction, sequence_lengths
from ..loss import GatekeeperConfig
from ..metrics import write_metrics_csv
from ..models import init_params, init_token_params, load_checkpoint, save_checkpoint
from ..training import OptimizerConfig, finetune, predict_proba, pretrain, stats_csv
from .config import ExperimentConfig, config_hash, derive_seed, dump_config
from . import report as report_mod

log = logging.getLogger(__name__)

BASELINE_FILE = "baseline.json"
METRICS_FILE = "metrics.csv"
MANIFEST_FILE = "manifest.json"


# ----------------------------------------------------------------------- data


@dataclass
class TaskData:
    train: object
    eval: object
    blob_spec: SyntheticBlobSpec | None = None


def blob_spec(cfg: ExperimentConfig) -> SyntheticBlobSpec:
    d = cfg.dataset
    return SyntheticBlobSpec(d.class_count, d.dims, ring_means(d.class_count, d.dims, d.radius),
                             d.std, d.flip_rate, d.n_train + d.n_eval)


def _train_eval(dataset, n_eval: int, seed: int):
    n = len(dataset)
    frac_eval = n_eval / n
    train, _, evalset = split(dataset, (1.0 - frac_eval, 0.0, frac_eval), seed)
    return train, evalset


@functools.lru_cache(maxsize=4)
def load_task(cfg: ExperimentConfig) -> TaskData:
    """Train and held-out evaluation splits; synthetic data is generated from the master seed."""
    d = cfg.dataset
    data_seed = derive_seed(cfg.master_seed, "data")
    if d.kind == "blobs":
        spec = blob_spec(cfg)
        train, evalset = _train_eval(gen_blobs(spec, data_seed), d.n_eval, data_seed)
        return TaskData(train, evalset, spec)
    if d.kind == "sequences":
        spec = SequenceTaskSpec(d.vocab_size, d.length, d.rule, d.ambiguous_fraction,
                                d.noise_persistence, d.n_train + d.n_eval)
        train, evalset = _train_eval(gen_sequences(spec, data_seed), d.n_eval, data_seed)
        return TaskData(train, evalset)
    if d.kind == "csv":
        full = load_csv(d.path, d.label_column)
    else:
        full = load_idx(d.path, d.labels_path)
    n_eval = int(round(d.eval_fraction * len(full)))
    if n_eval < 1 or n_eval >= len(full):
        raise DataError(f"eval_fraction {d.eval_fraction} leaves an empty split of {len(full)} rows")
    train, evalset = _train_eval(full, n_eval, data_seed)
    return TaskData(train, evalset)


def _new_model(cfg: ExperimentConfig, model_cfg, data, seed: int):
    if cfg.dataset.is_sequence:
        return init_token_params(seed, data.vocab_size, model_cfg.context_window,
                                 model_cfg.hidden, model_cfg.activation)
    dims = [data.features.shape[1], *model_cfg.hidden, data.class_count]
    return init_params(seed, dims, model_cfg.activation)


def _inputs(data):
    return data.sequences if hasattr(data, "sequences") else data.features


def _targets(data):
    return data.sequences if hasattr(data, "sequences") else data.labels


def _opt(stage) -> OptimizerConfig:
    return OptimizerConfig(stage.lr, stage.momentum, stage.batch_size)


# ----------------------------------------------------------------- workspace


def run_name(alpha: float | None, seed: int) -> str:
    return f"baseline_seed{seed}" if alpha is None else f"a{alpha!r}_seed{seed}"


def _out(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output_dir)


def _rel(cfg, path: Path) -> str:
    return path.relative_to(_out(cfg)).as_posix()


def _pretrain_key(cfg: ExperimentConfig) -> str:
    """Hash of the settings that determine pretrained checkpoints."""
    d = cfg.to_dict()
    keep = ("dataset", "small_model", "large_model", "large_model_mode", "pretrain",
            "large_pretrain", "master_seed")
    blob = json.dumps({k: d[k] for k in keep}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def _update_manifest(cfg: ExperimentConfig, stage: str, paths: list[str], seconds: float) -> dict:
    out = _out(cfg)
    missing = [p for p in paths if not (out / p).exists()]
    if missing:
        raise DependencyError(f"stage {stage} finished but artifacts are missing: {missing[:3]}")
    mpath = out / MANIFEST_FILE
    manifest = json.loads(mpath.read_text()) if mpath.exists() else {}
    manifest.update({"config_hash": config_hash(cfg), "toolkit_version": __version__})
    manifest.setdefault("stages", {})[stage] = {"paths": sorted(paths), "seconds": round(seconds, 3)}
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _map(fn, jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(fn, *zip(*jobs)))


# ------------------------------------------------------------------ pretrain


def _pretrain_cell(cfg: ExperimentConfig, seed: int) -> list[str]:
    task = load_task(cfg)
    params = _new_model(cfg, cfg.small_model, task.train, derive_seed(cfg.master_seed, "init", None, seed))
    params, history = pretrain(params, task.train, _opt(cfg.pretrain), cfg.pretrain.epochs,
                               derive_seed(cfg.master_seed, "pretrain", None, seed))
    out = _out(cfg)
    ckpt = save_checkpoint(params, out / "checkpoints" / f"small_seed{seed}.json")
    stats = out / "stats" / f"pretrain_seed{seed}.csv"
    stats_csv(history, stats)
    return [_rel(cfg, ckpt), _rel(cfg, stats)]


def cmd_pretrain(cfg: ExperimentConfig) -> dict:
    """Cross-entropy training of one small model per seed, and of the large model if trained."""
    t0 = time.perf_counter()
    out = _out(cfg)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "stats").mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))
    task = load_task(cfg)
    paths = ["config.yaml"]
    for cell in _map(_pretrain_cell, [(cfg, s) for s in cfg.seeds], cfg.workers):
        paths += cell

    if cfg.large_model_mode == "trained_mlp":
        large = _new_model(cfg, cfg.large_model, task.train, derive_seed(cfg.master_seed, "large", None, 0))
        large, history = pretrain(large, task.train, _opt(cfg.large_pretrain), cfg.large_pretrain.epochs,
                                  derive_seed(cfg.master_seed, "large", None, 1))
        ckpt = save_checkpoint(large, out / "checkpoints" / "large.json")
        stats_csv(history, out / "stats" / "pretrain_large.csv")
        paths += [_rel(cfg, ckpt), "stats/pretrain_large.csv"]
    else:
        tag = out / "checkpoints" / "large_model.json"
        tag.write_text(json.dumps({"mode": "bayes_oracle", "dataset": cfg.to_dict()["dataset"]},
                                  indent=2, sort_keys=True) + "\n")
        paths.append(_rel(cfg, tag))

    baseline = {
        "pretrain_key": _pretrain_key(cfg),
        "checkpoints": {str(s): f"checkpoints/small_seed{s}.json" for s in cfg.seeds},
    }
    (out / BASELINE_FILE).write_text(json.dumps(baseline, indent=2, sort_keys=True) + "\n")
    paths.append(BASELINE_FILE)
    return _update_manifest(cfg, "pretrain", paths, time.perf_counter() - t0)


def _baseline_checkpoints(cfg: ExperimentConfig) -> dict[int, Path]:
    out = _out(cfg)
    ref = out / BASELINE_FILE
    if not ref.exists():
        raise DependencyError(f"{ref} not found; run the pretrain stage first")
    info = json.loads(ref.read_text())
    if info.get("pretrain_key") != _pretrain_key(cfg):
        raise DependencyError("pretrained checkpoints come from different data/model settings; rerun pretrain")
    ckpts = {}
    for s in cfg.seeds:
        rel = info["checkpoints"].get(str(s))
        if rel is None or not (out / rel).exists():
            raise DependencyError(f"no pretrained checkpoint for seed {s}; rerun pretrain")
        ckpts[s] = out / rel
    return ckpts


# ------------------------------------------------------------------ finetune


def _finetune_cell(cfg: ExperimentConfig, alpha: float, seed: int, baseline_ckpt: Path) -> list[str]:
    task = load_task(cfg)
    params = load_checkpoint(baseline_ckpt)
    gk = GatekeeperConfig(alpha, cfg.token_normalization)
    params, history = finetune(params, task.train, gk, _opt(cfg.finetune), cfg.finetune.epochs,
                               derive_seed(cfg.master_seed, "finetune", alpha, seed))
    out = _out(cfg)
    name = run_name(alpha, seed)
    ckpt = save_checkpoint(params, out / "checkpoints" / f"{name}.json")
    stats = out / "stats" / f"finetune_{name}.csv"
    stats_csv(history, stats)
    return [_rel(cfg, ckpt), _rel(cfg, stats)]


def cmd_finetune(cfg: ExperimentConfig) -> dict:
    """Gatekeeper fine-tuning of every (alpha, seed) cell from that seed's pretrained model."""
    t0 = time.perf_counter()
    ckpts = _baseline_checkpoints(cfg)
    jobs = [(cfg, a, s, ckpts[s]) for a in cfg.alphas for s in cfg.seeds]
    paths = [BASELINE_FILE]
    for cell in _map(_finetune_cell, jobs, cfg.workers):
        paths += cell
    return _update_manifest(cfg, "finetune", paths, time.perf_counter() - t0)


# ------------------------------------------------------------------ evaluate


@functools.lru_cache(maxsize=4)
def _large_predictions(cfg: ExperimentConfig) -> np.ndarray:
    task = load_task(cfg)
    ev = task.eval
    if cfg.large_model_mode == "bayes_oracle":
        if cfg.dataset.is_sequence:
            return rule_predictions(cfg.dataset.rule, ev.sequences, ev.vocab_size)
        return BayesBlobClassifier(task.blob_spec).predict(ev.features)
    path = _out(cfg) / "checkpoints" / "large.json"
    if not path.exists():
        raise DependencyError(f"{path} not found; run the pretrain stage first")
    return np.argmax(predict_proba(load_checkpoint(path), _inputs(ev)), axis=-1)


def _evaluate_cell(cfg: ExperimentConfig, alpha: float | None, seed: int, ckpt: Path,
                   oracle_signal: bool) -> tuple[dict, str, list[str]]:
    task = load_task(cfg)
    ev = task.eval
    if len(ev) == 0:
        raise DataError("evaluation split is empty")
    probs = predict_proba(load_checkpoint(ckpt), _inputs(ev))
    lengths = None
    if cfg.dataset.is_sequence and cfg.dataset.eos_token is not None:
        lengths = sequence_lengths(ev.sequences, cfg.dataset.eos_token)
    records = build_records(probs, _large_predictions(cfg), _targets(ev), GatingFunction(cfg.gating),
                            lengths=lengths)
    if oracle_signal:
        # a signal that ranks every small-model mistake below every success
        records = records.with_signal(records.s_value)
    name = run_name(alpha, seed)
    rec_path = _out(cfg) / "records" / f"{name}.csv"
    write_records_csv(records, rec_path)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", DominanceWarning)
        result = sweep(records, cfg.kde)
    messages = [str(w.message) for w in caught if issubclass(w.category, DominanceWarning)]
    row = result.report.row(cfg.name, "baseline" if alpha is None else repr(alpha), seed, cfg.gating)
    return row, _rel(cfg, rec_path), messages


def cmd_evaluate(cfg: ExperimentConfig, oracle_signal: bool = False) -> dict:
    """Cascade records and one metrics row per run, baseline rows included."""
    t0 = time.perf_counter()
    out = _out(cfg)
    ckpts = _baseline_checkpoints(cfg)
    jobs = []
    for s in cfg.seeds:
        jobs.append((cfg, None, s, ckpts[s], oracle_signal))
        for a in cfg.alphas:
            path = out / "checkpoints" / f"{run_name(a, s)}.json"
            if not path.exists():
                raise DependencyError(f"{path} not found; run the finetune stage first")
            jobs.append((cfg, a, s, path, oracle_signal))
    (out / "records").mkdir(parents=True, exist_ok=True)
    rows, paths = [], []
    for row, rec, messages in _map(_evaluate_cell, jobs, cfg.workers):
        rows.append(row)
        paths.append(rec)
        for m in messages:
            warnings.warn(f"{rec}: {m}", DominanceWarning, stacklevel=2)
    write_metrics_csv(rows, out / METRICS_FILE)
    paths.append(METRICS_FILE)
    return _update_manifest(cfg, "evaluate", paths, time.perf_counter() - t0)


# -------------------------------------------------------------------- report


def cmd_report(cfg: ExperimentConfig) -> dict:
    t0 = time.perf_counter()
    out = _out(cfg)
    metrics_path = out / METRICS_FILE
    if not metrics_path.exists():
        raise DependencyError(f"{metrics_path} not found; run the evaluate stage first")
    written = report_mod.write_report(metrics_path, out, records_dir=out / "records")
    return _update_manifest(cfg, "report", [_rel(cfg, p) for p in written], time.perf_counter() - t0)


def run_all(cfg: ExperimentConfig, oracle_signal: bool = False) -> dict:
    cmd_pretrain(cfg)
    cmd_finetune(cfg)
    cmd_evaluate(cfg, oracle_signal)
    return cmd_report(cfg)
