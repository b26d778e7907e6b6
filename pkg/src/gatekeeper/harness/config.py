"""Experiment configuration: YAML document, validation, hashing and seed derivation.

The config file is a YAML mapping. Every key is optional and falls back to
the defaults below; unknown keys are rejected so typos do not silently turn
into defaults. See README.md for the full grammar.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from ..errors import ConfigError, ParseError
from ..gating import GATING_KINDS
from ..loss import TOKEN_NORMALIZATIONS
from ..metrics import KdeConfig

DEFAULT_ALPHAS = (0.9, 0.7, 0.5, 0.3, 0.1, 0.05)
DEFAULT_SEEDS = (0, 1, 2, 3, 4)
DATASET_KINDS = ("blobs", "sequences", "csv", "idx")
LARGE_MODEL_MODES = ("bayes_oracle", "trained_mlp")
STAGES = ("data", "init", "pretrain", "large", "finetune")


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "blobs"
    # blobs
    class_count: int = 4
    dims: int = 2
    radius: float = 4.5
    std: float = 1.0
    flip_rate: float = 0.15
    # sequences
    vocab_size: int = 8
    length: int = 16
    rule: str = "copy_with_noise"
    ambiguous_fraction: float = 0.25
    noise_persistence: float = 0.0
    eos_token: int | None = None
    # synthetic sizes
    n_train: int = 8000
    n_eval: int = 2000
    # files
    path: str | None = None
    label_column: str = "label"
    labels_path: str | None = None
    eval_fraction: float = 0.2

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"dataset.kind must be one of {DATASET_KINDS}, got {self.kind!r}")
        if self.kind in ("blobs", "sequences") and (self.n_train < 1 or self.n_eval < 1):
            raise ConfigError("dataset.n_train and dataset.n_eval must be >= 1")
        if self.kind in ("csv", "idx"):
            if not self.path:
                raise ConfigError(f"dataset.path is required for kind {self.kind!r}")
            if self.kind == "idx" and not self.labels_path:
                raise ConfigError("dataset.labels_path is required for kind 'idx'")
            if not 0.0 < self.eval_fraction < 1.0:
                raise ConfigError("dataset.eval_fraction must lie in (0, 1)")

    @property
    def is_sequence(self) -> bool:
        return self.kind == "sequences"


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple[int, ...] = (8,)
    activation: str = "relu"
    context_window: int = 4  # token models only

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if any(h < 1 for h in self.hidden):
            raise ConfigError("hidden layer widths must be >= 1")
        if self.activation not in ("relu", "tanh"):
            raise ConfigError("activation must be relu or tanh")
        if self.context_window < 1:
            raise ConfigError("context_window must be >= 1")


@dataclass(frozen=True)
class StageConfig:
    epochs: int = 20
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "blobs"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    small_model: ModelConfig = field(default_factory=ModelConfig)
    large_model: ModelConfig = field(default_factory=lambda: ModelConfig(hidden=(32, 32)))
    large_model_mode: str = "bayes_oracle"
    pretrain: StageConfig = field(default_factory=lambda: StageConfig(epochs=40))
    large_pretrain: StageConfig = field(default_factory=StageConfig)
    finetune: StageConfig = field(default_factory=lambda: StageConfig(epochs=5, lr=0.005))
    token_normalization: str = "per_batch"
    alphas: tuple[float, ...] = DEFAULT_ALPHAS
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    master_seed: int = 0
    gating: str = "max_softmax"
    kde: KdeConfig = field(default_factory=KdeConfig)
    output_dir: str = "runs/blobs"
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.alphas:
            raise ConfigError("alphas must be non-empty")
        for a in self.alphas:
            if not (0.0 < a < 1.0) or not math.isfinite(a):
                raise ConfigError(f"every alpha must lie strictly inside (0, 1), got {a}")
        if len(set(self.alphas)) != len(self.alphas):
            raise ConfigError("alphas must be distinct")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds) or min(self.seeds) < 0:
            raise ConfigError("seeds must be distinct non-negative integers")
        if self.large_model_mode not in LARGE_MODEL_MODES:
            raise ConfigError(f"large_model_mode must be one of {LARGE_MODEL_MODES}")
        if self.large_model_mode == "bayes_oracle" and self.dataset.kind not in ("blobs", "sequences"):
            raise ConfigError("bayes_oracle needs a synthetic dataset (blobs or sequences)")
        if self.gating not in GATING_KINDS:
            raise ConfigError(f"gating must be one of {GATING_KINDS}")
        if self.dataset.is_sequence and self.gating == "max_softmax":
            raise ConfigError("sequence datasets need gating neg_pred_entropy")
        if self.token_normalization not in TOKEN_NORMALIZATIONS:
            raise ConfigError(f"token_normalization must be one of {TOKEN_NORMALIZATIONS}")
        if self.master_seed < 0:
            raise ConfigError("master_seed must be >= 0")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if not self.name or "/" in self.name:
            raise ConfigError("name must be a non-empty string without '/'")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


_NESTED = {
    "dataset": DatasetConfig,
    "small_model": ModelConfig,
    "large_model": ModelConfig,
    "pretrain": StageConfig,
    "large_pretrain": StageConfig,
    "finetune": StageConfig,
    "kde": KdeConfig,
}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{where} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(raw: dict | None) -> ExperimentConfig:
    raw = dict(raw or {})
    kwargs = {}
    for key, value in raw.items():
        if key in _NESTED:
            kwargs[key] = _build(_NESTED[key], value, key)
        else:
            kwargs[key] = value
    return _build(ExperimentConfig, kwargs, "config")


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}" if mark is not None else ""
        raise ParseError(f"{path}: invalid YAML{where}") from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(raw)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True, default_flow_style=None)


def config_hash(cfg: ExperimentConfig) -> str:
    """SHA-256 over the canonical JSON form; ``output_dir`` and ``workers`` do not affect results."""
    d = cfg.to_dict()
    d.pop("output_dir")
    d.pop("workers")
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def alpha_key(alpha: float | None) -> int:
    """Integer key of an alpha value; the baseline (no fine-tuning) is 0."""
    return 0 if alpha is None else int(round(alpha * 1_000_000))


def derive_seed(master_seed: int, stage: str, alpha: float | None = None, seed: int = 0) -> int:
    """Independent 64-bit seed for one (stage, alpha, seed) cell.

    Keyed by values rather than list positions, so reordering or extending
    the alpha/seed lists leaves existing cells unchanged.
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    ss = np.random.SeedSequence([int(master_seed), STAGES.index(stage), alpha_key(alpha), int(seed)])
    lo, hi = ss.generate_state(2)
    return int(lo) | (int(hi) << 32)
