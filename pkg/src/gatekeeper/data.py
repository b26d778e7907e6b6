"""Synthetic generators, file loaders, splits and deterministic batching.

Every generator is a pure function of ``(spec, seed)``.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, DataError, ParseError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass
class TabularDataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise DataError(
                f"features {self.features.shape} and labels {self.labels.shape} are misaligned"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, idx) -> "TabularDataset":
        return TabularDataset(self.features[idx], self.labels[idx], self.class_count)


@dataclass
class SequenceDataset:
    sequences: np.ndarray  # (N, T) int
    vocab_size: int
    ambiguous: np.ndarray | None = None  # (N, T) bool, diagnostics only

    def __post_init__(self):
        self.sequences = np.asarray(self.sequences, dtype=np.int64)
        if self.sequences.ndim != 2:
            raise DataError(f"sequences must be (N, T), got {self.sequences.shape}")
        if self.sequences.size and (self.sequences.min() < 0 or self.sequences.max() >= self.vocab_size):
            raise DataError(f"tokens must lie in [0, {self.vocab_size})")

    def __len__(self):
        return self.sequences.shape[0]

    def subset(self, idx) -> "SequenceDataset":
        amb = None if self.ambiguous is None else self.ambiguous[idx]
        return SequenceDataset(self.sequences[idx], self.vocab_size, amb)


# ---------------------------------------------------------------------- blobs


@dataclass
class SyntheticBlobSpec:
    class_count: int
    dims: int
    means: np.ndarray  # (C, D)
    std: float
    label_flip_rate: float
    sample_count: int

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        if self.class_count < 2 or self.dims < 1 or self.sample_count < 1:
            raise ConfigError("blob spec needs >= 2 classes, >= 1 dim and >= 1 sample")
        if self.means.shape != (self.class_count, self.dims):
            raise ConfigError(f"means must be ({self.class_count}, {self.dims}), got {self.means.shape}")
        if not self.std > 0:
            raise ConfigError("std must be positive")
        if not 0.0 <= self.label_flip_rate < 0.5:
            raise ConfigError("label_flip_rate must lie in [0, 0.5)")
        if len({tuple(m) for m in self.means.tolist()}) != self.class_count:
            raise ConfigError("class means must be distinct")


def ring_means(class_count: int, dims: int, radius: float) -> np.ndarray:
    """Class means evenly spaced on a circle in the first two coordinates."""
    if dims < 2:
        return np.arange(class_count, dtype=np.float64)[:, None] * radius * np.ones((1, dims))
    angles = 2 * np.pi * np.arange(class_count) / class_count
    means = np.zeros((class_count, dims))
    means[:, 0] = radius * np.cos(angles)
    means[:, 1] = radius * np.sin(angles)
    return means


def gen_blobs(spec: SyntheticBlobSpec, seed) -> TabularDataset:
    """Isotropic Gaussian classes with independent label flips to a random other class."""
    rng = np.random.default_rng(seed)
    C, n = spec.class_count, spec.sample_count
    clean = rng.integers(0, C, size=n)
    X = spec.means[clean] + spec.std * rng.standard_normal((n, spec.dims))
    flip = rng.random(n) < spec.label_flip_rate
    shift = rng.integers(1, C, size=n)  # uniform over the other C-1 classes
    labels = np.where(flip, (clean + shift) % C, clean)
    return TabularDataset(X, labels, C)


def blob_posterior(spec: SyntheticBlobSpec, features, noisy: bool = True) -> np.ndarray:
    """Closed-form class posterior (equal priors), optionally under the label-flip channel."""
    X = np.asarray(features, dtype=np.float64)
    d2 = ((X[:, None, :] - spec.means[None, :, :]) ** 2).sum(axis=-1)
    logits = -d2 / (2.0 * spec.std ** 2)
    clean = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
    if not noisy:
        return clean
    f, C = spec.label_flip_rate, spec.class_count
    return (1.0 - f) * clean + f * (1.0 - clean) / (C - 1)


@dataclass
class BayesBlobClassifier:
    """Bayes-optimal classifier for a blob spec; stands in for the large model."""

    spec: SyntheticBlobSpec

    def predict_proba(self, features) -> np.ndarray:
        return blob_posterior(self.spec, features, noisy=True)

    def predict(self, features) -> np.ndarray:
        # flips keep the argmax for rate < (C-1)/C, so the clean posterior suffices
        return np.argmax(blob_posterior(self.spec, features, noisy=False), axis=1)


# ------------------------------------------------------------------ sequences

SEQUENCE_RULES = ("copy_with_noise", "parity")


@dataclass
class SequenceTaskSpec:
    """Token task with a deterministic next-token rule and random positions.

    Whether a position is random follows a two-state chain whose stationary
    probability is ``ambiguous_fraction``; ``noise_persistence`` in [0, 1)
    sets how strongly random positions cluster (0 = independent).
    """

    vocab_size: int
    length: int
    rule: str = "copy_with_noise"
    ambiguous_fraction: float = 0.0
    noise_persistence: float = 0.0
    sample_count: int = 1000

    def __post_init__(self):
        if self.vocab_size < 2 or self.length < 1 or self.sample_count < 1:
            raise ConfigError("sequence task needs vocab >= 2, length >= 1, sample_count >= 1")
        if self.rule not in SEQUENCE_RULES:
            raise ConfigError(f"rule must be one of {SEQUENCE_RULES}")
        if not 0.0 <= self.ambiguous_fraction < 1.0:
            raise ConfigError("ambiguous_fraction must lie in [0, 1)")
        if not 0.0 <= self.noise_persistence < 1.0:
            raise ConfigError("noise_persistence must lie in [0, 1)")


def rule_next_token(rule: str, prev1, prev2, vocab_size: int):
    """Determined continuation given the previous two tokens (BOS counts as 0)."""
    if rule == "copy_with_noise":
        return prev1
    return (prev1 + prev2) % vocab_size


def gen_sequences(spec: SequenceTaskSpec, seed) -> SequenceDataset:
    rng = np.random.default_rng(seed)
    N, T, C = spec.sample_count, spec.length, spec.vocab_size
    a, rho = spec.ambiguous_fraction, spec.noise_persistence
    stay_noisy = a + rho * (1.0 - a)
    enter_noisy = a * (1.0 - rho)

    u_state = rng.random((N, T))
    random_tokens = rng.integers(0, C, size=(N, T))
    amb = np.zeros((N, T), dtype=bool)
    amb[:, 0] = u_state[:, 0] < a
    for t in range(1, T):
        p = np.where(amb[:, t - 1], stay_noisy, enter_noisy)
        amb[:, t] = u_state[:, t] < p

    seqs = np.zeros((N, T), dtype=np.int64)
    prev1 = np.zeros(N, dtype=np.int64)
    prev2 = np.zeros(N, dtype=np.int64)
    for t in range(T):
        det = rule_next_token(spec.rule, prev1, prev2, C)
        seqs[:, t] = np.where(amb[:, t], random_tokens[:, t], det)
        prev2, prev1 = prev1, seqs[:, t]
    return SequenceDataset(seqs, C, amb)


def rule_predictions(spec_rule: str, sequences, vocab_size: int) -> np.ndarray:
    """Teacher-forced rule continuation at every position: the oracle token predictor."""
    seqs = np.asarray(sequences, dtype=np.int64)
    prev1 = np.zeros_like(seqs)
    prev2 = np.zeros_like(seqs)
    prev1[:, 1:] = seqs[:, :-1]
    prev2[:, 2:] = seqs[:, :-2]
    return rule_next_token(spec_rule, prev1, prev2, vocab_size)


# -------------------------------------------------------------------- loaders


def _read_be_u32(buf: bytes, offset: int, path) -> int:
    if offset + 4 > len(buf):
        raise ParseError(f"{path}: truncated header at byte offset {offset}")
    return struct.unpack_from(">I", buf, offset)[0]


def _parse_idx(path, expected_magic: int, ndim: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    magic = _read_be_u32(buf, 0, path)
    if magic != expected_magic:
        raise ParseError(f"{path}: bad magic 0x{magic:08x} at byte offset 0, expected 0x{expected_magic:08x}")
    dims = [_read_be_u32(buf, 4 + 4 * i, path) for i in range(ndim)]
    start = 4 + 4 * ndim
    need = math.prod(dims)
    have = len(buf) - start
    if have < need:
        raise ParseError(
            f"{path}: truncated data section at byte offset {len(buf)}, "
            f"expected {need} bytes starting at offset {start}"
        )
    if have > need:
        raise ParseError(f"{path}: {have - need} trailing bytes after offset {start + need}")
    return np.frombuffer(buf, dtype=np.uint8, offset=start, count=need).reshape(dims)


def load_idx(images_path, labels_path, class_count: int | None = None) -> TabularDataset:
    """MNIST-style IDX pair: big-endian u32 magic and sizes, then raw unsigned bytes.

    Pixels are scaled to [0, 1] and each image is flattened row-major.
    """
    images = _parse_idx(images_path, IDX_IMAGE_MAGIC, 3)
    labels = _parse_idx(labels_path, IDX_LABEL_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise ParseError(
            f"{images_path}: {images.shape[0]} images but {labels_path} has {labels.shape[0]} labels "
            "(count field at byte offset 4)"
        )
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    C = class_count if class_count is not None else max(int(labels.max(initial=0)) + 1, 2)
    return TabularDataset(features, labels, C)


def write_idx(images, labels, images_path, labels_path) -> None:
    """Inverse of :func:`load_idx` for uint8 arrays; used to build fixtures."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    Path(images_path).write_bytes(
        struct.pack(">IIII", IDX_IMAGE_MAGIC, *images.shape) + images.tobytes()
    )
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABEL_MAGIC, labels.shape[0]) + labels.tobytes())


def load_csv(path, label_column: str, class_count: int | None = None) -> TabularDataset:
    """Numeric CSV with a header row; ``label_column`` holds integer class ids."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        if label_column not in header:
            raise ParseError(f"{path}: no column named {label_column!r} in header")
        li = header.index(label_column)
        feats, labels = [], []
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}: row {row_no} has {len(row)} cells, header has {len(header)}")
            values = []
            for col, cell in enumerate(row):
                try:
                    values.append(float(cell))
                except ValueError:
                    raise ParseError(
                        f"{path}: non-numeric cell {cell!r} at row {row_no}, column {header[col]!r}"
                    ) from None
            label = values.pop(li)
            if label != int(label):
                raise ParseError(f"{path}: label {label} at row {row_no} is not an integer")
            feats.append(values)
            labels.append(int(label))
    if not labels:
        raise DataError(f"{path}: no data rows")
    labels = np.asarray(labels, dtype=np.int64)
    C = class_count if class_count is not None else max(int(labels.max()) + 1, 2)
    return TabularDataset(np.asarray(feats, dtype=np.float64), labels, C)


# ----------------------------------------------------------- splits & batches


def _largest_remainder(n: int, fractions) -> list[int]:
    raw = [f * n for f in fractions]
    sizes = [int(math.floor(r)) for r in raw]
    short = n - sum(sizes)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[:short]:
        sizes[i] += 1
    return sizes


def split(dataset, fractions=(0.8, 0.1, 0.1), seed=0):
    """Seeded shuffle then contiguous train/validation/test slices."""
    fractions = [float(f) for f in fractions]
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    sizes = _largest_remainder(n, fractions)
    bounds = np.cumsum([0, *sizes])
    return tuple(dataset.subset(perm[bounds[i]:bounds[i + 1]]) for i in range(3))


def batches(n_or_dataset, batch_size: int, epoch: int, seed) -> list[np.ndarray]:
    """Index batches for one epoch; order is reshuffled from ``(seed, epoch)``, last short batch kept."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    n = n_or_dataset if isinstance(n_or_dataset, (int, np.integer)) else len(n_or_dataset)
    rng = np.random.default_rng(np.random.SeedSequence([_seed_int(seed), int(epoch)]))
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _seed_int(seed) -> int:
    if isinstance(seed, np.random.SeedSequence):
        return int(seed.generate_state(1)[0])
    return int(seed)
