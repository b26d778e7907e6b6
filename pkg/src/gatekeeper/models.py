"""Small trainable predictors with hand-written backpropagation.

``MlpParams`` is a plain multilayer perceptron that serves as both the small
and the large classifier (at different widths). ``TokenModelParams`` wraps an
MLP into a fixed-window next-token model: position t sees one-hot codes of
the k ground-truth tokens before it and emits logits over the vocabulary.

Weights are stored as (fan_in, fan_out) so a layer is ``h @ W + b``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, NumericDomainError, ParseError, ShapeError

ACTIVATIONS = ("relu", "tanh")
CHECKPOINT_FORMAT = "gatekeeper-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class MlpParams:
    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ShapeError("need one weight matrix and bias vector per layer")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            expect = (self.layer_dims[i], self.layer_dims[i + 1])
            if W.shape != expect or b.shape != (expect[1],):
                raise ShapeError(f"layer {i}: weight {W.shape}, bias {b.shape}, expected {expect}")

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    def arrays(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def with_arrays(self, arrays: list[np.ndarray]) -> "MlpParams":
        n = len(self.weights)
        return MlpParams(self.layer_dims, list(arrays[:n]), list(arrays[n:]), self.activation)

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unflatten(self, vector) -> "MlpParams":
        vector = np.asarray(vector, dtype=np.float64).ravel()
        expected = sum(a.size for a in self.arrays())
        if vector.size != expected:
            raise ShapeError(f"expected {expected} parameters, got {vector.size}")
        out, pos = [], 0
        for a in self.arrays():
            out.append(vector[pos:pos + a.size].reshape(a.shape).copy())
            pos += a.size
        return self.with_arrays(out)

    def zeros_like(self) -> "MlpParams":
        return self.with_arrays([np.zeros_like(a) for a in self.arrays()])


@dataclass
class ForwardTrace:
    inputs: np.ndarray
    pre_activations: list[np.ndarray]
    activations: list[np.ndarray]  # activations[0] is the input batch
    logits: np.ndarray


def init_params(seed, layer_dims, activation: str = "relu") -> MlpParams:
    """Weights ~ U[-1/sqrt(fan_in), 1/sqrt(fan_in)], zero biases."""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ConfigError(f"layer_dims needs at least two positive entries, got {layer_dims!r}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(tuple(dims), weights, biases, activation)


def _act(name, z):
    return np.maximum(z, 0.0) if name == "relu" else np.tanh(z)


def _act_grad(name, z, a):
    return (z > 0).astype(np.float64) if name == "relu" else 1.0 - a * a


def forward(params: MlpParams, batch) -> ForwardTrace:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ShapeError(f"batch shape {x.shape} does not match input dim {params.input_dim}")
    pre, acts = [], [x]
    h = x
    last = len(params.weights) - 1
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ W + b
        pre.append(z)
        h = z if i == last else _act(params.activation, z)
        acts.append(h)
    return ForwardTrace(x, pre, acts, h)


def backward(params: MlpParams, trace: ForwardTrace, dL_dlogits) -> MlpParams:
    """Parameter gradients of the scalar loss whose logit gradient is ``dL_dlogits``."""
    g = np.asarray(dL_dlogits, dtype=np.float64)
    if g.shape != trace.logits.shape:
        raise ShapeError(f"logit gradient {g.shape} does not match logits {trace.logits.shape}")
    n_layers = len(params.weights)
    dW = [None] * n_layers
    db = [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        dW[i] = trace.activations[i].T @ g
        db[i] = g.sum(axis=0)
        if i > 0:
            g = (g @ params.weights[i].T) * _act_grad(
                params.activation, trace.pre_activations[i - 1], trace.activations[i]
            )
    return MlpParams(params.layer_dims, dW, db, params.activation)


def sgd_step(params, grads, lr: float, momentum: float = 0.0, velocity=None):
    """One heavy-ball step: ``v <- momentum*v + g``, ``theta <- theta - lr*v``.

    Works on anything exposing ``arrays()``/``with_arrays()`` (both model
    kinds). ``velocity`` is a list of arrays or None for a fresh start.
    Returns ``(new_params, new_velocity)``.
    """
    if not lr > 0:
        raise ConfigError("learning rate must be positive")
    if not 0.0 <= momentum < 1.0:
        raise ConfigError("momentum must be in [0, 1)")
    g_arrays = grads.arrays()
    for g in g_arrays:
        if not np.all(np.isfinite(g)):
            raise NumericDomainError("non-finite gradient")
    if velocity is None:
        velocity = [np.zeros_like(g) for g in g_arrays]
    new_v = [momentum * v + g for v, g in zip(velocity, g_arrays)]
    new_p = [p - lr * v for p, v in zip(params.arrays(), new_v)]
    return params.with_arrays(new_p), new_v


def predict_argmax(logits) -> np.ndarray | int:
    """Argmax over the last axis; ties resolve to the lowest index."""
    z = np.asarray(logits)
    out = np.argmax(z, axis=-1)
    return int(out) if out.ndim == 0 else out


# --------------------------------------------------------------------- tokens


@dataclass
class TokenModelParams:
    vocab_size: int
    context_window: int
    mlp: MlpParams
    bos_token: int = -1  # outside [0, C): encoded as an all-zero slot

    def __post_init__(self):
        C, k = self.vocab_size, self.context_window
        if C < 2 or k < 1:
            raise ConfigError("token model needs vocab_size >= 2 and context_window >= 1")
        if self.mlp.input_dim != k * C or self.mlp.output_dim != C:
            raise ShapeError(
                f"inner MLP must map {k * C} inputs to {C} logits, has {self.mlp.layer_dims}"
            )

    def arrays(self):
        return self.mlp.arrays()

    def with_arrays(self, arrays):
        return TokenModelParams(self.vocab_size, self.context_window,
                                self.mlp.with_arrays(arrays), self.bos_token)

    def flatten(self):
        return self.mlp.flatten()

    def unflatten(self, vector):
        return TokenModelParams(self.vocab_size, self.context_window,
                                self.mlp.unflatten(vector), self.bos_token)


def init_token_params(seed, vocab_size: int, context_window: int = 4,
                      hidden=(32,), activation: str = "relu") -> TokenModelParams:
    dims = [context_window * vocab_size, *hidden, vocab_size]
    return TokenModelParams(vocab_size, context_window, init_params(seed, dims, activation))


def encode_contexts(sequences, vocab_size: int, context_window: int, bos_token: int = -1) -> np.ndarray:
    """One-hot teacher-forced contexts, shape (N*T, k*C).

    Row ``i*T + t`` holds the tokens at positions t-k .. t-1 of sequence i
    (slot j = position t-k+j), BOS-padded on the left.
    """
    seqs = np.asarray(sequences)
    if seqs.ndim == 1:
        seqs = seqs[None, :]
    if seqs.ndim != 2 or seqs.shape[1] < 1:
        raise ShapeError(f"sequences must be (N, T) with T >= 1, got {seqs.shape}")
    if seqs.size and (seqs.min() < 0 or seqs.max() >= vocab_size):
        raise IndexError(f"token out of range [0, {vocab_size})")
    N, T = seqs.shape
    k, C = context_window, vocab_size
    padded = np.full((N, T + k), bos_token, dtype=np.int64)
    padded[:, k:] = seqs
    X = np.zeros((N, T, k, C))
    for j in range(k):
        tok = padded[:, j:j + T]  # token at position t-k+j
        valid = (tok >= 0) & (tok < C)
        n_idx, t_idx = np.nonzero(valid)
        X[n_idx, t_idx, j, tok[n_idx, t_idx]] = 1.0
    return X.reshape(N * T, k * C)


def token_forward(params: TokenModelParams, sequences):
    """Teacher-forced per-position logits.

    A single (T,) sequence yields (T, C) logits; an (N, T) batch yields
    (N, T, C). The second return value is the inner MLP trace for
    :func:`token_backward`.
    """
    seqs = np.asarray(sequences)
    single = seqs.ndim == 1
    X = encode_contexts(seqs, params.vocab_size, params.context_window, params.bos_token)
    trace = forward(params.mlp, X)
    N = 1 if single else seqs.shape[0]
    logits = trace.logits.reshape(N, -1, params.vocab_size)
    return (logits[0] if single else logits), trace


def token_backward(params: TokenModelParams, trace: ForwardTrace, dL_dlogits) -> TokenModelParams:
    g = np.asarray(dL_dlogits, dtype=np.float64).reshape(-1, params.vocab_size)
    return params.with_arrays(backward(params.mlp, trace, g).arrays())


# ----------------------------------------------------------------- checkpoints


def _mlp_payload(p: MlpParams) -> dict:
    return {
        "layer_dims": list(p.layer_dims),
        "activation": p.activation,
        "weights": [W.ravel().tolist() for W in p.weights],
        "biases": [b.tolist() for b in p.biases],
    }


def _mlp_from_payload(d: dict) -> MlpParams:
    dims = [int(x) for x in d["layer_dims"]]
    weights = [np.asarray(w, dtype=np.float64).reshape(a, b)
               for w, a, b in zip(d["weights"], dims[:-1], dims[1:])]
    biases = [np.asarray(b, dtype=np.float64) for b in d["biases"]]
    return MlpParams(tuple(dims), weights, biases, d["activation"])


def checkpoint_payload(params) -> dict:
    if isinstance(params, TokenModelParams):
        body = {"kind": "token", "vocab_size": params.vocab_size,
                "context_window": params.context_window, "bos_token": params.bos_token,
                "mlp": _mlp_payload(params.mlp)}
    elif isinstance(params, MlpParams):
        body = {"kind": "mlp", "mlp": _mlp_payload(params)}
    else:
        raise TypeError(f"cannot checkpoint {type(params).__name__}")
    return {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, **body}


def params_from_payload(d: dict):
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ParseError("not a gatekeeper checkpoint")
    if d.get("version") != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {d.get('version')!r}")
    if d["kind"] == "mlp":
        return _mlp_from_payload(d["mlp"])
    if d["kind"] == "token":
        return TokenModelParams(int(d["vocab_size"]), int(d["context_window"]),
                                _mlp_from_payload(d["mlp"]), int(d["bos_token"]))
    raise ParseError(f"unknown checkpoint kind {d['kind']!r}")


def save_checkpoint(params, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(checkpoint_payload(params), sort_keys=True) + "\n")
    return path


def load_checkpoint(path):
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON at char {exc.pos}") from exc
    return params_from_payload(payload)
