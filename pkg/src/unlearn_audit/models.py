"""Tiny trainable models with flat parameter vectors and membership signals.

Three architectures are supported: a linear softmax classifier, a
one-hidden-layer MLP, and a small next-token language model (embedding,
mean-pooled context window, linear head). Parameters live in a single flat
float64 vector whose layout is fully determined by the ModelSpec, which keeps
training, unlearning and serialization trivially deterministic.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ._rng import rng_for

KINDS = ("linear", "mlp", "token-lm")
ACTIVATIONS = ("relu", "tanh")
PARAM_TAGS = ("initial", "retrained", "unlearned", "shadow")

# probability clamp applied before logit scaling; keeps ratio signals finite
PROB_CLAMP = 1e-6


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; parameter layout is derivable from it alone.

    For ``token-lm``, ``input_dim`` is the context-window length,
    ``hidden_dim`` the embedding width and ``num_outputs`` the vocabulary.
    """

    kind: str
    input_dim: int
    hidden_dim: int
    num_outputs: int
    activation: str = "relu"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.num_outputs < 2:
            raise ValueError("num_outputs must be at least 2")
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if (self.hidden_dim == 0) != (self.kind == "linear"):
            raise ValueError("hidden_dim must be 0 exactly for linear models")


@dataclass(frozen=True)
class LayoutEntry:
    name: str
    shape: tuple[int, ...]
    is_bias: bool
    fan_in: int
    start: int
    end: int


def layout(spec: ModelSpec) -> tuple[LayoutEntry, ...]:
    """Flat-vector layout: ordered (tensor, span) entries for the spec."""
    d, h, k = spec.input_dim, spec.hidden_dim, spec.num_outputs
    if spec.kind == "linear":
        raw = [("w", (d, k), False, d), ("b", (k,), True, d)]
    elif spec.kind == "mlp":
        raw = [
            ("w1", (d, h), False, d),
            ("b1", (h,), True, d),
            ("w2", (h, k), False, h),
            ("b2", (k,), True, h),
        ]
    else:  # token-lm: embedding table, output head
        raw = [
            ("emb", (k, h), False, h),
            ("w", (h, k), False, h),
            ("b", (k,), True, h),
        ]
    entries = []
    offset = 0
    for name, shape, is_bias, fan_in in raw:
        size = int(np.prod(shape))
        entries.append(LayoutEntry(name, shape, is_bias, fan_in, offset, offset + size))
        offset += size
    return tuple(entries)


def param_count(spec: ModelSpec) -> int:
    return layout(spec)[-1].end


def param_views(values: np.ndarray, spec: ModelSpec) -> dict[str, np.ndarray]:
    """Reshaped views into the flat vector; writes through to ``values``."""
    return {e.name: values[e.start : e.end].reshape(e.shape) for e in layout(spec)}


def bias_mask(spec: ModelSpec) -> np.ndarray:
    """Boolean mask over the flat vector marking bias coordinates."""
    mask = np.zeros(param_count(spec), dtype=bool)
    for e in layout(spec):
        if e.is_bias:
            mask[e.start : e.end] = True
    return mask


@dataclass(frozen=True)
class ParamVector:
    """Flat model parameters plus a provenance tag."""

    values: np.ndarray
    tag: str = "initial"

    def __post_init__(self):
        if self.tag not in PARAM_TAGS:
            raise ValueError(f"unknown param tag {self.tag!r}")
        if self.values.ndim != 1 or self.values.dtype != np.float64:
            raise ValueError("param values must be a flat float64 vector")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("param values must be finite")

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.tag)

    def with_tag(self, tag: str) -> "ParamVector":
        return replace(self, tag=tag)


def init_params(spec: ModelSpec, seed: int) -> ParamVector:
    """Zero-mean uniform init, scale 1/sqrt(fan_in) per tensor."""
    rng = rng_for("init", spec, seed)
    values = np.empty(param_count(spec), dtype=np.float64)
    for e in layout(spec):
        scale = 1.0 / np.sqrt(e.fan_in)
        values[e.start : e.end] = rng.uniform(-scale, scale, e.end - e.start)
    return ParamVector(values, "initial")


_PROB_CEIL = np.nextafter(1.0, 0.0)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p = p / p.sum(axis=-1, keepdims=True)
    # keep every entry strictly inside (0, 1); the sum moves by < 1e-15
    return np.clip(p, 1e-300, _PROB_CEIL)


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    return np.maximum(z, 0.0) if activation == "relu" else np.tanh(z)


def forward(spec: ModelSpec, params: ParamVector, features: np.ndarray) -> np.ndarray:
    """Class probabilities for one feature vector or a (batch, dim) matrix."""
    if spec.kind == "token-lm":
        raise ValueError("forward() is for feature models; use forward_windows()")
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if x.shape[1] != spec.input_dim:
        raise ValueError(f"feature dim {x.shape[1]} != input_dim {spec.input_dim}")
    v = param_views(params.values, spec)
    if spec.kind == "linear":
        probs = _softmax(x @ v["w"] + v["b"])
    else:
        hidden = _activate(x @ v["w1"] + v["b1"], spec.activation)
        probs = _softmax(hidden @ v["w2"] + v["b2"])
    return probs[0] if np.ndim(features) == 1 else probs


def pool_windows(spec: ModelSpec, emb: np.ndarray, windows: np.ndarray) -> np.ndarray:
    """Mean-pool embeddings over context windows; -1 entries are padding."""
    valid = windows >= 0
    safe = np.where(valid, windows, 0)
    vecs = emb[safe] * valid[..., None]
    counts = np.maximum(valid.sum(axis=1, keepdims=True), 1)
    return vecs.sum(axis=1) / counts


def forward_windows(spec: ModelSpec, params: ParamVector, windows: np.ndarray) -> np.ndarray:
    """Next-token probabilities for a (batch, window) int array of contexts."""
    if spec.kind != "token-lm":
        raise ValueError("forward_windows() requires a token-lm spec")
    windows = np.atleast_2d(np.asarray(windows, dtype=np.int64))
    if windows.shape[1] != spec.input_dim:
        raise ValueError(f"window width {windows.shape[1]} != input_dim {spec.input_dim}")
    if windows.max() >= spec.num_outputs:
        raise ValueError("token id out of vocabulary")
    v = param_views(params.values, spec)
    pooled = pool_windows(spec, v["emb"], windows)
    return _softmax(pooled @ v["w"] + v["b"])


def context_windows(tokens: np.ndarray, positions: np.ndarray, window: int) -> np.ndarray:
    """Left-padded context windows (pad = -1) for the given token positions."""
    tokens = np.asarray(tokens, dtype=np.int64)
    out = np.full((len(positions), window), -1, dtype=np.int64)
    for row, pos in enumerate(positions):
        lo = max(0, pos - window)
        ctx = tokens[lo:pos]
        if len(ctx):
            out[row, window - len(ctx) :] = ctx
    return out


@dataclass(frozen=True)
class SignalValue:
    """One membership signal phi(model(z)); always finite."""

    value: float
    kind: str  # "logit-confidence" | "loss"


def phi_logit_confidence(probs: np.ndarray, true_label: int) -> SignalValue:
    """log(p/(1-p)) of the true-class probability, clamped away from {0,1}."""
    p = float(np.clip(probs[true_label], PROB_CLAMP, 1.0 - PROB_CLAMP))
    return SignalValue(float(np.log(p / (1.0 - p))), "logit-confidence")


def phi_loss(probs: np.ndarray, true_label: int) -> SignalValue:
    p = float(np.clip(probs[true_label], PROB_CLAMP, 1.0 - PROB_CLAMP))
    return SignalValue(float(-np.log(p)), "loss")


def sequence_span_logprobs(
    spec: ModelSpec, params: ParamVector, prefix: np.ndarray, target_ngram: np.ndarray
) -> np.ndarray:
    """Per-token log-likelihoods of the target span given prefix + prior targets."""
    target_ngram = np.asarray(target_ngram, dtype=np.int64)
    if len(target_ngram) == 0:
        raise ValueError("empty target span")
    full = np.concatenate([np.asarray(prefix, dtype=np.int64), target_ngram])
    positions = np.arange(len(prefix), len(full))
    windows = context_windows(full, positions, spec.input_dim)
    probs = forward_windows(spec, params, windows)
    picked = probs[np.arange(len(target_ngram)), target_ngram]
    return np.log(np.clip(picked, PROB_CLAMP, 1.0 - PROB_CLAMP))


def phi_sequence_loss(
    spec: ModelSpec, params: ParamVector, prefix: np.ndarray, target_ngram: np.ndarray
) -> SignalValue:
    """Mean negative log-likelihood over the target n-gram positions."""
    return SignalValue(float(-sequence_span_logprobs(spec, params, prefix, target_ngram).mean()), "loss")


def batch_feature_signals(
    spec: ModelSpec, params: ParamVector, x: np.ndarray, y: np.ndarray, phi_kind: str
) -> np.ndarray:
    """Vectorized phi over a labelled feature batch."""
    probs = forward(spec, params, x)
    p = np.clip(probs[np.arange(len(y)), y], PROB_CLAMP, 1.0 - PROB_CLAMP)
    if phi_kind == "logit-confidence":
        return np.log(p / (1.0 - p))
    if phi_kind == "loss":
        return -np.log(p)
    raise ValueError(f"unknown phi kind {phi_kind!r}")


def batch_span_losses(
    spec: ModelSpec, params: ParamVector, records: list[np.ndarray], ngram_len: int
) -> np.ndarray:
    """Vectorized mean span negative log-likelihood, one value per record."""
    recs = np.stack(records)
    length = recs.shape[1]
    positions = np.arange(length - ngram_len, length)
    windows = np.stack([context_windows(rec, positions, spec.input_dim) for rec in recs])
    probs = forward_windows(spec, params, windows.reshape(-1, spec.input_dim))
    targets = recs[:, length - ngram_len :].reshape(-1)
    picked = np.clip(probs[np.arange(len(targets)), targets], PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -np.log(picked).reshape(len(recs), ngram_len).mean(axis=1)


def save_params(path: str | Path, spec: ModelSpec, params: ParamVector) -> None:
    """Write a .params file: one JSON header line, then little-endian f64 values."""
    header = {
        "kind": spec.kind,
        "input_dim": spec.input_dim,
        "hidden_dim": spec.hidden_dim,
        "num_outputs": spec.num_outputs,
        "activation": spec.activation,
        "tag": params.tag,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(params.values.astype("<f8").tobytes())


def load_params(path: str | Path) -> tuple[ModelSpec, ParamVector]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        raw = fh.read()
    tag = header.pop("tag")
    spec = ModelSpec(**header)
    values = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    if len(values) != param_count(spec):
        raise ValueError(f"{path}: expected {param_count(spec)} values, found {len(values)}")
    return spec, ParamVector(values, tag)
