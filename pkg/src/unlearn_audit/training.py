"""Hand-written gradients and the deterministic minibatch SGD engine.

Every loss here returns ``(mean loss, flat gradient)`` against the flat
parameter vector, so optimizers, unlearning methods and the finite-difference
checks all speak the same interface. No autodiff anywhere.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._rng import rng_for
from .data import Dataset
from .models import (
    ModelSpec,
    ParamVector,
    _softmax,
    context_windows,
    init_params,
    param_count,
    param_views,
    pool_windows,
)

LOSS_ABORT = 1e6


class DivergenceError(RuntimeError):
    """Training or unlearning produced a NaN or runaway loss."""


def check_loss(loss: float, label: str) -> None:
    if not np.isfinite(loss) or loss > LOSS_ABORT:
        raise DivergenceError(f"{label} diverged (loss={loss!r})")


def finalize(values: np.ndarray, tag: str, label: str) -> ParamVector:
    if not np.all(np.isfinite(values)):
        raise DivergenceError(f"{label} diverged (non-finite parameters)")
    return ParamVector(values, tag)


# ---------------------------------------------------------------------------
# classifier forward/backward


def _classifier_forward(spec: ModelSpec, values: np.ndarray, x: np.ndarray):
    v = param_views(values, spec)
    if spec.kind == "linear":
        probs = _softmax(x @ v["w"] + v["b"])
        return probs, (v, x, None, None)
    z1 = x @ v["w1"] + v["b1"]
    hidden = np.maximum(z1, 0.0) if spec.activation == "relu" else np.tanh(z1)
    probs = _softmax(hidden @ v["w2"] + v["b2"])
    return probs, (v, x, z1, hidden)


def _classifier_backward(spec: ModelSpec, cache, dlogits: np.ndarray) -> np.ndarray:
    v, x, z1, hidden = cache
    grad = np.zeros(param_count(spec))
    g = param_views(grad, spec)
    if spec.kind == "linear":
        g["w"][:] = x.T @ dlogits
        g["b"][:] = dlogits.sum(axis=0)
        return grad
    g["w2"][:] = hidden.T @ dlogits
    g["b2"][:] = dlogits.sum(axis=0)
    dhidden = dlogits @ v["w2"].T
    if spec.activation == "relu":
        dz1 = dhidden * (z1 > 0.0)
    else:
        dz1 = dhidden * (1.0 - np.tanh(z1) ** 2)
    g["w1"][:] = x.T @ dz1
    g["b1"][:] = dz1.sum(axis=0)
    return grad


def ce_loss_grad(spec: ModelSpec, values: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Mean cross-entropy over a labelled batch."""
    probs, cache = _classifier_forward(spec, values, x)
    n = len(y)
    picked = np.clip(probs[np.arange(n), y], 1e-300, None)
    loss = float(-np.log(picked).mean())
    dlogits = probs.copy()
    dlogits[np.arange(n), y] -= 1.0
    return loss, _classifier_backward(spec, cache, dlogits / n)


def kl_loss_grad(
    spec: ModelSpec,
    values: np.ndarray,
    x: np.ndarray,
    teacher_probs: np.ndarray,
    temperature: float = 1.0,
):
    """Mean KL(student || teacher) over a batch, softened by ``temperature``."""
    v = param_views(values, spec)
    if spec.kind == "linear":
        logits = x @ v["w"] + v["b"]
        cache = (v, x, None, None)
    else:
        z1 = x @ v["w1"] + v["b1"]
        hidden = np.maximum(z1, 0.0) if spec.activation == "relu" else np.tanh(z1)
        logits = hidden @ v["w2"] + v["b2"]
        cache = (v, x, z1, hidden)
    p = _softmax(logits / temperature)
    q = np.clip(teacher_probs, 1e-300, None)
    s = np.log(p) - np.log(q)
    kl_rows = (p * s).sum(axis=1)
    loss = float(kl_rows.mean())
    dlogits = p * (s - kl_rows[:, None]) / (temperature * len(x))
    return loss, _classifier_backward(spec, cache, dlogits)


# ---------------------------------------------------------------------------
# token-lm forward/backward


def _lm_forward(spec: ModelSpec, values: np.ndarray, windows: np.ndarray):
    v = param_views(values, spec)
    valid = windows >= 0
    pooled = pool_windows(spec, v["emb"], windows)
    probs = _softmax(pooled @ v["w"] + v["b"])
    return probs, (v, windows, valid, pooled)


def _lm_backward(spec: ModelSpec, cache, dlogits: np.ndarray) -> np.ndarray:
    v, windows, valid, pooled = cache
    grad = np.zeros(param_count(spec))
    g = param_views(grad, spec)
    g["w"][:] = pooled.T @ dlogits
    g["b"][:] = dlogits.sum(axis=0)
    dpooled = dlogits @ v["w"].T / np.maximum(valid.sum(axis=1, keepdims=True), 1)
    rows, _ = np.nonzero(valid)
    np.add.at(g["emb"], windows[valid], dpooled[rows])
    return grad


def lm_loss_grad(spec: ModelSpec, values: np.ndarray, windows: np.ndarray, targets: np.ndarray):
    """Mean next-token cross-entropy over (context window, target) examples."""
    probs, cache = _lm_forward(spec, values, windows)
    n = len(targets)
    picked = np.clip(probs[np.arange(n), targets], 1e-300, None)
    loss = float(-np.log(picked).mean())
    dlogits = probs.copy()
    dlogits[np.arange(n), targets] -= 1.0
    return loss, _lm_backward(spec, cache, dlogits / n)


def npo_loss_grad(
    spec: ModelSpec,
    values: np.ndarray,
    windows: np.ndarray,
    targets: np.ndarray,
    span_len: int,
    ref_mean_logprobs: np.ndarray,
    beta: float,
):
    """Directional forgetting loss against a frozen reference model.

    ``windows``/``targets`` hold the concatenated target spans of a batch of
    sequences (``span_len`` positions each). Per sequence the loss is
    (2/beta) * log(1 + exp(beta * (m - m_ref))) with m the mean span
    log-likelihood under the current model and m_ref the frozen reference
    value; gradient descent therefore pushes span likelihood below the
    reference.
    """
    probs, cache = _lm_forward(spec, values, windows)
    n = len(targets)
    num_seqs = n // span_len
    picked = np.clip(probs[np.arange(n), targets], 1e-300, None)
    mean_logp = np.log(picked).reshape(num_seqs, span_len).mean(axis=1)
    gap = mean_logp - ref_mean_logprobs
    loss = float((2.0 / beta) * np.logaddexp(0.0, beta * gap).mean())
    sig = 1.0 / (1.0 + np.exp(-beta * gap))
    coeff = np.repeat(2.0 * sig / (num_seqs * span_len), span_len)
    dlogits = -probs * coeff[:, None]
    dlogits[np.arange(n), targets] += coeff
    return loss, _lm_backward(spec, cache, dlogits)


# ---------------------------------------------------------------------------
# batching and the SGD engine


def epoch_batches(n: int, batch_size: int, seed: int, label: str, epoch: int):
    """Index batches for one epoch; order drawn from (seed, label, epoch)."""
    perm = rng_for("perm", label, seed, epoch).permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def batch_stream(n: int, batch_size: int, seed: int, label: str):
    """Endless batch stream cycling fresh per-pass permutations."""
    epoch = 0
    while True:
        for batch in epoch_batches(n, batch_size, seed, label, epoch):
            yield batch
        epoch += 1


@dataclass
class SgdState:
    """Momentum SGD; weight decay enters the update, not the reported loss."""

    learning_rate: float
    momentum: float
    weight_decay: float
    velocity: np.ndarray | None = None

    def step(self, values: np.ndarray, grad: np.ndarray) -> None:
        g = grad + self.weight_decay * values
        if self.velocity is None:
            self.velocity = np.zeros_like(values)
        self.velocity *= self.momentum
        self.velocity += g
        values -= self.learning_rate * self.velocity


@dataclass(frozen=True)
class TrainHyper:
    epochs: int
    batch_size: int
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


def lm_training_examples(records: list[np.ndarray], window: int):
    """All (context, next token) pairs per record, positions 1..len-1."""
    recs = np.stack(records)
    windows = np.stack([context_windows(rec, np.arange(1, recs.shape[1]), window) for rec in recs])
    return windows, recs[:, 1:]


def span_examples(records: list[np.ndarray], window: int, ngram_len: int):
    """(context, token) pairs restricted to each record's final n-gram."""
    recs = np.stack(records)
    length = recs.shape[1]
    positions = np.arange(length - ngram_len, length)
    windows = np.stack([context_windows(rec, positions, window) for rec in recs])
    return windows, recs[:, length - ngram_len :]


def train(
    spec: ModelSpec,
    dataset: Dataset,
    ids,
    hyper: TrainHyper,
    tag: str = "initial",
    label: str = "train",
) -> ParamVector:
    """Minibatch SGD from a seed-derived init; deterministic in (inputs, seed)."""
    ids = sorted(ids)
    if not ids:
        raise ValueError("training set is empty")
    values = init_params(spec, hyper.seed).values.copy()
    state = SgdState(hyper.learning_rate, hyper.momentum, hyper.weight_decay)

    if dataset.kind == "vector":
        x, y = dataset.feature_matrix(ids)
        if y.max() >= spec.num_outputs:
            raise ValueError("label outside num_outputs")
        for epoch in range(hyper.epochs):
            for batch in epoch_batches(len(ids), hyper.batch_size, hyper.seed, label, epoch):
                loss, grad = ce_loss_grad(spec, values, x[batch], y[batch])
                check_loss(loss, label)
                state.step(values, grad)
    else:
        windows, targets = lm_training_examples(dataset.token_records(ids), spec.input_dim)
        for epoch in range(hyper.epochs):
            for batch in epoch_batches(len(ids), hyper.batch_size, hyper.seed, label, epoch):
                w = windows[batch].reshape(-1, spec.input_dim)
                t = targets[batch].reshape(-1)
                loss, grad = lm_loss_grad(spec, values, w, t)
                check_loss(loss, label)
                state.step(values, grad)
    return finalize(values, tag, label)


def classifier_accuracy(spec: ModelSpec, params: ParamVector, x: np.ndarray, y: np.ndarray) -> float:
    probs, _ = _classifier_forward(spec, params.values, x)
    return float((probs.argmax(axis=1) == y).mean())


def span_token_accuracy(
    spec: ModelSpec, params: ParamVector, records: list[np.ndarray], ngram_len: int
) -> float:
    windows, targets = span_examples(records, spec.input_dim, ngram_len)
    probs, _ = _lm_forward(spec, params.values, windows.reshape(-1, spec.input_dim))
    return float((probs.argmax(axis=1) == targets.reshape(-1)).mean())


def accuracy(spec: ModelSpec, params: ParamVector, dataset: Dataset, ids) -> float:
    """Label accuracy for vector data; target-span token accuracy for sequences."""
    ids = sorted(ids)
    if not ids:
        return float("nan")
    if dataset.kind == "vector":
        x, y = dataset.feature_matrix(ids)
        return classifier_accuracy(spec, params, x, y)
    return span_token_accuracy(spec, params, dataset.token_records(ids), dataset.ngram_len)
