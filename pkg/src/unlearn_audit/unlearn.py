"""Inexact unlearning methods mapping (initial params, forget, remain) to
updated params, plus the retrain oracle and a no-op baseline.

Feature-model methods: retrain, finetune, gradient ascent + refine (ga_plus),
balanced ascent/descent (neggrad_plus), magnitude pruning + masked fine-tune
(l1_sparse) and teacher-student distillation (scrub). Sequence-model methods:
joint ascent/descent on target spans (ga_gdr) and reference-anchored
directional forgetting (npo). All are deterministic in (inputs, hyper.seed).
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from ._rng import derive_seed
from .data import DataPartition, Dataset
from .models import ModelSpec, ParamVector, bias_mask
from .training import (
    SgdState,
    TrainHyper,
    batch_stream,
    ce_loss_grad,
    check_loss,
    epoch_batches,
    finalize,
    kl_loss_grad,
    lm_loss_grad,
    lm_training_examples,
    npo_loss_grad,
    span_examples,
    train,
)
from .training import _classifier_forward, _lm_forward

VECTOR_METHODS = ("identity", "retrain", "finetune", "ga_plus", "neggrad_plus", "l1_sparse", "scrub")
SEQUENCE_METHODS = ("identity", "retrain", "finetune", "ga_gdr", "npo")
METHODS = tuple(dict.fromkeys(VECTOR_METHODS + SEQUENCE_METHODS))


@dataclass(frozen=True)
class UnlearnHyper:
    """Per-method knobs; fields irrelevant to ``method`` are ignored."""

    method: str
    learning_rate: float = 0.01
    forget_batch: int = 32
    retain_batch: int = 32
    ascent_steps: int = 0
    refine_epochs: int = 0
    alpha: float = 0.5  # remain-vs-forget balance for neggrad_plus
    sparsity: float = 0.0  # pruned weight fraction for l1_sparse
    max_steps: int = 0  # forget-divergence epochs for scrub
    min_steps: int = 0  # remain-consistency epochs for scrub
    beta: float = 1.0  # npo temperature
    temperature: float = 1.0  # scrub distillation temperature
    kl_weight: float = 1.0
    ce_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown unlearning method {self.method!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.forget_batch < 1 or self.retain_batch < 1:
            raise ValueError("batch sizes must be at least 1")
        if self.method == "neggrad_plus" and not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if self.method == "l1_sparse" and not 0.0 <= self.sparsity < 1.0:
            raise ValueError("sparsity must be in [0, 1)")
        if self.method == "npo" and self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.ascent_steps < 0 or self.refine_epochs < 0 or self.max_steps < 0 or self.min_steps < 0:
            raise ValueError("step counts must be non-negative")


def run_unlearning(
    spec: ModelSpec,
    initial: ParamVector,
    dataset: Dataset,
    partition: DataPartition,
    hyper: UnlearnHyper,
    train_hyper: TrainHyper,
) -> ParamVector:
    allowed = VECTOR_METHODS if dataset.kind == "vector" else SEQUENCE_METHODS
    if hyper.method not in allowed:
        raise ValueError(f"method {hyper.method!r} does not support {dataset.kind} data")
    if hyper.method == "identity":
        return ParamVector(initial.values.copy(), "unlearned")
    if hyper.method == "retrain":
        return unlearn_retrain(spec, dataset, partition, train_hyper, hyper.seed)
    if dataset.kind == "vector":
        fn = {
            "finetune": unlearn_finetune,
            "ga_plus": unlearn_ga_plus,
            "neggrad_plus": unlearn_neggrad_plus,
            "l1_sparse": unlearn_l1_sparse,
            "scrub": unlearn_scrub,
        }[hyper.method]
    else:
        fn = {"finetune": unlearn_finetune, "ga_gdr": unlearn_ga_gdr, "npo": unlearn_npo}[hyper.method]
    return fn(spec, initial, dataset, partition, hyper, train_hyper)


def unlearn_retrain(
    spec: ModelSpec,
    dataset: Dataset,
    partition: DataPartition,
    train_hyper: TrainHyper,
    seed: int,
) -> ParamVector:
    """Gold standard: train from a fresh seed-derived init on the remain set."""
    hyper = TrainHyper(
        train_hyper.epochs,
        train_hyper.batch_size,
        train_hyper.learning_rate,
        train_hyper.momentum,
        train_hyper.weight_decay,
        derive_seed("retrain", seed),
    )
    return train(spec, dataset, partition.remain_ids, hyper, tag="retrained", label="retrain")


# ---------------------------------------------------------------------------
# shared phases


def _vector_arrays(dataset: Dataset, ids):
    ids = sorted(ids)
    return dataset.feature_matrix(ids) if ids else (np.zeros((0, dataset.feature_dim)), np.zeros(0, np.int64))


def _refine_phase(spec, values, dataset, remain_ids, hyper, train_hyper, epochs, state=None):
    """Descent epochs on the remain set; the shared fine-tuning trajectory."""
    state = state or SgdState(hyper.learning_rate, train_hyper.momentum, train_hyper.weight_decay)
    if dataset.kind == "vector":
        x, y = _vector_arrays(dataset, remain_ids)
        for epoch in range(epochs):
            for batch in epoch_batches(len(y), hyper.retain_batch, hyper.seed, "refine", epoch):
                loss, grad = ce_loss_grad(spec, values, x[batch], y[batch])
                check_loss(loss, "refine")
                state.step(values, grad)
    else:
        windows, targets = lm_training_examples(dataset.token_records(remain_ids), spec.input_dim)
        n = len(windows)
        for epoch in range(epochs):
            for batch in epoch_batches(n, hyper.retain_batch, hyper.seed, "refine", epoch):
                w = windows[batch].reshape(-1, spec.input_dim)
                loss, grad = lm_loss_grad(spec, values, w, targets[batch].reshape(-1))
                check_loss(loss, "refine")
                state.step(values, grad)
    return values


def unlearn_finetune(spec, initial, dataset, partition, hyper, train_hyper) -> ParamVector:
    """Plain continued training on the remain set."""
    values = initial.values.copy()
    _refine_phase(spec, values, dataset, partition.remain_ids, hyper, train_hyper, hyper.refine_epochs)
    return finalize(values, "unlearned", "finetune")


def unlearn_ga_plus(spec, initial, dataset, partition, hyper, train_hyper) -> ParamVector:
    """Gradient ascent on the forget set, then fine-tuning on the remain set."""
    values = initial.values.copy()
    forget_ids = sorted(partition.forget_ids)
    if forget_ids and hyper.ascent_steps > 0:
        x, y = dataset.feature_matrix(forget_ids)
        state = SgdState(hyper.learning_rate, train_hyper.momentum, train_hyper.weight_decay)
        stream = batch_stream(len(y), hyper.forget_batch, hyper.seed, "forget")
        for _ in range(hyper.ascent_steps):
            batch = next(stream)
            loss, grad = ce_loss_grad(spec, values, x[batch], y[batch])
            check_loss(loss, "ascent")
            state.step(values, -grad)
    _refine_phase(spec, values, dataset, partition.remain_ids, hyper, train_hyper, hyper.refine_epochs)
    return finalize(values, "unlearned", "ga_plus")


def unlearn_neggrad_plus(spec, initial, dataset, partition, hyper, train_hyper) -> ParamVector:
    """Joint steps descending alpha*L(remain) - (1-alpha)*L(forget)."""
    values = initial.values.copy()
    x_r, y_r = _vector_arrays(dataset, partition.remain_ids)
    x_f, y_f = _vector_arrays(dataset, partition.forget_ids)
    state = SgdState(hyper.learning_rate, train_hyper.momentum, train_hyper.weight_decay)
    retain = batch_stream(len(y_r), hyper.retain_batch, hyper.seed, "refine")
    forget = batch_stream(len(y_f), hyper.forget_batch, hyper.seed, "forget") if len(y_f) else None
    for _ in range(hyper.ascent_steps):
        rb = next(retain)
        loss_r, g_r = ce_loss_grad(spec, values, x_r[rb], y_r[rb])
        check_loss(loss_r, "neggrad_plus")
        if forget is None:
            grad = hyper.alpha * g_r
        else:
            fb = next(forget)
            loss_f, g_f = ce_loss_grad(spec, values, x_f[fb], y_f[fb])
            check_loss(loss_f, "neggrad_plus")
            grad = hyper.alpha * g_r - (1.0 - hyper.alpha) * g_f
        state.step(values, grad)
    return finalize(values, "unlearned", "neggrad_plus")


def prune_mask(spec: ModelSpec, values: np.ndarray, sparsity: float) -> np.ndarray:
    """Boolean mask over the smallest-magnitude non-bias weights."""
    eligible = ~bias_mask(spec)
    n_prune = int(np.floor(sparsity * eligible.sum()))
    mask = np.zeros_like(eligible)
    if n_prune:
        idx = np.flatnonzero(eligible)
        order = np.argsort(np.abs(values[idx]), kind="stable")
        mask[idx[order[:n_prune]]] = True
    return mask


def unlearn_l1_sparse(spec, initial, dataset, partition, hyper, train_hyper) -> ParamVector:
    """Magnitude pruning, then fine-tuning with the zero mask re-applied each step."""
    values = initial.values.copy()
    mask = prune_mask(spec, values, hyper.sparsity)
    values[mask] = 0.0
    x, y = _vector_arrays(dataset, partition.remain_ids)
    state = SgdState(hyper.learning_rate, train_hyper.momentum, train_hyper.weight_decay)
    for epoch in range(hyper.refine_epochs):
        for batch in epoch_batches(len(y), hyper.retain_batch, hyper.seed, "refine", epoch):
            loss, grad = ce_loss_grad(spec, values, x[batch], y[batch])
            check_loss(loss, "l1_sparse")
            state.step(values, grad)
            values[mask] = 0.0
    return finalize(values, "unlearned", "l1_sparse")


def unlearn_scrub(spec, initial, dataset, partition, hyper, train_hyper) -> ParamVector:
    """Distillation from the frozen initial model: diverge on forget data,
    stay consistent (KL + cross-entropy) on remain data, in alternating epochs."""
    values = initial.values.copy()
    x_r, y_r = _vector_arrays(dataset, partition.remain_ids)
    x_f, _ = _vector_arrays(dataset, partition.forget_ids)
    teacher_r, _ = _classifier_forward(spec, initial.values, x_r)
    teacher_f = _classifier_forward(spec, initial.values, x_f)[0] if len(x_f) else np.zeros((0, spec.num_outputs))
    state = SgdState(hyper.learning_rate, train_hyper.momentum, train_hyper.weight_decay)
    for round_idx in range(max(hyper.max_steps, hyper.min_steps)):
        if round_idx < hyper.max_steps and len(x_f):
            for batch in epoch_batches(len(x_f), hyper.forget_batch, hyper.seed, "scrub-max", round_idx):
                loss, grad = kl_loss_grad(spec, values, x_f[batch], teacher_f[batch], hyper.temperature)
                check_loss(loss, "scrub")
                state.step(values, -grad)
        if round_idx < hyper.min_steps:
            for batch in epoch_batches(len(y_r), hyper.retain_batch, hyper.seed, "scrub-min", round_idx):
                kl, g_kl = kl_loss_grad(spec, values, x_r[batch], teacher_r[batch], hyper.temperature)
                ce, g_ce = ce_loss_grad(spec, values, x_r[batch], y_r[batch])
                check_loss(hyper.kl_weight * kl + hyper.ce_weight * ce, "scrub")
                state.step(values, hyper.kl_weight * g_kl + hyper.ce_weight * g_ce)
    return finalize(values, "unlearned", "scrub")


# ---------------------------------------------------------------------------
# sequence-model methods


def _sequence_phase(spec, values, dataset, partition, hyper, train_hyper, forget_grad_fn):
    """Joint ascent/descent steps shared by ga_gdr and npo, then SFT refine."""
    remain_ids = sorted(partition.remain_ids)
    forget_ids = sorted(partition.forget_ids)
    if forget_ids and hyper.ascent_steps > 0:
        r_windows, r_targets = lm_training_examples(dataset.token_records(remain_ids), spec.input_dim)
        f_windows, f_targets = span_examples(
            dataset.token_records(forget_ids), spec.input_dim, dataset.ngram_len
        )
        state = SgdState(hyper.learning_rate, train_hyper.momentum, train_hyper.weight_decay)
        retain = batch_stream(len(r_windows), hyper.retain_batch, hyper.seed, "joint-retain")
        forget = batch_stream(len(f_windows), hyper.forget_batch, hyper.seed, "forget")
        for _ in range(hyper.ascent_steps):
            fb = next(forget)
            grad_f = forget_grad_fn(values, f_windows, f_targets, fb)
            rb = next(retain)
            w = r_windows[rb].reshape(-1, spec.input_dim)
            loss_r, grad_r = lm_loss_grad(spec, values, w, r_targets[rb].reshape(-1))
            check_loss(loss_r, "joint")
            state.step(values, grad_f + grad_r)
    _refine_phase(spec, values, dataset, partition.remain_ids, hyper, train_hyper, hyper.refine_epochs)
    return values


def unlearn_ga_gdr(spec, initial, dataset, partition, hyper, train_hyper) -> ParamVector:
    """Gradient ascent on forget spans joined with descent on remain records."""

    def forget_grad(values, windows, targets, batch):
        w = windows[batch].reshape(-1, spec.input_dim)
        loss, grad = lm_loss_grad(spec, values, w, targets[batch].reshape(-1))
        check_loss(loss, "ascent")
        return -grad

    values = initial.values.copy()
    _sequence_phase(spec, values, dataset, partition, hyper, train_hyper, forget_grad)
    return finalize(values, "unlearned", "ga_gdr")


def unlearn_npo(spec, initial, dataset, partition, hyper, train_hyper) -> ParamVector:
    """Reference-anchored directional forgetting joined with remain descent."""
    forget_ids = sorted(partition.forget_ids)
    span = dataset.ngram_len
    ref_means = np.zeros(len(forget_ids))
    if forget_ids:
        f_windows, f_targets = span_examples(dataset.token_records(forget_ids), spec.input_dim, span)
        flat_w = f_windows.reshape(-1, spec.input_dim)
        flat_t = f_targets.reshape(-1)
        probs, _ = _lm_forward(spec, initial.values, flat_w)
        picked = np.clip(probs[np.arange(len(flat_t)), flat_t], 1e-300, None)
        ref_means = np.log(picked).reshape(len(forget_ids), span).mean(axis=1)

    def forget_grad(values, windows, targets, batch):
        w = windows[batch].reshape(-1, spec.input_dim)
        loss, grad = npo_loss_grad(
            spec, values, w, targets[batch].reshape(-1), span, ref_means[batch], hyper.beta
        )
        check_loss(loss, "npo")
        return grad

    values = initial.values.copy()
    _sequence_phase(spec, values, dataset, partition, hyper, train_hyper, forget_grad)
    return finalize(values, "unlearned", "npo")


def hyper_grid(base: UnlearnHyper, **axes) -> list[UnlearnHyper]:
    """Cartesian grid of hyper candidates around a base configuration."""
    keys = sorted(axes)
    grid = []
    for combo in itertools.product(*(axes[k] for k in keys)):
        grid.append(UnlearnHyper(**{**base.__dict__, **dict(zip(keys, combo))}))
    return grid
