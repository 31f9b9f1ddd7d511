import numpy as np
import pytest

from unlearn_audit.data import synth_blobs, synth_sequences
from unlearn_audit.models import ModelSpec, init_params, param_count
from unlearn_audit.training import (
    DivergenceError,
    SgdState,
    TrainHyper,
    accuracy,
    batch_stream,
    ce_loss_grad,
    epoch_batches,
    kl_loss_grad,
    lm_loss_grad,
    lm_training_examples,
    npo_loss_grad,
    span_examples,
    train,
)


def central_difference(loss_fn, values, h=1e-5):
    grad = np.zeros_like(values)
    for i in range(len(values)):
        up = values.copy()
        up[i] += h
        down = values.copy()
        down[i] -= h
        grad[i] = (loss_fn(up) - loss_fn(down)) / (2 * h)
    return grad


def relative_error(analytic, numeric):
    denom = max(np.linalg.norm(numeric), 1e-8)
    return np.linalg.norm(analytic - numeric) / denom


def random_classifier_instance(rng):
    kind = rng.choice(["linear", "mlp"])
    dim = int(rng.integers(2, 5))
    classes = int(rng.integers(2, 5))
    hidden = 0 if kind == "linear" else int(rng.integers(3, 7))
    activation = str(rng.choice(["relu", "tanh"]))
    spec = ModelSpec(kind, dim, hidden, classes, activation)
    values = rng.normal(size=param_count(spec)) * 0.7
    x = rng.normal(size=(int(rng.integers(2, 6)), dim))
    y = rng.integers(0, classes, size=len(x))
    return spec, values, x, y


def test_ce_gradient_matches_central_differences():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        spec, values, x, y = random_classifier_instance(rng)
        _, grad = ce_loss_grad(spec, values, x, y)
        numeric = central_difference(lambda v: ce_loss_grad(spec, v, x, y)[0], values)
        worst = max(worst, relative_error(grad, numeric))
    assert worst <= 1e-4


def test_kl_gradient_matches_central_differences():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        spec, values, x, y = random_classifier_instance(rng)
        logits = rng.normal(size=(len(x), spec.num_outputs))
        teacher = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        temp = float(rng.uniform(0.5, 2.0))
        _, grad = kl_loss_grad(spec, values, x, teacher, temp)
        numeric = central_difference(lambda v: kl_loss_grad(spec, v, x, teacher, temp)[0], values)
        worst = max(worst, relative_error(grad, numeric))
    assert worst <= 1e-4


def test_lm_gradient_matches_central_differences():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        vocab = int(rng.integers(4, 9))
        window = int(rng.integers(2, 5))
        spec = ModelSpec("token-lm", window, int(rng.integers(3, 6)), vocab)
        values = rng.normal(size=param_count(spec)) * 0.5
        n = int(rng.integers(2, 5))
        windows = rng.integers(-1, vocab, size=(n, window))
        targets = rng.integers(0, vocab, size=n)
        _, grad = lm_loss_grad(spec, values, windows, targets)
        numeric = central_difference(lambda v: lm_loss_grad(spec, v, windows, targets)[0], values)
        worst = max(worst, relative_error(grad, numeric))
    assert worst <= 1e-4


def test_npo_gradient_matches_central_differences():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        vocab = int(rng.integers(4, 9))
        window = int(rng.integers(2, 4))
        span = int(rng.integers(2, 4))
        num_seqs = int(rng.integers(1, 4))
        spec = ModelSpec("token-lm", window, 4, vocab)
        values = rng.normal(size=param_count(spec)) * 0.5
        windows = rng.integers(-1, vocab, size=(num_seqs * span, window))
        targets = rng.integers(0, vocab, size=num_seqs * span)
        refs = rng.normal(size=num_seqs) - 1.5
        beta = float(rng.uniform(0.3, 3.0))
        _, grad = npo_loss_grad(spec, values, windows, targets, span, refs, beta)
        numeric = central_difference(
            lambda v: npo_loss_grad(spec, v, windows, targets, span, refs, beta)[0], values
        )
        worst = max(worst, relative_error(grad, numeric))
    assert worst <= 1e-4


def test_npo_loss_at_reference_is_2log2_over_beta():
    rng = np.random.default_rng(4)
    spec = ModelSpec("token-lm", 3, 4, 8)
    values = rng.normal(size=param_count(spec)) * 0.4
    windows = rng.integers(0, 8, size=(6, 3))
    targets = rng.integers(0, 8, size=6)
    span = 3
    probs_loss, _ = lm_loss_grad(spec, values, windows, targets)
    # reference equal to the current model: gap 0 everywhere
    picked = []
    from unlearn_audit.training import _lm_forward

    probs, _ = _lm_forward(spec, values, windows)
    logp = np.log(probs[np.arange(6), targets]).reshape(2, span).mean(axis=1)
    for beta in (0.5, 1.0, 4.0):
        loss, _ = npo_loss_grad(spec, values, windows, targets, span, logp, beta)
        assert loss == pytest.approx((2.0 / beta) * np.log(2.0), rel=1e-12)
    assert probs_loss > 0  # sanity on the shared example arrays
    assert not picked


def test_npo_loss_saturates_when_far_below_reference():
    rng = np.random.default_rng(5)
    spec = ModelSpec("token-lm", 3, 4, 8)
    values = rng.normal(size=param_count(spec)) * 0.4
    windows = rng.integers(0, 8, size=(3, 3))
    targets = rng.integers(0, 8, size=3)
    refs = np.array([50.0])  # reference far above the model's log-likelihood
    loss, _ = npo_loss_grad(spec, values, windows, targets, 3, refs, beta=10.0)
    assert loss == pytest.approx(0.0, abs=1e-12)


def test_full_batch_descent_loss_non_increasing():
    rng = np.random.default_rng(6)
    spec = ModelSpec("mlp", 2, 8, 2)
    values = rng.normal(size=param_count(spec)) * 0.5
    x = rng.normal(size=(40, 2))
    y = rng.integers(0, 2, size=40)
    state = SgdState(learning_rate=0.05, momentum=0.0, weight_decay=0.0)
    losses = []
    for _ in range(50):
        loss, grad = ce_loss_grad(spec, values, x, y)
        losses.append(loss)
        state.step(values, grad)
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_epoch_batches_cover_and_are_deterministic():
    batches = epoch_batches(10, 3, seed=1, label="t", epoch=0)
    flat = np.concatenate(batches)
    assert sorted(flat.tolist()) == list(range(10))
    again = epoch_batches(10, 3, seed=1, label="t", epoch=0)
    assert all(np.array_equal(a, b) for a, b in zip(batches, again))
    other_epoch = epoch_batches(10, 3, seed=1, label="t", epoch=1)
    assert not all(np.array_equal(a, b) for a, b in zip(batches, other_epoch))


def test_batch_stream_cycles_full_passes():
    stream = batch_stream(6, 2, seed=0, label="s")
    seen = np.concatenate([next(stream) for _ in range(3)])
    assert sorted(seen.tolist()) == list(range(6))


def test_train_zero_epochs_returns_init():
    ds = synth_blobs(60, 2, 0.5, 0.0, 0.0, seed=1)
    spec = ModelSpec("mlp", 2, 4, 2)
    hyper = TrainHyper(epochs=0, batch_size=8, learning_rate=0.1, seed=9)
    out = train(spec, ds, ds.ids, hyper)
    assert np.array_equal(out.values, init_params(spec, 9).values)


def test_train_separable_blobs_reach_full_accuracy():
    ds = synth_blobs(120, 2, 0.3, 0.0, 0.0, seed=2)
    spec = ModelSpec("mlp", 2, 16, 2)
    hyper = TrainHyper(epochs=50, batch_size=16, learning_rate=0.1, seed=3)
    model = train(spec, ds, ds.ids, hyper)
    assert accuracy(spec, model, ds, ds.ids) == 1.0


def test_train_deterministic():
    ds = synth_blobs(80, 2, 0.8, 0.0, 0.05, seed=4)
    spec = ModelSpec("mlp", 2, 8, 2)
    hyper = TrainHyper(epochs=10, batch_size=8, learning_rate=0.1, seed=5)
    a = train(spec, ds, ds.ids, hyper)
    b = train(spec, ds, ds.ids, hyper)
    assert np.array_equal(a.values, b.values)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_aborts():
    ds = synth_blobs(40, 2, 0.5, 0.0, 0.0, seed=6)
    spec = ModelSpec("mlp", 2, 8, 2)
    hyper = TrainHyper(epochs=60, batch_size=4, learning_rate=4e4, seed=7)
    with pytest.raises(DivergenceError):
        train(spec, ds, ds.ids, hyper)


def test_sequence_train_reduces_span_loss():
    ds = synth_sequences(40, 16, 10, 4, seed=8)
    spec = ModelSpec("token-lm", 4, 8, 16)
    hyper = TrainHyper(epochs=8, batch_size=8, learning_rate=0.5, weight_decay=0.0, seed=9)
    model = train(spec, ds, ds.ids, hyper)
    untrained = init_params(spec, 9)
    from unlearn_audit.models import batch_span_losses

    trained_loss = batch_span_losses(spec, model, ds.token_records(ds.ids), 4).mean()
    init_loss = batch_span_losses(spec, untrained, ds.token_records(ds.ids), 4).mean()
    assert trained_loss < init_loss


def test_lm_examples_shapes():
    records = [np.arange(10) % 7 for _ in range(3)]
    windows, targets = lm_training_examples(records, window=4)
    assert windows.shape == (3, 9, 4)
    assert targets.shape == (3, 9)
    swindows, stargets = span_examples(records, window=4, ngram_len=3)
    assert swindows.shape == (3, 3, 4)
    assert np.array_equal(stargets[0], records[0][-3:])
