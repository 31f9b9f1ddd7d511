import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unlearn_audit.data import make_partition, synth_blobs
from unlearn_audit.metrics import (
    attack_accuracy,
    auc,
    emit_report,
    gap_report,
    ks_critical,
    read_metrics_csv,
    read_roc_csv,
    roc_curve,
    svg_roc_loglog,
    tpr_at_fpr,
    two_sample_ks,
    write_roc_csv,
)
from unlearn_audit.attack import ScoreRecord
from unlearn_audit.models import ModelSpec
from unlearn_audit.training import TrainHyper, train


def brute_force_auc(scores, truths):
    """O(n^2) pairwise-counting oracle; ties count one half."""
    pos = [s for s, t in zip(scores, truths) if t]
    neg = [s for s, t in zip(scores, truths) if not t]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else (0.5 if p == n else 0.0)
    return total / (len(pos) * len(neg))


def test_auc_perfect_separation():
    scores = [0.9, 0.8, 0.3, 0.1]
    truths = [True, True, False, False]
    assert auc(roc_curve(scores, truths)) == 1.0


def test_auc_with_tie():
    scores = [0.9, 0.4, 0.4, 0.1]
    truths = [True, True, False, False]
    assert auc(roc_curve(scores, truths)) == 0.875


def test_auc_label_flip_symmetry():
    rng = np.random.default_rng(0)
    scores = rng.normal(size=40)
    truths = rng.random(40) > 0.5
    if truths.all() or not truths.any():
        truths[0] = ~truths[0]
    a = auc(roc_curve(scores, truths))
    b = auc(roc_curve(scores, ~truths))
    assert a == pytest.approx(1.0 - b, abs=1e-12)


def test_auc_matches_brute_force_exactly_1000_sets():
    rng = np.random.default_rng(1)
    for trial in range(1000):
        n = int(rng.integers(4, 30))
        if trial % 2:
            scores = np.round(rng.normal(size=n), 1)  # force ties
        else:
            scores = rng.normal(size=n)
        truths = rng.random(n) > 0.5
        if truths.all():
            truths[0] = False
        if not truths.any():
            truths[0] = True
        fast = auc(roc_curve(scores, truths))
        brute = brute_force_auc(scores.tolist(), truths.tolist())
        assert fast == brute  # exact equality, not approximate


def test_roc_curve_shape_and_monotonicity():
    rng = np.random.default_rng(2)
    scores = rng.normal(size=50)
    truths = rng.random(50) > 0.4
    roc = roc_curve(scores, truths)
    assert roc.fprs[0] == 0.0 and roc.tprs[0] == 0.0
    assert roc.fprs[-1] == 1.0 and roc.tprs[-1] == 1.0
    assert np.all(np.diff(roc.fprs) >= 0)
    assert np.all(np.diff(roc.tprs) >= 0)
    assert roc.thresholds[0] == np.inf


def test_roc_single_class_rejected():
    with pytest.raises(ValueError):
        roc_curve([0.1, 0.2], [True, True])


def test_tpr_at_fpr_conventions():
    # perfect separation: full TPR at the strictest threshold
    roc = roc_curve([0.9, 0.8, 0.3, 0.1], [True, True, False, False])
    assert tpr_at_fpr(roc, 0.01) == 1.0
    # all scores identical: a single tie group; conservatively zero
    roc_tied = roc_curve([0.5, 0.5, 0.5, 0.5], [True, True, False, False])
    assert tpr_at_fpr(roc_tied, 0.01) == 0.0


def test_tpr_at_fpr_threshold_enumeration():
    # 100 negatives, one positive above all: the top threshold admits no
    # negative, so TPR@1% is 1
    scores = np.concatenate([[10.0], np.linspace(0, 1, 100)])
    truths = np.array([True] + [False] * 100)
    roc = roc_curve(scores, truths)
    assert tpr_at_fpr(roc, 0.01) == 1.0
    # positive tied with the top negative: the group admits 1 negative,
    # FPR 1% exactly, still admissible at the 1% point
    scores2 = np.concatenate([[1.0], np.linspace(0, 1, 100)])
    roc2 = roc_curve(scores2, truths)
    assert tpr_at_fpr(roc2, 0.01) == 1.0
    assert tpr_at_fpr(roc2, 0.005) == 0.0


def test_tpr_at_fpr_validates_and_is_monotone():
    rng = np.random.default_rng(3)
    scores = rng.normal(size=60)
    truths = rng.random(60) > 0.5
    roc = roc_curve(scores, truths)
    with pytest.raises(ValueError):
        tpr_at_fpr(roc, 0.0)
    points = np.linspace(0.01, 0.99, 50)
    values = [tpr_at_fpr(roc, p) for p in points]
    assert all(b >= a for a, b in zip(values, values[1:]))


def test_attack_accuracy_examples():
    assert attack_accuracy([0.9, 0.8, 0.3, 0.1], [True, True, False, False]) == 1.0
    assert attack_accuracy([0.9, 0.4, 0.4, 0.1], [True, True, False, False]) == 0.75
    rng = np.random.default_rng(4)
    same = rng.normal(size=400)
    truths = np.array([True] * 200 + [False] * 200)
    assert abs(attack_accuracy(same, truths) - 0.5) < 0.1


@settings(max_examples=60, deadline=None)
@given(
    # coarse grid keeps the transform strictly monotone in float arithmetic
    st.lists(st.integers(-5000, 5000).map(lambda v: v / 1000.0), min_size=4, max_size=40),
    st.data(),
)
def test_metrics_invariant_under_monotone_transform(scores, data):
    truths = data.draw(
        st.lists(st.booleans(), min_size=len(scores), max_size=len(scores))
    )
    if all(truths) or not any(truths):
        truths[0] = not truths[0]
    scores = np.array(scores)
    transformed = np.exp(0.7 * scores) + 2.0  # strictly monotone
    a1 = auc(roc_curve(scores, truths))
    a2 = auc(roc_curve(transformed, truths))
    assert a1 == pytest.approx(a2, abs=1e-12)
    assert attack_accuracy(scores, truths) == pytest.approx(
        attack_accuracy(transformed, truths), abs=1e-12
    )
    r1, r2 = roc_curve(scores, truths), roc_curve(transformed, truths)
    assert tpr_at_fpr(r1, 0.25) == tpr_at_fpr(r2, 0.25)


def test_ks_statistic_and_critical():
    a = np.zeros(10)
    b = np.ones(10)
    assert two_sample_ks(a, b) == 1.0
    assert two_sample_ks(a, a) == 0.0
    assert ks_critical(10, 10) == pytest.approx(1.358 * np.sqrt(20 / 100))
    rng = np.random.default_rng(5)
    same = [two_sample_ks(rng.normal(size=10), rng.normal(size=10)) for _ in range(200)]
    exceed = np.mean([s > ks_critical(10, 10) for s in same])
    assert exceed < 0.15  # close to the nominal 5% level


# ---------------------------------------------------------------------------
# gap report


def test_gap_report_retrain_zero_deltas_and_direction():
    ds = synth_blobs(200, 2, 1.0, 0.05, 0.05, seed=60)
    spec = ModelSpec("mlp", 2, 8, 2)
    ids = ds.ids
    partition = make_partition(ids[:120], ids[:30], out_ids=ids[120:])
    hyper = TrainHyper(epochs=20, batch_size=16, learning_rate=0.1, seed=1)
    model_a = train(spec, ds, partition.remain_ids, hyper)
    vulnerable = [s.sample_id for s in ds.samples if s.flagged]
    report = gap_report(
        {"retrain": model_a, "other": model_a}, spec, ds, partition, ids[120:], vulnerable
    )
    rows = {r.method: r for r in report.rows}
    assert rows["retrain"].delta_remain == 0.0
    assert rows["retrain"].delta_forget == 0.0 or np.isnan(rows["retrain"].delta_forget)
    assert rows["other"].delta_remain == 0.0  # same params, zero gap
    assert not rows["other"].unintended_forgetting


def test_gap_report_flags_vulnerable_drop():
    ds = synth_blobs(200, 2, 1.0, 0.05, 0.05, seed=61)
    spec = ModelSpec("mlp", 2, 8, 2)
    ids = ds.ids
    partition = make_partition(ids[:120], ids[:30], out_ids=ids[120:])
    hyper = TrainHyper(epochs=25, batch_size=16, learning_rate=0.1, seed=2)
    good = train(spec, ds, partition.remain_ids, hyper)
    bad = train(spec, ds, list(partition.remain_ids)[:20], TrainHyper(1, 16, 0.1, seed=3))
    vulnerable = [s.sample_id for s in ds.samples if s.flagged]
    report = gap_report(
        {"retrain": good, "weak": bad}, spec, ds, partition, ids[120:], vulnerable, margin=0.05
    )
    rows = {r.method: r for r in report.rows}
    if rows["weak"].delta_vulnerable_remain is not None and rows["weak"].delta_vulnerable_remain < -0.05:
        assert rows["weak"].unintended_forgetting


def test_gap_report_requires_retrain_row():
    ds = synth_blobs(50, 2, 1.0, 0.0, 0.0, seed=62)
    spec = ModelSpec("mlp", 2, 8, 2)
    model = train(spec, ds, ds.ids, TrainHyper(2, 16, 0.1, seed=0))
    partition = make_partition(ds.ids[:30], ds.ids[:5], out_ids=ds.ids[30:])
    with pytest.raises(ValueError, match="retrain"):
        gap_report({"only": model}, spec, ds, partition, ds.ids[30:], [])


def test_gap_report_empty_vulnerable_omits_column():
    ds = synth_blobs(60, 2, 1.0, 0.0, 0.0, seed=63)
    spec = ModelSpec("mlp", 2, 8, 2)
    model = train(spec, ds, ds.ids[:40], TrainHyper(5, 16, 0.1, seed=0))
    partition = make_partition(ds.ids[:40], ds.ids[:10], out_ids=ds.ids[40:])
    report = gap_report({"retrain": model}, spec, ds, partition, ds.ids[40:], [])
    assert report.rows[0].acc_vulnerable_remain is None


# ---------------------------------------------------------------------------
# emission


def _records(n=20, seed=0):
    rng = np.random.default_rng(seed)
    recs = []
    for i in range(n):
        truth = "unlearned" if i % 2 else "held-out"
        bump = 1.5 if truth == "unlearned" else 0.7
        recs.append(
            ScoreRecord(i, truth, bump * rng.uniform(0.5, 2), rng.uniform(0.5, 2),
                        rng.uniform(0.5, 2), rng.uniform(0.01, 0.99))
        )
    return recs


def test_emit_report_files(tmp_path):
    from unlearn_audit.metrics import records_to_scores

    records = _records()
    per_attack = records_to_scores(records)
    rocs = {k: roc_curve(s, t) for k, (s, t) in per_attack.items()}
    files = emit_report(records, rocs, None, tmp_path, "hash", 7, (0.01, 0.05))
    names = {f.name for f in files}
    assert {"scores.csv", "metrics.csv", "roc_leakage.csv", "roc_loglog.svg"} <= names
    assert (tmp_path / "hist_leakage.svg").exists()
    rows, config_hash = read_metrics_csv(tmp_path / "metrics.csv")
    assert config_hash == "hash"
    assert {r["attack"] for r in rows} == {"leakage", "efficacy", "ulira", "population"}


def test_emit_report_empty_records(tmp_path):
    files = emit_report([], {}, None, tmp_path, "hash", 7)
    scores = (tmp_path / "scores.csv").read_text().splitlines()
    assert len(scores) == 2  # provenance comment + header only
    assert not list(tmp_path.glob("*.svg"))
    assert files


def test_roc_csv_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    roc = roc_curve(rng.normal(size=30), rng.random(30) > 0.5)
    path = tmp_path / "roc.csv"
    write_roc_csv(path, roc, "h")
    loaded = read_roc_csv(path)
    assert np.array_equal(loaded.fprs, roc.fprs)
    assert np.array_equal(loaded.tprs, roc.tprs)
    assert np.array_equal(loaded.thresholds, roc.thresholds)
    assert np.array_equal(loaded.fp_counts, roc.fp_counts)
    assert loaded.num_pos == roc.num_pos and loaded.num_neg == roc.num_neg


def test_roc_svg_golden_layout(tmp_path):
    roc = roc_curve([0.9, 0.8, 0.3, 0.1], [True, True, False, False])
    p1 = tmp_path / "a.svg"
    p2 = tmp_path / "b.svg"
    svg_roc_loglog({"leakage": roc}, p1, "h")
    svg_roc_loglog({"leakage": roc}, p2, "h")
    text = p1.read_text()
    assert p1.read_bytes() == p2.read_bytes()  # byte-deterministic
    for label in ("1e-3", "1e-2", "1e-1", ">1<"):
        assert label in text
    assert "false positive rate" in text and "true positive rate" in text
