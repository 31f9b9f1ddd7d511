"""Target selection: vulnerability scoring from a pre-attack shadow run,
composition of target sets (including the canary setting where vulnerable
samples are injected into a mixed forget set), and blind-attack validity
checks on the composed evaluation halves.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._rng import derive_seed, rng_for
from .attack import DENSITY_FLOOR, fit_kde
from .data import Dataset, Sample
from .models import ModelSpec
from .shadow import ObservationStore
from .training import TrainHyper, classifier_accuracy, train

MODES = ("random", "vulnerable_only", "protected_only", "vulnerable_plus_protected", "canary")
CLASSES = ("vulnerable", "protected", "neither")


@dataclass(frozen=True)
class VulnerabilityScore:
    """Pre-attack confidence that a sample's membership is inferable."""

    target_id: int
    tau: float  # p_in / (p_in + p_out) at the sample's typical member signal
    label: str  # vulnerable | protected | neither

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must be in [0, 1]")
        if self.label not in CLASSES:
            raise ValueError(f"unknown vulnerability class {self.label!r}")


def score_vulnerability(
    store: ObservationStore, fpr_threshold: float, protected_band: float = 0.05
) -> list[VulnerabilityScore]:
    """Score every target from in/out pre-attack observations.

    A sample is vulnerable when its member-query likelihood ratio exceeds the
    global score threshold at the configured false-positive rate over pooled
    non-member queries; protected when tau sits inside the coin-flip band.
    """
    by_target = store.by_target()
    ratios: dict[int, float] = {}
    taus: dict[int, float] = {}
    negative_scores: list[float] = []
    for tid in sorted(by_target):
        conds = by_target[tid]
        if "in" not in conds or "out" not in conds:
            raise ValueError(f"target {tid}: pre-attack store lacks in/out observations")
        if len(conds["in"]) < 2 or len(conds["out"]) < 2:
            raise ValueError(f"target {tid}: need at least 2 observations per condition")
        kde_in = fit_kde(conds["in"])
        kde_out = fit_kde(conds["out"])

        def ratio_at(x: float) -> float:
            p_in = max(float(kde_in.density(x)), DENSITY_FLOOR)
            p_out = max(float(kde_out.density(x)), DENSITY_FLOOR)
            return p_in / p_out
        # member query at the typical in signal; the matching non-member
        # query at the typical out signal feeds the global threshold, so the
        # kde centering bias cancels between the two pools
        query = float(conds["in"].mean())
        p_in = max(float(kde_in.density(query)), DENSITY_FLOOR)
        p_out = max(float(kde_out.density(query)), DENSITY_FLOOR)
        taus[tid] = p_in / (p_in + p_out)
        ratios[tid] = p_in / p_out
        negative_scores.append(ratio_at(float(conds["out"].mean())))

    threshold = threshold_at_fpr(np.array(negative_scores), fpr_threshold)
    scores = []
    for tid in sorted(by_target):
        if ratios[tid] > threshold:
            label = "vulnerable"
        elif abs(taus[tid] - 0.5) <= protected_band:
            label = "protected"
        else:
            label = "neither"
        scores.append(VulnerabilityScore(tid, taus[tid], label))
    return scores


def threshold_at_fpr(negative_scores: np.ndarray, fpr: float) -> float:
    """Largest cutoff admitting at most floor(fpr * n) negatives above it."""
    allowed = int(np.floor(fpr * len(negative_scores)))
    ordered = np.sort(negative_scores)[::-1]
    if allowed >= len(ordered):
        return -np.inf
    return float(ordered[allowed])


@dataclass(frozen=True)
class TargetCounts:
    num_targets: int
    num_retained: int = 0
    num_fillers: int = 0


@dataclass(frozen=True)
class TargetComposition:
    """Which samples are scheduled, scored, retained in the model, or mixed
    into the audited forget set without being scored."""

    mode: str
    target_ids: tuple[int, ...]  # scheduled for shadow rounds and the audit split
    evaluated_ids: tuple[int, ...]  # subset that receives score records
    retained_canary_ids: tuple[int, ...]  # stay in the remain set, never scored
    filler_ids: tuple[int, ...]  # forget-set filler, never scored

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown target mode {self.mode!r}")
        targets = set(self.target_ids)
        if not set(self.evaluated_ids) <= targets:
            raise ValueError("evaluated ids must be scheduled targets")
        for name, ids in (("retained", self.retained_canary_ids), ("filler", self.filler_ids)):
            if set(ids) & targets:
                raise ValueError(f"{name} ids must not overlap the target set")


def _draw(rng: np.random.Generator, ids: list[int], count: int, what: str) -> list[int]:
    if count > len(ids):
        raise ValueError(f"insufficient {what} inventory: need {count}, have {len(ids)}")
    ids = sorted(ids)
    picked = rng.permutation(len(ids))[:count]
    return sorted(ids[i] for i in picked)


def compose_targets(
    scores: list[VulnerabilityScore] | None,
    dataset: Dataset,
    mode: str,
    counts: TargetCounts,
    seed: int,
) -> TargetComposition:
    """Deterministic target composition for one audit setting."""
    if mode not in MODES:
        raise ValueError(f"unknown target mode {mode!r}")
    if mode != "random" and scores is None:
        raise ValueError(f"mode {mode!r} requires vulnerability scores")
    rng = rng_for("compose", mode, seed)
    all_ids = sorted(dataset.ids)
    by_class: dict[str, list[int]] = {c: [] for c in CLASSES}
    for s in scores or []:
        by_class[s.label].append(s.target_id)

    if mode == "random":
        targets = _draw(rng, all_ids, counts.num_targets, "sample")
        evaluated, retained = targets, []
    elif mode == "vulnerable_only":
        targets = _draw(rng, by_class["vulnerable"], counts.num_targets, "vulnerable")
        evaluated, retained = targets, []
    elif mode == "protected_only":
        targets = _draw(rng, by_class["protected"], counts.num_targets, "protected")
        evaluated, retained = targets, []
    elif mode == "vulnerable_plus_protected":
        vul = _draw(rng, by_class["vulnerable"], counts.num_targets, "vulnerable")
        prot = _draw(rng, by_class["protected"], counts.num_targets, "protected")
        targets = sorted(vul + prot)
        evaluated, retained = vul, []
    else:  # canary: reserve a slice of the vulnerable draw inside the remain set
        picked = _draw(rng, by_class["vulnerable"], counts.num_targets, "vulnerable")
        retained = sorted(rng.permutation(picked)[: counts.num_retained].tolist())
        targets = sorted(set(picked) - set(retained))
        evaluated = targets

    reserved = set(targets) | set(retained) | set(by_class["vulnerable"])
    filler_pool = [i for i in all_ids if i not in reserved]
    fillers = _draw(rng, filler_pool, counts.num_fillers, "filler")
    return TargetComposition(mode, tuple(targets), tuple(evaluated), tuple(retained), tuple(fillers))


# ---------------------------------------------------------------------------
# blind-attack validity checks


@dataclass(frozen=True)
class BlindCheckResult:
    label_overlap: float  # histogram intersection of the halves' label mix
    probe_accuracy: float  # cross-validated linear probe on raw features


def blind_check(eval_unlearned_ids, eval_heldout_ids, dataset: Dataset, folds: int = 5) -> BlindCheckResult:
    """Can the two evaluation halves be told apart from data alone?

    Near-50% probe accuracy and high label overlap mean the composed halves
    carry no membership signal by themselves.
    """
    if dataset.kind != "vector":
        raise ValueError("blind checks need raw feature vectors")
    a = sorted(eval_unlearned_ids)
    b = sorted(eval_heldout_ids)
    if len(a) != len(b) or not a:
        raise ValueError("evaluation halves must be equal-sized and non-empty")

    labels_a = np.array([dataset.by_id(i).label for i in a])
    labels_b = np.array([dataset.by_id(i).label for i in b])
    classes = np.arange(dataset.num_classes)
    hist_a = (labels_a[:, None] == classes).mean(axis=0)
    hist_b = (labels_b[:, None] == classes).mean(axis=0)
    overlap = float(np.minimum(hist_a, hist_b).sum())

    x = np.stack([dataset.by_id(i).features for i in a + b]).astype(np.float64)
    y = np.array([0] * len(a) + [1] * len(b), dtype=np.int64)
    probe_spec = ModelSpec("linear", dataset.feature_dim, 0, 2)
    probe_data = Dataset(
        "vector",
        [Sample(idx, x[idx], int(y[idx])) for idx in range(len(y))],
        2,
        dataset.feature_dim,
    )
    fold_of = np.arange(len(y)) % folds
    accs = []
    for fold in range(folds):
        train_ids = np.flatnonzero(fold_of != fold)
        test_ids = np.flatnonzero(fold_of == fold)
        hyper = TrainHyper(50, 16, 0.1, seed=derive_seed("blind-probe", fold))
        params = train(probe_spec, probe_data, train_ids.tolist(), hyper, label="blind-probe")
        accs.append(classifier_accuracy(probe_spec, params, x[test_ids], y[test_ids]))
    return BlindCheckResult(overlap, float(np.mean(accs)))


# ---------------------------------------------------------------------------
# serialization


def write_vulnerability_csv(path: str | Path, scores: list[VulnerabilityScore], config_hash: str, master_seed: int) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# config_hash={config_hash} master_seed={master_seed}\n")
        writer = csv.writer(fh)
        writer.writerow(["target_id", "tau", "class"])
        for s in sorted(scores, key=lambda s: s.target_id):
            writer.writerow([s.target_id, repr(s.tau), s.label])


def read_vulnerability_csv(path: str | Path) -> list[VulnerabilityScore]:
    with open(path, newline="", encoding="utf-8") as fh:
        fh.readline()
        reader = csv.DictReader(fh)
        return [VulnerabilityScore(int(r["target_id"]), float(r["tau"]), r["class"]) for r in reader]


def write_composition(path: str | Path, comp: TargetComposition, config_hash: str) -> None:
    payload = {
        "config_hash": config_hash,
        "mode": comp.mode,
        "target_ids": list(comp.target_ids),
        "evaluated_ids": list(comp.evaluated_ids),
        "retained_canary_ids": list(comp.retained_canary_ids),
        "filler_ids": list(comp.filler_ids),
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_composition(path: str | Path) -> TargetComposition:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return TargetComposition(
        payload["mode"],
        tuple(payload["target_ids"]),
        tuple(payload["evaluated_ids"]),
        tuple(payload["retained_canary_ids"]),
        tuple(payload["filler_ids"]),
    )
