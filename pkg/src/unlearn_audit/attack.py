"""Per-sample likelihood-ratio tests over shadow observation distributions.

Per target and condition a one-dimensional Gaussian KDE is fitted over the
shadow signals; the audited model's query signal is then scored as a ratio of
densities. Privacy leakage compares the unlearned and held-out conditions,
efficacy compares unlearned against out via the query router, and two
baselines (a pooled single-feature population classifier and the
unlearned-vs-out ratio on a plain unlearned-model query) are provided for
comparison.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset
from .models import ModelSpec, ParamVector, SignalValue
from .shadow import ObservationStore, signal_map

DENSITY_FLOOR = 1e-12
BANDWIDTH_FLOOR = 1e-3
MEMBERSHIP_STATES = ("was_trained_and_unlearned", "never_trained")
TRUTH_LABELS = ("unlearned", "held-out")


@dataclass(frozen=True)
class DensityModel:
    """Gaussian-kernel density over one condition's observations."""

    points: np.ndarray
    bandwidth: float

    def __post_init__(self):
        if len(self.points) < 1:
            raise ValueError("density model needs at least one observation")
        if not np.isfinite(self.bandwidth) or self.bandwidth <= 0:
            raise ValueError("bandwidth must be finite and positive")

    def density(self, x) -> np.ndarray | float:
        x_arr = np.asarray(x, dtype=np.float64)
        z = (x_arr[..., None] - self.points) / self.bandwidth
        dens = np.exp(-0.5 * z * z).mean(axis=-1) / (self.bandwidth * np.sqrt(2.0 * np.pi))
        return float(dens) if np.ndim(x) == 0 else dens


def fit_kde(values, bandwidth: float | None = None) -> DensityModel:
    """Silverman-rule Gaussian KDE with a bandwidth floor.

    An explicit bandwidth skips the rule (and then a single point suffices).
    """
    points = np.asarray(values, dtype=np.float64).ravel()
    if bandwidth is None:
        if len(points) < 2:
            raise ValueError("need at least 2 values to fit a bandwidth")
        bandwidth = max(1.06 * float(points.std()) * len(points) ** (-0.2), BANDWIDTH_FLOOR)
    return DensityModel(points, float(bandwidth))


def density_ratio(x: float, numerator: DensityModel, denominator: DensityModel) -> float:
    num = max(float(numerator.density(x)), DENSITY_FLOOR)
    den = max(float(denominator.density(x)), DENSITY_FLOOR)
    return num / den


def leakage_score(query_signal: float, kde_unlearned: DensityModel, kde_heldout: DensityModel) -> float:
    """Privacy test: was the queried sample unlearned or never seen at all?"""
    return density_ratio(query_signal, kde_unlearned, kde_heldout)


def efficacy_score(query_signal: float, kde_unlearned: DensityModel, kde_out: DensityModel) -> float:
    """Efficacy test: does the routed query look unlearned or retrained?"""
    return density_ratio(query_signal, kde_unlearned, kde_out)


def ulira_score(query_signal: float, kde_unlearned: DensityModel, kde_out: DensityModel) -> float:
    """Baseline ratio unlearned-vs-retrained, always queried on the unlearned model."""
    return density_ratio(query_signal, kde_unlearned, kde_out)


AUX_TESTS = {
    "trained_leakage": ("in", "out"),
    "remained_leakage": ("remained", "held-out"),
}


def aux_ratio(test: str, query_signal: float, kdes: dict[str, DensityModel]) -> float:
    """Auxiliary ratio tests on the trained and unlearned models."""
    if test not in AUX_TESTS:
        raise ValueError(f"unknown auxiliary test {test!r}")
    num_cond, den_cond = AUX_TESTS[test]
    missing = [c for c in (num_cond, den_cond) if c not in kdes]
    if missing:
        raise ValueError(f"missing condition data for {test}: {missing}")
    return density_ratio(query_signal, kdes[num_cond], kdes[den_cond])


def target_kdes(store: ObservationStore) -> dict[int, dict[str, DensityModel]]:
    """Fit one KDE per (target, condition) with at least two observations."""
    fitted: dict[int, dict[str, DensityModel]] = {}
    for tid, conds in store.by_target().items():
        fitted[tid] = {c: fit_kde(v) for c, v in conds.items() if len(v) >= 2}
    return fitted


# ---------------------------------------------------------------------------
# query router


@dataclass(frozen=True)
class TestRouter:
    """Answers each target query from the unlearned or the retrained model,
    depending on whether the target was trained-and-unlearned or never trained.
    The caller sees only the signal, never which model produced it."""

    spec: ModelSpec
    unlearned: ParamVector
    retrained: ParamVector
    membership: dict[int, str]
    dataset: Dataset
    phi_kind: str

    def __post_init__(self):
        bad = {v for v in self.membership.values()} - set(MEMBERSHIP_STATES)
        if bad:
            raise ValueError(f"unknown membership states {sorted(bad)}")


def route_query(router: TestRouter, target_id: int) -> SignalValue:
    if target_id not in router.membership:
        raise KeyError(f"unknown target {target_id}")
    model = (
        router.unlearned
        if router.membership[target_id] == "was_trained_and_unlearned"
        else router.retrained
    )
    value = signal_map(router.spec, model, router.dataset, [target_id], router.phi_kind)[target_id]
    return SignalValue(value, router.phi_kind)


# ---------------------------------------------------------------------------
# population (average-case) baseline


@dataclass(frozen=True)
class PopulationClassifier:
    """Single-feature logistic model fitted on pooled condition signals."""

    weight: float
    bias: float
    center: float
    scale: float

    def probability(self, x) -> np.ndarray | float:
        z = self.weight * ((np.asarray(x, dtype=np.float64) - self.center) / self.scale) + self.bias
        p = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
        return float(p) if np.ndim(x) == 0 else p


def fit_population_classifier(
    positives: np.ndarray, negatives: np.ndarray, steps: int = 500, lr: float = 0.5
) -> PopulationClassifier:
    """Deterministic full-batch gradient descent on the logistic loss."""
    positives = np.asarray(positives, dtype=np.float64)
    negatives = np.asarray(negatives, dtype=np.float64)
    if len(positives) == 0 or len(negatives) == 0:
        raise ValueError("degenerate pooled data: both classes must be non-empty")
    x = np.concatenate([positives, negatives])
    t = np.concatenate([np.ones(len(positives)), np.zeros(len(negatives))])
    center = float(x.mean())
    scale = float(x.std()) or 1.0
    xs = (x - center) / scale
    w = b = 0.0
    for _ in range(steps):
        p = 1.0 / (1.0 + np.exp(-(w * xs + b)))
        w -= lr * float(((p - t) * xs).mean())
        b -= lr * float((p - t).mean())
    return PopulationClassifier(w, b, center, scale)


def population_attack(
    store: ObservationStore,
    condition_pair: tuple[str, str],
    queries: dict[int, float],
) -> dict[int, float]:
    """Average-case attack: pool signals across all targets for the two
    conditions, fit one classifier, and score each evaluation query."""
    pos_cond, neg_cond = condition_pair
    by_target = store.by_target()
    pos = np.concatenate([c[pos_cond] for c in by_target.values() if pos_cond in c] or [np.array([])])
    neg = np.concatenate([c[neg_cond] for c in by_target.values() if neg_cond in c] or [np.array([])])
    clf = fit_population_classifier(pos, neg)
    return {tid: float(clf.probability(x)) for tid, x in queries.items()}


# ---------------------------------------------------------------------------
# score records


@dataclass(frozen=True)
class ScoreRecord:
    """Per-target attack scores with the ground-truth evaluation bit."""

    target_id: int
    truth: str
    leakage: float
    efficacy: float
    ulira: float
    population: float

    def __post_init__(self):
        if self.truth not in TRUTH_LABELS:
            raise ValueError(f"unknown truth label {self.truth!r}")
        for name in ("leakage", "efficacy", "ulira", "population"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} score must be finite and non-negative")


SCORE_COLUMNS = ("target_id", "truth", "log_lambda", "log_psi", "log_ulira", "population_score")


def write_scores(path: str | Path, records: list[ScoreRecord], config_hash: str, master_seed: int) -> None:
    """Score CSV; ratio tests are stored as log-ratios for numeric stability."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# config_hash={config_hash} master_seed={master_seed}\n")
        writer = csv.writer(fh)
        writer.writerow(SCORE_COLUMNS)
        for r in sorted(records, key=lambda r: r.target_id):
            writer.writerow(
                [
                    r.target_id,
                    r.truth,
                    repr(float(np.log(r.leakage))),
                    repr(float(np.log(r.efficacy))),
                    repr(float(np.log(r.ulira))),
                    repr(r.population),
                ]
            )


def read_scores(path: str | Path) -> tuple[list[ScoreRecord], dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        first = fh.readline().strip()
        meta = dict(part.split("=", 1) for part in first.lstrip("# ").split(" ") if "=" in part)
        reader = csv.DictReader(fh)
        records = []
        for row in reader:
            records.append(
                ScoreRecord(
                    int(row["target_id"]),
                    row["truth"],
                    float(np.exp(float(row["log_lambda"]))),
                    float(np.exp(float(row["log_psi"]))),
                    float(np.exp(float(row["log_ulira"]))),
                    float(row["population_score"]),
                )
            )
    return records, meta
