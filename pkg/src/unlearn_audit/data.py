"""Dataset synthesis, ingestion and deterministic partitioning.

Vector datasets are Gaussian class blobs with optional far-out points and
label flips standing in for highly memorized samples. Sequence datasets are
random token records whose final n-gram is the removal target.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._rng import derive_seed, rng_for

CENTROID_RADIUS = 4.0
OUTLIER_RADIUS_RANGE = (1.5, 1.9)  # multiples of CENTROID_RADIUS


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    sample_id: int
    features: np.ndarray  # float features (vector) or int tokens (sequence)
    label: object  # class index, or target n-gram array for sequences
    is_canary: bool = False
    is_mislabeled: bool = False

    @property
    def flagged(self) -> bool:
        return self.is_canary or self.is_mislabeled


@dataclass
class Dataset:
    kind: str  # "vector" | "sequence"
    samples: list[Sample]
    num_classes: int  # class count, or vocabulary size
    feature_dim: int  # feature dimension, or record length
    ngram_len: int = 0
    _by_id: dict[int, Sample] | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        ids = [s.sample_id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate sample ids")

    def by_id(self, sample_id: int) -> Sample:
        if self._by_id is None:
            object.__setattr__(self, "_by_id", {s.sample_id: s for s in self.samples})
        return self._by_id[sample_id]

    @property
    def ids(self) -> list[int]:
        return [s.sample_id for s in self.samples]

    def subset(self, ids) -> list[Sample]:
        return [self.by_id(i) for i in sorted(ids)]

    def feature_matrix(self, ids) -> tuple[np.ndarray, np.ndarray]:
        """(features, labels) arrays for the given ids, in sorted-id order."""
        rows = self.subset(ids)
        x = np.stack([s.features for s in rows]).astype(np.float64)
        y = np.array([s.label for s in rows], dtype=np.int64)
        return x, y

    def token_records(self, ids) -> list[np.ndarray]:
        return [s.features for s in self.subset(ids)]


@dataclass(frozen=True)
class DataPartition:
    """Training-side split for one audited or shadow run."""

    train_ids: frozenset[int]
    forget_ids: frozenset[int]
    remain_ids: frozenset[int]
    attack_ids: frozenset[int]
    out_ids: frozenset[int]

    def __post_init__(self):
        if not self.forget_ids <= self.train_ids:
            raise DataError("forget_ids must be a subset of train_ids")
        if self.remain_ids != self.train_ids - self.forget_ids:
            raise DataError("remain_ids must equal train_ids minus forget_ids")
        if self.out_ids & self.train_ids:
            raise DataError("out_ids must be disjoint from train_ids")


def make_partition(train_ids, forget_ids, attack_ids=(), out_ids=()) -> DataPartition:
    train = frozenset(train_ids)
    forget = frozenset(forget_ids)
    return DataPartition(train, forget, train - forget, frozenset(attack_ids), frozenset(out_ids))


def synth_blobs(
    num_samples: int,
    num_classes: int,
    noise: float,
    outlier_fraction: float,
    mislabel_fraction: float,
    seed: int,
    dim: int = 2,
) -> Dataset:
    """Gaussian class blobs with flagged outliers and flagged label flips.

    Outliers sit on a sparse ring far outside every class blob, evenly spaced
    with alternating labels, so a model that never trained on one extrapolates
    a confident (usually wrong) answer there while fitting one requires a
    dedicated local carve: genuine per-sample memorization. Label flips are
    applied to the most ambiguous points (farthest from their class centroid).
    Both kinds are the memorization-prone inventory that downstream target
    selection re-scores empirically.
    """
    for name, frac in (("outlier_fraction", outlier_fraction), ("mislabel_fraction", mislabel_fraction)):
        if not 0.0 <= frac <= 1.0:
            raise DataError(f"{name} must be in [0, 1]")
    rng = rng_for("blobs", seed)
    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
    centroids = np.zeros((num_classes, dim))
    centroids[:, 0] = CENTROID_RADIUS * np.cos(angles)
    centroids[:, 1 % dim] = CENTROID_RADIUS * np.sin(angles) if dim > 1 else centroids[:, 0]

    labels = np.arange(num_samples) % num_classes
    points = centroids[labels] + noise * rng.standard_normal((num_samples, dim))

    n_outlier = int(round(outlier_fraction * num_samples))
    n_mislabel = int(round(mislabel_fraction * num_samples))
    outlier_idx = rng.permutation(num_samples)[:n_outlier]

    lo, hi = OUTLIER_RADIUS_RANGE
    for rank, i in enumerate(np.sort(outlier_idx)):
        angle = 2.0 * np.pi * rank / max(n_outlier, 1) + rng.uniform(-0.08, 0.08)
        direction = np.zeros(dim)
        direction[0] = np.cos(angle)
        direction[1 % dim] = np.sin(angle)
        points[i] = CENTROID_RADIUS * rng.uniform(lo, hi) * direction
        labels[i] = rank % num_classes

    # flips hit the most ambiguous points: farthest from their class centroid
    dist = np.linalg.norm(points - centroids[labels], axis=1)
    dist[np.sort(outlier_idx)] = -np.inf
    mislabel_idx = np.argsort(-dist, kind="stable")[:n_mislabel]
    for i in mislabel_idx:
        labels[i] = (labels[i] + 1 + rng.integers(num_classes - 1)) % num_classes

    outliers = set(outlier_idx.tolist())
    mislabels = set(mislabel_idx.tolist())
    samples = [
        Sample(i, points[i].copy(), int(labels[i]), i in outliers, i in mislabels)
        for i in range(num_samples)
    ]
    return Dataset("vector", samples, num_classes, dim)


def synth_sequences(
    num_records: int, vocab: int, record_len: int, ngram_len: int, seed: int
) -> Dataset:
    """Random token records; the final ngram_len tokens are the removal target."""
    if ngram_len >= record_len:
        raise DataError("ngram_len must be smaller than record_len")
    rng = rng_for("sequences", seed)
    samples = []
    for i in range(num_records):
        tokens = rng.integers(0, vocab, size=record_len, dtype=np.int64)
        samples.append(Sample(i, tokens, tokens[-ngram_len:].copy()))
    return Dataset("sequence", samples, vocab, record_len, ngram_len)


def target_span(dataset: Dataset, sample: Sample) -> tuple[np.ndarray, np.ndarray]:
    """(prefix, target n-gram) of a sequence sample."""
    return sample.features[: -dataset.ngram_len], sample.features[-dataset.ngram_len :]


@dataclass(frozen=True)
class EvalSplit:
    trained_unlearned: tuple[int, ...]
    trained_remained: tuple[int, ...]
    never_trained: tuple[int, ...]


def split_target_for_evaluation(target_ids, seed: int) -> EvalSplit:
    """Disjoint equal thirds of the target set, deterministic in the seed.

    A non-divisible remainder is dropped deterministically (highest ids).
    """
    ids = sorted(target_ids)
    drop = len(ids) % 3
    if drop:
        ids = ids[: len(ids) - drop]
    rng = rng_for("eval-split", seed)
    ids = [ids[i] for i in rng.permutation(len(ids))]
    third = len(ids) // 3
    return EvalSplit(
        tuple(sorted(ids[:third])),
        tuple(sorted(ids[third : 2 * third])),
        tuple(sorted(ids[2 * third :])),
    )


def load_csv(path: str | Path, feature_columns: list[str], label_column: str) -> Dataset:
    """Read a UTF-8 CSV with a header row into a vector dataset."""
    path = Path(path)
    samples = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: no rows")
        missing = [c for c in feature_columns + [label_column] if c not in reader.fieldnames]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        for row_index, row in enumerate(reader):
            line_no = row_index + 2  # header is line 1
            try:
                feats = np.array([float(row[c]) for c in feature_columns], dtype=np.float64)
                label = int(row[label_column])
            except (TypeError, ValueError) as exc:
                raise DataError(f"{path}: malformed row at line {line_no}: {exc}") from None
            if not np.all(np.isfinite(feats)):
                raise DataError(f"{path}: non-finite feature at line {line_no}")
            if label < 0:
                raise DataError(f"{path}: negative label at line {line_no}")
            samples.append(Sample(derive_seed("csv-row", row_index), feats, label))
    if not samples:
        raise DataError(f"{path}: no rows")
    return Dataset("vector", samples, max(s.label for s in samples) + 1, len(feature_columns))


def save_dataset(path: str | Path, dataset: Dataset) -> None:
    """JSON-lines serialization: one meta header line, then one sample per line."""
    with open(path, "w", encoding="utf-8") as fh:
        meta = {
            "kind": dataset.kind,
            "num_classes": dataset.num_classes,
            "feature_dim": dataset.feature_dim,
            "ngram_len": dataset.ngram_len,
        }
        fh.write(json.dumps(meta, sort_keys=True) + "\n")
        for s in dataset.samples:
            row = {
                "id": s.sample_id,
                "features": s.features.tolist(),
                "label": s.label.tolist() if isinstance(s.label, np.ndarray) else s.label,
                "is_canary": s.is_canary,
                "is_mislabeled": s.is_mislabeled,
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_dataset(path: str | Path) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        meta = json.loads(fh.readline())
        samples = []
        for line in fh:
            row = json.loads(line)
            if meta["kind"] == "sequence":
                features = np.array(row["features"], dtype=np.int64)
                label = np.array(row["label"], dtype=np.int64)
            else:
                features = np.array(row["features"], dtype=np.float64)
                label = int(row["label"])
            samples.append(Sample(row["id"], features, label, row["is_canary"], row["is_mislabeled"]))
    return Dataset(meta["kind"], samples, meta["num_classes"], meta["feature_dim"], meta["ngram_len"])
