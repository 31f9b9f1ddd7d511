"""Experiment configuration: one human-editable TOML file drives the whole
pipeline. Validation reports field paths; hashes are canonical (stable under
key reordering) and split into a full config hash and a provenance hash that
ignores the unlearning section, so runs differing only in method remain
comparable.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .data import Dataset, synth_blobs, synth_sequences, load_csv
from .models import ModelSpec
from .training import TrainHyper
from .unlearn import SEQUENCE_METHODS, VECTOR_METHODS, UnlearnHyper
from ._rng import derive_seed
from .targets import MODES, TargetCounts


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "blobs"  # blobs | sequences | csv
    num_samples: int = 2000
    num_classes: int = 2
    dim: int = 2
    noise: float = 1.0
    outlier_fraction: float = 0.015
    mislabel_fraction: float = 0.05
    csv_path: str = ""
    feature_columns: tuple[str, ...] = ()
    label_column: str = "label"
    num_records: int = 500
    vocab: int = 64
    record_len: int = 12
    ngram_len: int = 7


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "mlp"  # linear | mlp | token-lm
    hidden_dim: int = 16
    activation: str = "tanh"
    context_window: int = 5  # token-lm only


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 300
    batch_size: int = 64
    learning_rate: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 0.0


@dataclass(frozen=True)
class ShadowConfig:
    num_models: int = 30
    attack_size: int = 400  # fixed attack-pool draw shared by the rounds
    extras_size: int = 50  # non-target slice mixed into each unlearn request


@dataclass(frozen=True)
class TargetsConfig:
    mode: str = "canary"
    num_targets: int = 24
    num_retained: int = 6
    num_fillers: int = 100
    fpr_threshold: float = 0.002  # pre-attack operating point for 'vulnerable'
    protected_band: float = 0.05  # tau distance from 1/2 counting as protected
    pre_attack_models: int = 15
    pre_attack_chunk: int = 126  # candidates scored per shadow batch (0 = all)


@dataclass(frozen=True)
class AttackConfig:
    phi: str = "auto"  # auto | logit-confidence | loss
    fpr_points: tuple[float, ...] = (0.01, 0.05)


@dataclass(frozen=True)
class UnlearnConfig:
    method: str = "ga_plus"
    grid: tuple[dict, ...] = field(default_factory=tuple)


@dataclass(frozen=True)
class RunConfig:
    master_seed: int = 7
    out_dir: str = "runs/toy"
    jobs: int = 1
    gap_margin: float = 0.05


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    shadow: ShadowConfig = field(default_factory=ShadowConfig)
    targets: TargetsConfig = field(default_factory=TargetsConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    unlearn: UnlearnConfig = field(default_factory=UnlearnConfig)
    run: RunConfig = field(default_factory=RunConfig)

    # ------------------------------------------------------------------
    def validate(self) -> None:
        ds, sh, tg, un = self.dataset, self.shadow, self.targets, self.unlearn
        if ds.kind not in ("blobs", "sequences", "csv"):
            raise ConfigError(f"dataset.kind: unknown kind {ds.kind!r}")
        if ds.kind == "csv":
            if not ds.csv_path:
                raise ConfigError("dataset.csv_path: required for csv datasets")
            if not Path(ds.csv_path).exists():
                raise ConfigError(f"dataset.csv_path: {ds.csv_path} does not exist")
            if not ds.feature_columns:
                raise ConfigError("dataset.feature_columns: required for csv datasets")
        if ds.kind == "sequences" and ds.ngram_len >= ds.record_len:
            raise ConfigError("dataset.ngram_len: must be smaller than dataset.record_len")
        if sh.num_models % 3 != 0 or sh.num_models <= 0:
            raise ConfigError("shadow.num_models: must be a positive multiple of 3")
        if tg.pre_attack_models % 3 != 0 or tg.pre_attack_models <= 0:
            raise ConfigError("targets.pre_attack_models: must be a positive multiple of 3")
        if tg.pre_attack_chunk < 0 or tg.pre_attack_chunk % 3 != 0:
            raise ConfigError("targets.pre_attack_chunk: must be a non-negative multiple of 3")
        if tg.mode not in MODES:
            raise ConfigError(f"targets.mode: unknown mode {tg.mode!r}")
        if tg.mode == "canary" and self.is_sequence:
            raise ConfigError("targets.mode: canary composition needs feature vectors")
        if not 0 < tg.fpr_threshold < 1:
            raise ConfigError("targets.fpr_threshold: must be in (0, 1)")
        allowed = SEQUENCE_METHODS if self.is_sequence else VECTOR_METHODS
        if un.method not in allowed:
            raise ConfigError(
                f"unlearn.method: {un.method!r} not usable with {ds.kind} data"
            )
        if not self.grid_hypers():
            raise ConfigError("unlearn.grid: must contain at least one entry")
        for i, entry in enumerate(un.grid):
            method = entry.get("method", un.method)
            if method not in allowed:
                raise ConfigError(f"unlearn.grid[{i}].method: {method!r} not usable here")
        if self.attack.phi not in ("auto", "logit-confidence", "loss"):
            raise ConfigError(f"attack.phi: unknown signal {self.attack.phi!r}")
        if self.is_sequence and self.phi_kind != "loss":
            raise ConfigError("attack.phi: sequence models support only 'loss'")
        for p in self.attack.fpr_points:
            if not 0 < p < 1:
                raise ConfigError("attack.fpr_points: entries must be in (0, 1)")
        if self.run.jobs < 1:
            raise ConfigError("run.jobs: must be at least 1")

    # ------------------------------------------------------------------
    @property
    def is_sequence(self) -> bool:
        return self.dataset.kind == "sequences"

    @property
    def phi_kind(self) -> str:
        if self.attack.phi != "auto":
            return self.attack.phi
        return "loss" if self.is_sequence else "logit-confidence"

    def build_dataset(self) -> Dataset:
        ds = self.dataset
        seed = derive_seed(self.run.master_seed, "dataset")
        if ds.kind == "blobs":
            return synth_blobs(
                ds.num_samples,
                ds.num_classes,
                ds.noise,
                ds.outlier_fraction,
                ds.mislabel_fraction,
                seed,
                ds.dim,
            )
        if ds.kind == "sequences":
            return synth_sequences(ds.num_records, ds.vocab, ds.record_len, ds.ngram_len, seed)
        return load_csv(ds.csv_path, list(ds.feature_columns), ds.label_column)

    def model_spec(self, dataset: Dataset) -> ModelSpec:
        m = self.model
        if dataset.kind == "sequence":
            return ModelSpec("token-lm", m.context_window, m.hidden_dim, dataset.num_classes)
        hidden = 0 if m.kind == "linear" else m.hidden_dim
        return ModelSpec(m.kind, dataset.feature_dim, hidden, dataset.num_classes, m.activation)

    def train_hyper(self, seed: int) -> TrainHyper:
        t = self.training
        return TrainHyper(t.epochs, t.batch_size, t.learning_rate, t.momentum, t.weight_decay, seed)

    def grid_hypers(self) -> list[UnlearnHyper]:
        entries = self.unlearn.grid or ({},)
        hypers = []
        for entry in entries:
            kwargs = dict(entry)
            kwargs.setdefault("method", self.unlearn.method)
            try:
                hypers.append(UnlearnHyper(**kwargs))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"unlearn.grid: {exc}") from None
        return hypers

    def target_counts(self) -> TargetCounts:
        t = self.targets
        return TargetCounts(t.num_targets, t.num_retained, t.num_fillers)

    # ------------------------------------------------------------------
    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        return _hash_dict(self.to_dict())

    def provenance_dict(self) -> dict:
        d = self.to_dict()
        d.pop("unlearn")
        d["run"] = {"master_seed": d["run"]["master_seed"]}
        return d

    def provenance_hash(self) -> str:
        return _hash_dict(self.provenance_dict())


def _hash_dict(d: dict) -> str:
    canonical = json.dumps(d, sort_keys=True, default=list)
    return hashlib.blake2b(canonical.encode("utf-8"), digest_size=8).hexdigest()


_SECTIONS = {
    "dataset": DatasetConfig,
    "model": ModelConfig,
    "training": TrainingConfig,
    "shadow": ShadowConfig,
    "targets": TargetsConfig,
    "attack": AttackConfig,
    "unlearn": UnlearnConfig,
    "run": RunConfig,
}


def config_from_dict(raw: dict) -> ExperimentConfig:
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        section = dict(raw.get(name, {}))
        valid_fields = {f for f in cls.__dataclass_fields__}
        bad = set(section) - valid_fields
        if bad:
            raise ConfigError(f"{name}: unknown keys {sorted(bad)}")
        for key, value in list(section.items()):
            if isinstance(value, list):
                section[key] = tuple(
                    dict(v) if isinstance(v, dict) else v for v in value
                )
        try:
            kwargs[name] = cls(**section)
        except TypeError as exc:
            raise ConfigError(f"{name}: {exc}") from None
    cfg = ExperimentConfig(**kwargs)
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(raw)


DEFAULT_CONFIG_TOML = """\
# unlearn-audit experiment configuration.
# Every value shown is the default; the pipeline is a pure function of this
# file plus run.master_seed.

[dataset]
kind = "blobs"              # blobs | sequences | csv
num_samples = 2000
num_classes = 2
dim = 2
noise = 1.0
outlier_fraction = 0.015    # sparse far ring points (memorization bait)
mislabel_fraction = 0.05    # fringe label flips (memorization bait)
# csv_path = "data.csv"     # csv datasets only
# feature_columns = ["f1", "f2"]
# label_column = "label"
num_records = 500           # sequence datasets only
vocab = 64
record_len = 12
ngram_len = 7

[model]
kind = "mlp"                # linear | mlp (token-lm is implied by sequences)
hidden_dim = 16
activation = "tanh"
context_window = 5          # token-lm context length

[training]
epochs = 300
batch_size = 64
learning_rate = 0.2
momentum = 0.9
weight_decay = 0.0

[shadow]
num_models = 30             # must be divisible by 3
attack_size = 400           # fixed attack-pool draw shared by all rounds
extras_size = 50            # non-target samples mixed into each unlearn request

[targets]
mode = "canary"             # random | vulnerable_only | protected_only |
                            # vulnerable_plus_protected | canary
num_targets = 24
num_retained = 6            # canary mode: vulnerable samples kept in the model
num_fillers = 100           # extra forget-set samples, never scored
fpr_threshold = 0.002       # pre-attack operating point for 'vulnerable'
protected_band = 0.05
pre_attack_models = 15      # shadow models per target-scoring batch
pre_attack_chunk = 126      # candidates scored per batch (0 = all at once)

[attack]
phi = "auto"                # auto | logit-confidence | loss
fpr_points = [0.01, 0.05]

[unlearn]
method = "ga_plus"

[[unlearn.grid]]
learning_rate = 0.05
ascent_steps = 8
refine_epochs = 1

[[unlearn.grid]]
learning_rate = 0.1
ascent_steps = 16
refine_epochs = 1

[run]
master_seed = 7
out_dir = "runs/toy"
jobs = 1
gap_margin = 0.05
"""
