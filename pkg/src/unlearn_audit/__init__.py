"""Per-sample privacy and efficacy auditing for inexact machine unlearning."""

__version__ = "0.1.0"

from .attack import (
    DensityModel,
    ScoreRecord,
    TestRouter,
    aux_ratio,
    efficacy_score,
    fit_kde,
    leakage_score,
    population_attack,
    route_query,
    ulira_score,
)
from .config import ExperimentConfig, load_config
from .data import DataPartition, Dataset, Sample, synth_blobs, synth_sequences
from .metrics import attack_accuracy, auc, gap_report, roc_curve, tpr_at_fpr
from .models import ModelSpec, ParamVector, SignalValue, init_params, phi_logit_confidence
from .pipeline import run_audit, run_grid_search, run_pre_attack
from .shadow import ObservationStore, RoleSchedule, build_schedule, merge_stores, run_round
from .targets import blind_check, compose_targets, score_vulnerability
from .training import TrainHyper, train
from .unlearn import UnlearnHyper, run_unlearning

__all__ = [
    "DensityModel",
    "ScoreRecord",
    "TestRouter",
    "aux_ratio",
    "efficacy_score",
    "fit_kde",
    "leakage_score",
    "population_attack",
    "route_query",
    "ulira_score",
    "ExperimentConfig",
    "load_config",
    "DataPartition",
    "Dataset",
    "Sample",
    "synth_blobs",
    "synth_sequences",
    "attack_accuracy",
    "auc",
    "gap_report",
    "roc_curve",
    "tpr_at_fpr",
    "ModelSpec",
    "ParamVector",
    "SignalValue",
    "init_params",
    "phi_logit_confidence",
    "run_audit",
    "run_grid_search",
    "run_pre_attack",
    "ObservationStore",
    "RoleSchedule",
    "build_schedule",
    "merge_stores",
    "run_round",
    "blind_check",
    "compose_targets",
    "score_vulnerability",
    "TrainHyper",
    "train",
    "UnlearnHyper",
    "run_unlearning",
]
