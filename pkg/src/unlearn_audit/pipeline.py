"""End-to-end orchestration: target scoring, composition, the audited
models, shadow rounds, per-sample scoring and report emission.

Every random draw is derived from (master seed, step label), so a full run is
a pure function of the config file; reruns and resumed runs produce identical
artifacts byte for byte.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ._rng import derive_seed, rng_for
from .attack import (
    ScoreRecord,
    TestRouter,
    aux_ratio,
    efficacy_score,
    leakage_score,
    population_attack,
    target_kdes,
    ulira_score,
    write_scores,
)
from .config import ConfigError, ExperimentConfig
from .data import DataPartition, Dataset, make_partition, split_target_for_evaluation
from .metrics import (
    GapReport,
    emit_report,
    gap_report,
    ks_critical,
    metric_rows,
    roc_curve,
    records_to_scores,
    two_sample_ks,
)
from .models import ParamVector, save_params
from .shadow import (
    ObservationStore,
    build_schedule,
    open_or_create_store,
    plan_rounds,
    run_rounds,
    signal_map,
)
from .targets import (
    TargetComposition,
    VulnerabilityScore,
    blind_check,
    compose_targets,
    read_vulnerability_csv,
    score_vulnerability,
    write_composition,
    write_vulnerability_csv,
)
from .training import DivergenceError, accuracy, train
from .unlearn import UnlearnHyper, run_unlearning, unlearn_retrain


class ComputeError(RuntimeError):
    pass


@dataclass(frozen=True)
class AuditSetup:
    """Resolved id sets for one audited run."""

    unlearned_ids: tuple[int, ...]  # targets trained and then unlearned
    remained_ids: tuple[int, ...]  # targets trained and kept
    heldout_ids: tuple[int, ...]  # targets never trained
    scored_ids: tuple[int, ...]  # evaluated targets with a truth bit
    schedule_ids: tuple[int, ...]  # shadow-round targets (incl. padding)
    pad_ids: tuple[int, ...]
    backbone_ids: tuple[int, ...]
    pool_ids: tuple[int, ...]  # shadow attack pool
    test_ids: tuple[int, ...]
    partition: DataPartition


def prepare_setup(cfg: ExperimentConfig, dataset: Dataset, comp: TargetComposition) -> AuditSetup:
    master = cfg.run.master_seed
    evaluated = sorted(comp.evaluated_ids)
    extra_targets = sorted(set(comp.target_ids) - set(evaluated))

    if comp.mode == "canary":
        ids = list(evaluated)
        if len(ids) % 2:
            ids = ids[:-1]  # drop the highest id to keep the halves balanced
        perm = rng_for("eval-split", master).permutation(len(ids))
        half = len(ids) // 2
        unlearned = sorted(ids[i] for i in perm[:half])
        heldout = sorted(ids[i] for i in perm[half:])
        remained: list[int] = []
        scored = sorted(unlearned + heldout)
    else:
        unlearned, remained, heldout, scored = [], [], [], []
        for name, stratum in (("evaluated", evaluated), ("extra", extra_targets)):
            if not stratum:
                continue
            split = split_target_for_evaluation(stratum, derive_seed(master, "eval-split", name))
            unlearned += split.trained_unlearned
            remained += split.trained_remained
            heldout += split.never_trained
            if name == "evaluated":
                scored = sorted(split.trained_unlearned + split.never_trained)
        unlearned, remained, heldout = sorted(unlearned), sorted(remained), sorted(heldout)

    reserved = set(comp.target_ids) | set(comp.retained_canary_ids) | set(comp.filler_ids)
    free = sorted(set(dataset.ids) - reserved)

    need_pad = (3 - len(comp.target_ids) % 3) % 3
    pad_rng = rng_for("schedule-pad", master)
    pads = sorted(int(free[i]) for i in pad_rng.permutation(len(free))[:need_pad])
    schedule_ids = tuple(sorted(set(comp.target_ids) | set(pads)))

    pool = sorted(set(free) - set(pads))
    backbone_rng = rng_for("audit-backbone", master)
    take = min(cfg.shadow.attack_size, len(pool))
    backbone = sorted(int(pool[i]) for i in backbone_rng.permutation(len(pool))[:take])
    test_ids = tuple(sorted(set(pool) - set(backbone)))

    train_ids = set(unlearned) | set(remained) | set(comp.retained_canary_ids) | set(comp.filler_ids) | set(backbone)
    forget_ids = set(unlearned) | set(comp.filler_ids)
    out_ids = set(dataset.ids) - train_ids
    partition = make_partition(train_ids, forget_ids, backbone, out_ids)

    return AuditSetup(
        tuple(unlearned),
        tuple(remained),
        tuple(heldout),
        tuple(scored),
        schedule_ids,
        tuple(pads),
        tuple(backbone),
        tuple(pool),
        test_ids,
        partition,
    )


# ---------------------------------------------------------------------------
# target scoring (pre-attack)


def run_pre_attack(
    cfg: ExperimentConfig,
    dataset: Dataset,
    out_dir: Path,
    jobs: int = 1,
    resume: bool = False,
) -> list[VulnerabilityScore]:
    """Shadow run with no-op unlearning over every sample; in/out scoring.

    Candidates are scored in disjoint chunks so each shadow model carries only
    a small memorization load; a chunk's attack pool is a fixed draw from the
    rest of the dataset. A trailing remainder smaller than 3 stays unscored.
    """
    master = cfg.run.master_seed
    candidates = sorted(dataset.ids)
    chunk_size = cfg.targets.pre_attack_chunk or len(candidates) - len(candidates) % 3
    n_models = cfg.targets.pre_attack_models
    store = open_or_create_store(
        out_dir / "pre_store.jsonl", cfg.config_hash(), master, cfg.phi_kind, resume
    )
    shuffled = [candidates[i] for i in rng_for("pre-chunks", master).permutation(len(candidates))]
    chunk_index = 0
    for start in range(0, len(shuffled), chunk_size):
        chunk = sorted(shuffled[start : start + chunk_size])
        usable = len(chunk) - len(chunk) % 3
        if usable == 0:
            continue
        chunk = chunk[:usable]
        schedule = build_schedule(chunk, n_models, derive_seed(master, "pre-schedule", chunk_index))
        rest = sorted(set(dataset.ids) - set(chunk))
        take = min(cfg.shadow.attack_size, len(rest))
        draw = rng_for("pre-attack-pool", master, chunk_index).permutation(len(rest))[:take]
        attack = sorted(rest[i] for i in draw)
        plans = plan_rounds(
            schedule,
            attack,
            cfg.shadow.extras_size,
            (),
            cfg.model_spec(dataset),
            cfg.train_hyper(seed=0),
            UnlearnHyper(method="identity"),
            cfg.phi_kind,
            derive_seed(master, "pre-attack"),
            index_offset=chunk_index * n_models,
        )
        run_rounds(plans, dataset, store, jobs, out_dir / "pre_store.jsonl")
        chunk_index += 1
    scores = score_vulnerability(store, cfg.targets.fpr_threshold, cfg.targets.protected_band)
    write_vulnerability_csv(out_dir / "vulnerability.csv", scores, cfg.config_hash(), master)
    return scores


def load_or_run_pre_attack(
    cfg: ExperimentConfig, dataset: Dataset, out_dir: Path, jobs: int, resume: bool
) -> list[VulnerabilityScore] | None:
    if cfg.targets.mode == "random":
        return None
    path = out_dir / "vulnerability.csv"
    if path.exists():
        return read_vulnerability_csv(path)
    return run_pre_attack(cfg, dataset, out_dir, jobs, resume=resume)


# ---------------------------------------------------------------------------
# audited models


@dataclass
class AuditedModels:
    initial: ParamVector
    unlearned: ParamVector
    retrained: ParamVector


def train_audited_models(
    cfg: ExperimentConfig,
    dataset: Dataset,
    setup: AuditSetup,
    hyper: UnlearnHyper,
    seed_label: str = "audit",
) -> AuditedModels:
    master = cfg.run.master_seed
    spec = cfg.model_spec(dataset)
    initial = train(
        spec,
        dataset,
        setup.partition.train_ids,
        cfg.train_hyper(derive_seed(master, seed_label, "train")),
        tag="initial",
        label=f"{seed_label}-train",
    )
    unlearned = run_unlearning(
        spec,
        initial,
        dataset,
        setup.partition,
        replace(hyper, seed=derive_seed(master, seed_label, "unlearn")),
        cfg.train_hyper(derive_seed(master, seed_label, "train")),
    )
    retrained = unlearn_retrain(
        spec,
        dataset,
        setup.partition,
        cfg.train_hyper(derive_seed(master, seed_label, "oracle")),
        derive_seed(master, seed_label, "oracle"),
    )
    return AuditedModels(initial, unlearned, retrained)


# ---------------------------------------------------------------------------
# full audit


@dataclass
class AuditResult:
    config: ExperimentConfig
    hyper: UnlearnHyper
    dataset: Dataset
    composition: TargetComposition
    setup: AuditSetup
    models: AuditedModels
    store: ObservationStore
    records: list[ScoreRecord]
    rocs: dict
    metric_rows: list[dict]
    gaps: GapReport
    vulnerability: list[VulnerabilityScore] | None
    out_dir: Path
    elapsed_seconds: float


def compute_records(
    cfg: ExperimentConfig,
    dataset: Dataset,
    setup: AuditSetup,
    models: AuditedModels,
    store: ObservationStore,
) -> tuple[list[ScoreRecord], dict[int, dict]]:
    """Per-target scores for every attack, plus auxiliary ratio tests."""
    spec = cfg.model_spec(dataset)
    phi = cfg.phi_kind
    target_ids = sorted(set(setup.unlearned_ids) | set(setup.remained_ids) | set(setup.heldout_ids))
    sig_unlearned = signal_map(spec, models.unlearned, dataset, target_ids, phi)
    sig_initial = signal_map(spec, models.initial, dataset, target_ids, phi)

    membership = {tid: "was_trained_and_unlearned" for tid in setup.unlearned_ids}
    membership.update({tid: "never_trained" for tid in setup.heldout_ids})
    router = TestRouter(spec, models.unlearned, models.retrained, membership, dataset, phi)
    sig_retrained = signal_map(spec, models.retrained, dataset, setup.heldout_ids, phi)
    routed = {
        tid: (sig_unlearned[tid] if membership[tid] == "was_trained_and_unlearned" else sig_retrained[tid])
        for tid in setup.scored_ids
    }

    kdes = target_kdes(store)
    queries = {tid: sig_unlearned[tid] for tid in setup.scored_ids}
    population = population_attack(store, ("unlearned", "held-out"), queries)

    records = []
    aux: dict[int, dict] = {}
    unlearned_set = set(setup.unlearned_ids)
    for tid in setup.scored_ids:
        conds = kdes.get(tid, {})
        for needed in ("unlearned", "held-out", "out"):
            if needed not in conds:
                raise ComputeError(f"target {tid}: missing {needed!r} observations in the store")
        truth = "unlearned" if tid in unlearned_set else "held-out"
        records.append(
            ScoreRecord(
                tid,
                truth,
                leakage_score(sig_unlearned[tid], conds["unlearned"], conds["held-out"]),
                efficacy_score(routed[tid], conds["unlearned"], conds["out"]),
                ulira_score(sig_unlearned[tid], conds["unlearned"], conds["out"]),
                population[tid],
            )
        )
        aux[tid] = {"trained_leakage": aux_ratio("trained_leakage", sig_initial[tid], conds)}
    for tid in setup.remained_ids:
        conds = kdes.get(tid, {})
        if "remained" in conds and "held-out" in conds:
            aux.setdefault(tid, {})["remained_leakage"] = aux_ratio(
                "remained_leakage", sig_unlearned[tid], conds
            )
    _ = router  # routing behaviour is exercised directly in tests
    return records, aux


def vulnerable_id_set(
    dataset: Dataset, vulnerability: list[VulnerabilityScore] | None
) -> set[int]:
    """Empirically vulnerable ids when scored, flagged synth ids otherwise."""
    if vulnerability is not None:
        return {s.target_id for s in vulnerability if s.label == "vulnerable"}
    return {s.sample_id for s in dataset.samples if s.flagged}


def run_audit(
    cfg: ExperimentConfig,
    hyper: UnlearnHyper | None = None,
    out_dir: str | Path | None = None,
    jobs: int | None = None,
    resume: bool = False,
) -> AuditResult:
    started = time.monotonic()
    cfg.validate()
    out = Path(out_dir if out_dir is not None else cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = cfg.run.jobs if jobs is None else jobs
    hyper = hyper if hyper is not None else cfg.grid_hypers()[0]
    master = cfg.run.master_seed

    dataset = cfg.build_dataset()
    vulnerability = load_or_run_pre_attack(cfg, dataset, out, jobs, resume)
    comp = compose_targets(
        vulnerability, dataset, cfg.targets.mode, cfg.target_counts(), derive_seed(master, "compose")
    )
    write_composition(out / "composition.json", comp, cfg.config_hash())
    setup = prepare_setup(cfg, dataset, comp)
    spec = cfg.model_spec(dataset)

    models = train_audited_models(cfg, dataset, setup, hyper)
    for name, params in (
        ("model_initial", models.initial),
        ("model_unlearned", models.unlearned),
        ("model_retrained", models.retrained),
    ):
        save_params(out / f"{name}.params", spec, params)

    schedule = build_schedule(setup.schedule_ids, cfg.shadow.num_models, derive_seed(master, "schedule"))
    plans = plan_rounds(
        schedule,
        setup.backbone_ids,
        cfg.shadow.extras_size,
        comp.retained_canary_ids,
        spec,
        cfg.train_hyper(seed=0),
        hyper,
        cfg.phi_kind,
        derive_seed(master, "shadow"),
    )
    store = open_or_create_store(out / "store.jsonl", cfg.config_hash(), master, cfg.phi_kind, resume)
    run_rounds(plans, dataset, store, jobs, out / "store.jsonl")

    records, aux = compute_records(cfg, dataset, setup, models, store)
    per_attack = records_to_scores(records)
    rocs = {name: roc_curve(scores, truth) for name, (scores, truth) in per_attack.items()}

    gaps = gap_report(
        {hyper.method: models.unlearned, "retrain": models.retrained},
        spec,
        dataset,
        setup.partition,
        setup.test_ids,
        vulnerable_id_set(dataset, vulnerability),
        cfg.run.gap_margin,
    )
    emit_report(records, rocs, gaps, out, cfg.config_hash(), master, cfg.attack.fpr_points)
    _write_aux_csv(out / "aux_scores.csv", aux, cfg.config_hash())
    _write_ks_csv(out / "ks_heldout_vs_out.csv", store, setup.scored_ids, cfg.config_hash())
    if comp.mode == "canary" and dataset.kind == "vector":
        blind = blind_check(setup.unlearned_ids, setup.heldout_ids, dataset)
        (out / "blind_check.json").write_text(
            json.dumps(
                {
                    "config_hash": cfg.config_hash(),
                    "label_overlap": blind.label_overlap,
                    "probe_accuracy": blind.probe_accuracy,
                },
                indent=2,
                sort_keys=True,
            )
            + "\n",
            encoding="utf-8",
        )

    elapsed = time.monotonic() - started
    result = AuditResult(
        cfg,
        hyper,
        dataset,
        comp,
        setup,
        models,
        store,
        records,
        rocs,
        metric_rows(rocs, cfg.attack.fpr_points),
        gaps,
        vulnerability,
        out,
        elapsed,
    )
    _write_manifest(out, cfg, hyper, elapsed)
    return result


def _write_manifest(out: Path, cfg: ExperimentConfig, hyper: UnlearnHyper, elapsed: float) -> None:
    manifest = {
        "config_hash": cfg.config_hash(),
        "provenance_hash": cfg.provenance_hash(),
        "provenance": cfg.provenance_dict(),
        "master_seed": cfg.run.master_seed,
        "method": hyper.method,
        "hyper": hyper.__dict__,
        "phi_kind": cfg.phi_kind,
        "elapsed_seconds": elapsed,
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _write_aux_csv(path: Path, aux: dict[int, dict], config_hash: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        fh.write("target_id,log_trained_leakage,log_remained_leakage\n")
        for tid in sorted(aux):
            row = aux[tid]
            t = row.get("trained_leakage")
            r = row.get("remained_leakage")
            fh.write(
                f"{tid},{'' if t is None else repr(float(np.log(t)))},"
                f"{'' if r is None else repr(float(np.log(r)))}\n"
            )


def _write_ks_csv(path: Path, store: ObservationStore, scored_ids, config_hash: str) -> None:
    """Held-out vs out divergence per target: the retrain-assumption check."""
    by_target = store.by_target()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        fh.write("target_id,ks_statistic,critical_5pct,exceeds\n")
        for tid in sorted(scored_ids):
            conds = by_target.get(tid, {})
            if "held-out" not in conds or "out" not in conds:
                continue
            stat = two_sample_ks(conds["held-out"], conds["out"])
            crit = ks_critical(len(conds["held-out"]), len(conds["out"]))
            fh.write(f"{tid},{stat!r},{crit!r},{int(stat > crit)}\n")


def run_shadows_only(
    cfg: ExperimentConfig,
    hyper: UnlearnHyper | None = None,
    out_dir: str | Path | None = None,
    jobs: int | None = None,
    resume: bool = False,
) -> ObservationStore:
    """Build (or resume) the shadow observation store without the audit step."""
    cfg.validate()
    out = Path(out_dir if out_dir is not None else cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = cfg.run.jobs if jobs is None else jobs
    hyper = hyper if hyper is not None else cfg.grid_hypers()[0]
    master = cfg.run.master_seed

    dataset = cfg.build_dataset()
    vulnerability = load_or_run_pre_attack(cfg, dataset, out, jobs, resume)
    comp = compose_targets(
        vulnerability, dataset, cfg.targets.mode, cfg.target_counts(), derive_seed(master, "compose")
    )
    write_composition(out / "composition.json", comp, cfg.config_hash())
    setup = prepare_setup(cfg, dataset, comp)
    schedule = build_schedule(setup.schedule_ids, cfg.shadow.num_models, derive_seed(master, "schedule"))
    plans = plan_rounds(
        schedule,
        setup.backbone_ids,
        cfg.shadow.extras_size,
        comp.retained_canary_ids,
        cfg.model_spec(dataset),
        cfg.train_hyper(seed=0),
        hyper,
        cfg.phi_kind,
        derive_seed(master, "shadow"),
    )
    store = open_or_create_store(out / "store.jsonl", cfg.config_hash(), master, cfg.phi_kind, resume)
    return run_rounds(plans, dataset, store, jobs, out / "store.jsonl")


# ---------------------------------------------------------------------------
# grid search


def run_grid_search(
    cfg: ExperimentConfig,
    out_dir: str | Path | None = None,
    jobs: int | None = None,
    resume: bool = False,
) -> tuple[UnlearnHyper, list[dict]]:
    """Pick the grid entry whose accuracies best match the retrain oracle.

    The objective sums |acc(unlearned) - acc(retrained)| over the forget,
    remain and test sets on a dedicated audit model; ties break toward the
    lower grid index.
    """
    cfg.validate()
    out = Path(out_dir if out_dir is not None else cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = cfg.run.jobs if jobs is None else jobs
    master = cfg.run.master_seed

    dataset = cfg.build_dataset()
    vulnerability = load_or_run_pre_attack(cfg, dataset, out, jobs, resume)
    comp = compose_targets(
        vulnerability, dataset, cfg.targets.mode, cfg.target_counts(), derive_seed(master, "compose")
    )
    setup = prepare_setup(cfg, dataset, comp)
    spec = cfg.model_spec(dataset)

    initial = train(
        spec,
        dataset,
        setup.partition.train_ids,
        cfg.train_hyper(derive_seed(master, "grid", "train")),
        label="grid-train",
    )
    oracle_seed = derive_seed(master, "grid", "unlearn")
    retrained = unlearn_retrain(
        spec, dataset, setup.partition, cfg.train_hyper(oracle_seed), oracle_seed
    )
    base = {
        "forget": accuracy(spec, retrained, dataset, setup.partition.forget_ids),
        "remain": accuracy(spec, retrained, dataset, setup.partition.remain_ids),
        "test": accuracy(spec, retrained, dataset, setup.test_ids),
    }

    rows = []
    failures = []
    best: tuple[float, int] | None = None
    chosen: UnlearnHyper | None = None
    for index, candidate in enumerate(cfg.grid_hypers()):
        try:
            unlearned = run_unlearning(
                spec,
                initial,
                dataset,
                setup.partition,
                replace(candidate, seed=oracle_seed),
                cfg.train_hyper(oracle_seed),
            )
        except DivergenceError as exc:
            failures.append(f"grid[{index}] ({candidate.method}): {exc}")
            rows.append({"index": index, "method": candidate.method, "gap": float("inf"), "status": "diverged"})
            continue
        gap = sum(
            abs(accuracy(spec, unlearned, dataset, ids) - base[name])
            for name, ids in (
                ("forget", setup.partition.forget_ids),
                ("remain", setup.partition.remain_ids),
                ("test", setup.test_ids),
            )
        )
        rows.append({"index": index, "method": candidate.method, "gap": gap, "status": "ok"})
        if best is None or gap < best[0]:
            best = (gap, index)
            chosen = candidate
    if chosen is None:
        raise ComputeError("all grid candidates diverged:\n" + "\n".join(failures))

    with open(out / "grid.csv", "w", encoding="utf-8") as fh:
        fh.write(f"# config_hash={cfg.config_hash()}\n")
        fh.write("index,method,gap,status\n")
        for row in rows:
            fh.write(f"{row['index']},{row['method']},{row['gap']!r},{row['status']}\n")
    (out / "chosen_hyper.json").write_text(
        json.dumps({"config_hash": cfg.config_hash(), "hyper": chosen.__dict__}, indent=2, sort_keys=True)
        + "\n",
        encoding="utf-8",
    )
    return chosen, rows


def load_chosen_hyper(out_dir: str | Path) -> UnlearnHyper | None:
    path = Path(out_dir) / "chosen_hyper.json"
    if not path.exists():
        return None
    payload = json.loads(path.read_text(encoding="utf-8"))
    return UnlearnHyper(**payload["hyper"])


# ---------------------------------------------------------------------------
# run comparison


def compare_runs(run_dirs: list[str | Path]) -> tuple[list[str], str]:
    """Side-by-side metric table for runs sharing dataset/target provenance."""
    manifests = []
    for d in run_dirs:
        path = Path(d) / "manifest.json"
        if not path.exists():
            raise ConfigError(f"{d}: missing manifest.json (not a completed run?)")
        manifests.append(json.loads(path.read_text(encoding="utf-8")))
    reference = manifests[0]
    for d, m in zip(run_dirs, manifests):
        if m["provenance_hash"] != reference["provenance_hash"]:
            diff = _provenance_diff(reference["provenance"], m["provenance"])
            raise ConfigError(
                f"{run_dirs[0]} and {d} have mismatched provenance: {diff}"
            )

    from .metrics import read_metrics_csv

    columns = []
    tables = []
    for d, m in zip(run_dirs, manifests):
        rows, _ = read_metrics_csv(Path(d) / "metrics.csv")
        columns.append(f"{m['method']}@{Path(d).name}")
        tables.append({r["attack"]: r for r in rows})

    metric_names = [k for k in tables[0][next(iter(tables[0]))] if k != "attack"]
    attacks = sorted(tables[0])
    lines = ["attack,metric," + ",".join(columns)]
    for attack in attacks:
        for metric in metric_names:
            cells = [t.get(attack, {}).get(metric, "") for t in tables]
            lines.append(f"{attack},{metric}," + ",".join(str(c) for c in cells))
    return lines, "\n".join(lines) + "\n"


def _provenance_diff(a: dict, b: dict, prefix: str = "") -> str:
    diffs = []
    for key in sorted(set(a) | set(b)):
        va, vb = a.get(key), b.get(key)
        path = f"{prefix}{key}"
        if isinstance(va, dict) and isinstance(vb, dict):
            nested = _provenance_diff(va, vb, prefix=path + ".")
            if nested:
                diffs.append(nested)
        elif va != vb:
            diffs.append(f"{path}: {va!r} != {vb!r}")
    return "; ".join(d for d in diffs if d)
