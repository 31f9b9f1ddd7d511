"""Shadow-model orchestration: role scheduling in groups of three, per-round
training + unlearning, and the append-only observation store.

Each round trains one shadow model on (In + Unlearn roles + attack draw),
records pre-unlearning signals, unlearns the Unlearn role plus a slice of
attack data, and records post-unlearning signals. Per round every target
yields exactly two observations. Rounds are independent jobs, reproducible
from (master seed, round index) alone, so results never depend on worker
count or completion order.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ._rng import derive_seed, rng_for
from .data import Dataset, make_partition
from .models import ModelSpec, ParamVector, batch_feature_signals, batch_span_losses
from .training import TrainHyper, train
from .unlearn import UnlearnHyper, run_unlearning

CONDITIONS = ("in", "out", "unlearned", "held-out", "remained")
ROLES = ("In", "Unlearn", "Out")


class StoreError(RuntimeError):
    pass


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class Observation:
    target_id: int
    model_index: int
    condition: str
    signal_kind: str
    signal_value: float

    @property
    def key(self) -> tuple[int, int, str]:
        return (self.target_id, self.model_index, self.condition)


@dataclass(frozen=True)
class RoundAssignment:
    index: int
    in_ids: tuple[int, ...]
    unlearn_ids: tuple[int, ...]
    out_ids: tuple[int, ...]

    @property
    def target_ids(self) -> tuple[int, ...]:
        return self.in_ids + self.unlearn_ids + self.out_ids


@dataclass(frozen=True)
class RoleSchedule:
    rounds: tuple[RoundAssignment, ...]


def build_schedule(target_ids, num_models: int, seed: int) -> RoleSchedule:
    """Role rotation in aligned blocks of three rounds.

    Within each block every target takes each of In/Unlearn/Out exactly once;
    group membership is re-drawn per block so co-membership varies.
    """
    ids = sorted(target_ids)
    if num_models % 3 != 0:
        raise ScheduleError(f"shadow model count {num_models} must be divisible by 3")
    if len(ids) % 3 != 0:
        raise ScheduleError(f"target count {len(ids)} must be divisible by 3")
    third = len(ids) // 3
    rounds = []
    for block in range(num_models // 3):
        perm = rng_for("schedule", seed, block).permutation(len(ids))
        groups = [
            tuple(sorted(ids[i] for i in perm[g * third : (g + 1) * third])) for g in range(3)
        ]
        for r in range(3):
            rounds.append(
                RoundAssignment(
                    index=3 * block + r,
                    in_ids=groups[r % 3],
                    unlearn_ids=groups[(r + 1) % 3],
                    out_ids=groups[(r + 2) % 3],
                )
            )
    return RoleSchedule(tuple(rounds))


# ---------------------------------------------------------------------------
# observation store


class ObservationStore:
    """Unique-keyed observation collection with provenance; merges are unions."""

    def __init__(self, provenance: dict):
        self.provenance = dict(provenance)
        self._obs: dict[tuple[int, int, str], Observation] = {}

    def __len__(self) -> int:
        return len(self._obs)

    def add(self, obs: Observation) -> None:
        existing = self._obs.get(obs.key)
        if existing is not None and existing != obs:
            raise StoreError(f"conflicting duplicate observation for key {obs.key}")
        self._obs[obs.key] = obs

    def extend(self, observations) -> None:
        for obs in observations:
            self.add(obs)

    def observations(self) -> list[Observation]:
        return [self._obs[k] for k in sorted(self._obs)]

    def values_for(self, target_id: int, condition: str) -> np.ndarray:
        keys = [k for k in self._obs if k[0] == target_id and k[2] == condition]
        return np.array([self._obs[k].signal_value for k in sorted(keys)])

    def by_target(self) -> dict[int, dict[str, np.ndarray]]:
        """target_id -> condition -> signal values sorted by model index."""
        grouped: dict[int, dict[str, list[tuple[int, float]]]] = {}
        for (tid, midx, cond), obs in self._obs.items():
            grouped.setdefault(tid, {}).setdefault(cond, []).append((midx, obs.signal_value))
        return {
            tid: {cond: np.array([v for _, v in sorted(pairs)]) for cond, pairs in conds.items()}
            for tid, conds in grouped.items()
        }

    def round_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for _, midx, _ in self._obs:
            counts[midx] = counts.get(midx, 0) + 1
        return counts

    def completed_rounds(self, expected_per_round: int) -> set[int]:
        return {idx for idx, n in self.round_counts().items() if n == expected_per_round}


def merge_stores(a: ObservationStore, b: ObservationStore) -> ObservationStore:
    if a.provenance != b.provenance:
        raise StoreError(f"provenance mismatch: {a.provenance} != {b.provenance}")
    merged = ObservationStore(a.provenance)
    merged.extend(a.observations())
    merged.extend(b.observations())
    return merged


def _obs_line(obs: Observation) -> str:
    return json.dumps(
        {
            "target_id": obs.target_id,
            "model_index": obs.model_index,
            "condition": obs.condition,
            "signal_kind": obs.signal_kind,
            "signal_value": obs.signal_value,
        },
        sort_keys=True,
    )


def save_store(path: str | Path, store: ObservationStore) -> None:
    """Canonical JSON-lines file: provenance header, then sorted observations."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"provenance": store.provenance}, sort_keys=True) + "\n")
        for obs in store.observations():
            fh.write(_obs_line(obs) + "\n")
    os.replace(tmp, path)


def load_store(path: str | Path) -> ObservationStore:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise StoreError(f"{path}: empty store file")
    try:
        header = json.loads(lines[0])
        provenance = header["provenance"]
    except (json.JSONDecodeError, KeyError, TypeError):
        raise StoreError(f"{path}: corrupt provenance header at line 1") from None
    store = ObservationStore(provenance)
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            store.add(
                Observation(
                    int(row["target_id"]),
                    int(row["model_index"]),
                    str(row["condition"]),
                    str(row["signal_kind"]),
                    float(row["signal_value"]),
                )
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError):
            raise StoreError(f"{path}: corrupt observation at line {lineno}") from None
    return store


# ---------------------------------------------------------------------------
# round execution


def signal_map(spec: ModelSpec, params: ParamVector, dataset: Dataset, ids, phi_kind: str):
    """phi signals for many samples at once; returns id -> float."""
    ids = sorted(ids)
    if not ids:
        return {}
    if dataset.kind == "vector":
        x, y = dataset.feature_matrix(ids)
        values = batch_feature_signals(spec, params, x, y, phi_kind)
    else:
        if phi_kind != "loss":
            raise ValueError("sequence models support only the loss signal")
        values = batch_span_losses(spec, params, dataset.token_records(ids), dataset.ngram_len)
    return dict(zip(ids, values.tolist()))


def run_round(
    assignment: RoundAssignment,
    dataset: Dataset,
    attack_ids,
    extras_ids,
    retained_ids,
    spec: ModelSpec,
    train_hyper: TrainHyper,
    unlearn_hyper: UnlearnHyper,
    phi_kind: str,
    round_seed: int,
) -> list[Observation]:
    """Train and unlearn one shadow model; two observations per target."""
    attack_ids = frozenset(attack_ids)
    if attack_ids & set(assignment.target_ids):
        raise ValueError("attack data must be disjoint from the targets")
    train_ids = set(assignment.in_ids) | set(assignment.unlearn_ids) | attack_ids | set(retained_ids)
    forget_ids = set(assignment.unlearn_ids) | set(extras_ids)

    th = replace(train_hyper, seed=derive_seed(round_seed, "train"))
    trained = train(spec, dataset, train_ids, th, tag="shadow", label=f"shadow-{assignment.index}")

    observations = []
    pre = signal_map(spec, trained, dataset, assignment.target_ids, phi_kind)
    for tid in assignment.in_ids + assignment.unlearn_ids:
        observations.append(Observation(tid, assignment.index, "in", phi_kind, pre[tid]))
    for tid in assignment.out_ids:
        observations.append(Observation(tid, assignment.index, "out", phi_kind, pre[tid]))

    partition = make_partition(train_ids, forget_ids, attack_ids, set(assignment.out_ids))
    uh = replace(unlearn_hyper, seed=derive_seed(round_seed, "unlearn"))
    unlearned = run_unlearning(spec, trained, dataset, partition, uh, train_hyper)

    post = signal_map(spec, unlearned, dataset, assignment.target_ids, phi_kind)
    for tid, condition in (
        *((t, "remained") for t in assignment.in_ids),
        *((t, "unlearned") for t in assignment.unlearn_ids),
        *((t, "held-out") for t in assignment.out_ids),
    ):
        observations.append(Observation(tid, assignment.index, condition, phi_kind, post[tid]))
    return observations


@dataclass(frozen=True)
class RoundPlan:
    """Everything one worker needs to execute a single round."""

    assignment: RoundAssignment
    attack_ids: tuple[int, ...]
    extras_ids: tuple[int, ...]
    retained_ids: tuple[int, ...]
    spec: ModelSpec
    train_hyper: TrainHyper
    unlearn_hyper: UnlearnHyper
    phi_kind: str
    round_seed: int


def plan_rounds(
    schedule: RoleSchedule,
    attack_ids,
    extras_size: int,
    retained_ids,
    spec: ModelSpec,
    train_hyper: TrainHyper,
    unlearn_hyper: UnlearnHyper,
    phi_kind: str,
    master_seed: int,
    index_offset: int = 0,
) -> list[RoundPlan]:
    """One plan per round over a fixed attack pool shared by every round.

    Sharing the pool keeps shadow models comparable to the audited model and
    to each other; per-round variety comes from the role rotation, the
    unlearn-request slice and the training seed. ``index_offset`` shifts the
    stored round indices so several schedules can feed one store.
    """
    attack = tuple(sorted(attack_ids))
    retained = tuple(sorted(retained_ids))
    plans = []
    for assignment in schedule.rounds:
        index = assignment.index + index_offset
        assignment = replace(assignment, index=index)
        rng = rng_for("round-data", master_seed, index)
        n_extras = min(extras_size, len(attack))
        extras = tuple(sorted(np.array(attack)[rng.permutation(len(attack))[:n_extras]].tolist())) if attack else ()
        plans.append(
            RoundPlan(
                assignment=assignment,
                attack_ids=attack,
                extras_ids=extras,
                retained_ids=retained,
                spec=spec,
                train_hyper=train_hyper,
                unlearn_hyper=unlearn_hyper,
                phi_kind=phi_kind,
                round_seed=derive_seed(master_seed, "round", index),
            )
        )
    return plans


def _execute_plan(args: tuple[RoundPlan, Dataset]) -> tuple[int, list[Observation]]:
    plan, dataset = args
    obs = run_round(
        plan.assignment,
        dataset,
        plan.attack_ids,
        plan.extras_ids,
        plan.retained_ids,
        plan.spec,
        plan.train_hyper,
        plan.unlearn_hyper,
        plan.phi_kind,
        plan.round_seed,
    )
    return plan.assignment.index, obs


def run_rounds(
    plans: list[RoundPlan],
    dataset: Dataset,
    store: ObservationStore,
    jobs: int = 1,
    journal_path: str | Path | None = None,
) -> ObservationStore:
    """Execute pending rounds (skipping completed ones) and merge results.

    With a journal path, each finished round is appended immediately so an
    interrupted run can resume; the final file is rewritten canonically.
    """
    expected = 2 * len(plans[0].assignment.target_ids) if plans else 0
    done = store.completed_rounds(expected)
    pending = [p for p in plans if p.assignment.index not in done]

    journal = open(journal_path, "a", encoding="utf-8") if journal_path else None
    try:
        if jobs <= 1:
            results = map(_execute_plan, ((p, dataset) for p in pending))
            for index, obs in results:
                store.extend(obs)
                _journal_round(journal, obs)
        else:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                for index, obs in pool.map(_execute_plan, ((p, dataset) for p in pending)):
                    store.extend(obs)
                    _journal_round(journal, obs)
    finally:
        if journal:
            journal.close()
    if journal_path:
        save_store(journal_path, store)
    return store


def _journal_round(journal, observations) -> None:
    if journal is None:
        return
    for obs in sorted(observations, key=lambda o: o.key):
        journal.write(_obs_line(obs) + "\n")
    journal.flush()


def new_store(config_hash: str, master_seed: int, phi_kind: str) -> ObservationStore:
    return ObservationStore(
        {"config_hash": config_hash, "master_seed": master_seed, "phi_kind": phi_kind}
    )


def open_or_create_store(
    path: str | Path, config_hash: str, master_seed: int, phi_kind: str, resume: bool
) -> ObservationStore:
    path = Path(path)
    expected = {"config_hash": config_hash, "master_seed": master_seed, "phi_kind": phi_kind}
    if path.exists():
        if not resume:
            raise StoreError(f"{path} exists; pass --resume to continue it")
        store = load_store(path)
        if store.provenance != expected:
            raise StoreError(f"{path}: provenance mismatch: {store.provenance} != {expected}")
        return store
    store = new_store(config_hash, master_seed, phi_kind)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"provenance": store.provenance}, sort_keys=True) + "\n")
    return store
