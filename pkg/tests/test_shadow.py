import json

import numpy as np
import pytest

from unlearn_audit._rng import derive_seed
from unlearn_audit.data import make_partition, synth_blobs
from unlearn_audit.models import ModelSpec
from unlearn_audit.shadow import (
    Observation,
    ObservationStore,
    ScheduleError,
    StoreError,
    build_schedule,
    load_store,
    merge_stores,
    new_store,
    plan_rounds,
    run_round,
    run_rounds,
    save_store,
    signal_map,
)
from unlearn_audit.training import TrainHyper, train
from unlearn_audit.unlearn import UnlearnHyper

SPEC = ModelSpec("mlp", 2, 8, 2)
FAST_TRAIN = TrainHyper(epochs=8, batch_size=16, learning_rate=0.1, seed=0)
IDENTITY = UnlearnHyper(method="identity")


def test_schedule_minimal_three_targets():
    schedule = build_schedule([1, 2, 3], num_models=3, seed=0)
    assert len(schedule.rounds) == 3
    for role in ("in_ids", "unlearn_ids", "out_ids"):
        seen = [getattr(r, role) for r in schedule.rounds]
        # each target appears exactly once per role across the block
        assert sorted(sum(seen, ())) == [1, 2, 3]


def test_schedule_divisibility_errors():
    with pytest.raises(ScheduleError):
        build_schedule([1, 2, 3], num_models=4, seed=0)
    with pytest.raises(ScheduleError):
        build_schedule([1, 2, 3, 4], num_models=3, seed=0)


def test_schedule_role_counts_n90():
    ids = list(range(30))
    schedule = build_schedule(ids, num_models=90, seed=1)
    per_role = {tid: {"In": 0, "Unlearn": 0, "Out": 0} for tid in ids}
    for rnd in schedule.rounds:
        for tid in rnd.in_ids:
            per_role[tid]["In"] += 1
        for tid in rnd.unlearn_ids:
            per_role[tid]["Unlearn"] += 1
        for tid in rnd.out_ids:
            per_role[tid]["Out"] += 1
    for counts in per_role.values():
        assert counts == {"In": 30, "Unlearn": 30, "Out": 30}


def test_schedule_block_rotation_property():
    ids = list(range(12))
    schedule = build_schedule(ids, num_models=12, seed=2)
    for block_start in range(0, 12, 3):
        block = schedule.rounds[block_start : block_start + 3]
        for tid in ids:
            roles = []
            for rnd in block:
                if tid in rnd.in_ids:
                    roles.append("In")
                if tid in rnd.unlearn_ids:
                    roles.append("Unlearn")
                if tid in rnd.out_ids:
                    roles.append("Out")
            assert sorted(roles) == ["In", "Out", "Unlearn"]


def test_schedule_round_partitions_targets():
    ids = list(range(9))
    schedule = build_schedule(ids, num_models=6, seed=3)
    for rnd in schedule.rounds:
        assert sorted(rnd.in_ids + rnd.unlearn_ids + rnd.out_ids) == ids
        assert len(rnd.in_ids) == len(rnd.unlearn_ids) == len(rnd.out_ids) == 3


def test_schedule_deterministic():
    a = build_schedule(range(9), 6, seed=4)
    b = build_schedule(range(9), 6, seed=4)
    c = build_schedule(range(9), 6, seed=5)
    assert a == b
    assert a != c


@pytest.fixture(scope="module")
def round_fixture():
    ds = synth_blobs(120, 2, 1.0, 0.0, 0.05, seed=40)
    schedule = build_schedule(list(range(9)), 3, seed=6)
    attack = tuple(range(20, 60))
    return ds, schedule, attack


def test_run_round_observation_structure(round_fixture):
    ds, schedule, attack = round_fixture
    rnd = schedule.rounds[0]
    obs = run_round(rnd, ds, attack, attack[:5], (), SPEC, FAST_TRAIN, IDENTITY,
                    "logit-confidence", round_seed=derive_seed(0, "round", 0))
    assert len(obs) == 2 * 9
    per_target = {}
    for o in obs:
        per_target.setdefault(o.target_id, []).append(o.condition)
    for tid, conds in per_target.items():
        assert len(conds) == 2
        pre = conds[0] if conds[0] in ("in", "out") else conds[1]
        post = conds[1] if conds[0] == pre else conds[0]
        if tid in rnd.in_ids:
            assert (pre, post) == ("in", "remained")
        elif tid in rnd.unlearn_ids:
            assert (pre, post) == ("in", "unlearned")
        else:
            assert (pre, post) == ("out", "held-out")


def test_run_round_attack_target_overlap_rejected(round_fixture):
    ds, schedule, _ = round_fixture
    with pytest.raises(ValueError, match="disjoint"):
        run_round(schedule.rounds[0], ds, (0, 1, 30), (), (), SPEC, FAST_TRAIN, IDENTITY,
                  "logit-confidence", round_seed=1)


def test_run_round_bit_reproducible(round_fixture):
    ds, schedule, attack = round_fixture
    rnd = schedule.rounds[1]
    seed = derive_seed(123, "round", 1)
    a = run_round(rnd, ds, attack, attack[:5], (), SPEC, FAST_TRAIN, IDENTITY, "logit-confidence", seed)
    b = run_round(rnd, ds, attack, attack[:5], (), SPEC, FAST_TRAIN, IDENTITY, "logit-confidence", seed)
    assert a == b


def test_identity_round_post_equals_pre_signals(round_fixture):
    ds, schedule, attack = round_fixture
    obs = run_round(schedule.rounds[0], ds, attack, (), (), SPEC, FAST_TRAIN, IDENTITY,
                    "logit-confidence", round_seed=7)
    by_key = {(o.target_id, o.condition): o.signal_value for o in obs}
    for tid in schedule.rounds[0].unlearn_ids:
        assert by_key[(tid, "unlearned")] == by_key[(tid, "in")]
    for tid in schedule.rounds[0].out_ids:
        assert by_key[(tid, "held-out")] == by_key[(tid, "out")]


def _full_run(jobs: int, tmp_path=None, journal=None):
    ds = synth_blobs(150, 2, 1.0, 0.0, 0.05, seed=41)
    schedule = build_schedule(list(range(9)), 6, seed=8)
    plans = plan_rounds(
        schedule, list(range(30, 70)), extras_size=8, retained_ids=(),
        spec=SPEC, train_hyper=FAST_TRAIN, unlearn_hyper=UnlearnHyper(method="finetune", refine_epochs=1),
        phi_kind="logit-confidence", master_seed=99,
    )
    store = new_store("hash", 99, "logit-confidence")
    return run_rounds(plans, ds, store, jobs=jobs, journal_path=journal), plans


def test_condition_counts_after_full_run():
    store, plans = _full_run(jobs=1)
    n = 6
    by_target = store.by_target()
    for tid in range(9):
        conds = by_target[tid]
        assert len(conds["in"]) == 2 * n // 3
        assert len(conds["out"]) == n // 3
        for cond in ("unlearned", "held-out", "remained"):
            assert len(conds[cond]) == n // 3
    assert all(np.isfinite(v).all() for conds in by_target.values() for v in conds.values())


def test_parallel_matches_serial(tmp_path):
    serial, _ = _full_run(jobs=1, journal=tmp_path / "serial.jsonl")
    parallel, _ = _full_run(jobs=4, journal=tmp_path / "parallel.jsonl")
    assert serial.observations() == parallel.observations()
    assert (tmp_path / "serial.jsonl").read_bytes() == (tmp_path / "parallel.jsonl").read_bytes()


def test_resume_skips_completed_rounds(tmp_path):
    full, plans = _full_run(jobs=1)
    ds = synth_blobs(150, 2, 1.0, 0.0, 0.05, seed=41)
    partial = new_store("hash", 99, "logit-confidence")
    for obs in full.observations():
        if obs.model_index < 3:
            partial.add(obs)
    resumed = run_rounds(plans, ds, partial, jobs=1)
    assert resumed.observations() == full.observations()


def test_store_conflict_detection():
    store = new_store("h", 1, "loss")
    store.add(Observation(1, 0, "in", "loss", 0.5))
    store.add(Observation(1, 0, "in", "loss", 0.5))  # idempotent
    with pytest.raises(StoreError, match="conflicting"):
        store.add(Observation(1, 0, "in", "loss", 0.6))


def test_merge_idempotent_commutative():
    a = new_store("h", 1, "loss")
    b = new_store("h", 1, "loss")
    a.add(Observation(1, 0, "in", "loss", 0.5))
    b.add(Observation(2, 1, "out", "loss", -0.25))
    assert merge_stores(a, a).observations() == a.observations()
    ab = merge_stores(a, b)
    ba = merge_stores(b, a)
    assert ab.observations() == ba.observations()


def test_merge_provenance_mismatch():
    a = new_store("h1", 1, "loss")
    b = new_store("h2", 1, "loss")
    with pytest.raises(StoreError, match="provenance"):
        merge_stores(a, b)


def test_store_round_trip_lossless(tmp_path):
    store = new_store("h", 7, "logit-confidence")
    rng = np.random.default_rng(0)
    for i in range(50):
        store.add(Observation(i % 5, i, "in", "logit-confidence", float(rng.normal() * 13.77)))
    path = tmp_path / "store.jsonl"
    save_store(path, store)
    loaded = load_store(path)
    assert loaded.provenance == store.provenance
    assert loaded.observations() == store.observations()


def test_store_corrupt_line_reported(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text(
        json.dumps({"provenance": {"config_hash": "h"}})
        + "\n"
        + json.dumps({"target_id": 1, "model_index": 0, "condition": "in",
                      "signal_kind": "loss", "signal_value": 0.5})
        + "\n{broken\n",
        encoding="utf-8",
    )
    with pytest.raises(StoreError, match="line 3"):
        load_store(path)


def test_signal_map_matches_direct_phi():
    ds = synth_blobs(30, 2, 1.0, 0.0, 0.0, seed=42)
    model = train(SPEC, ds, ds.ids, FAST_TRAIN)
    sig = signal_map(SPEC, model, ds, [3, 7, 11], "logit-confidence")
    from unlearn_audit.models import forward, phi_logit_confidence

    for tid in (3, 7, 11):
        s = ds.by_id(tid)
        expect = phi_logit_confidence(forward(SPEC, model, s.features), s.label).value
        assert sig[tid] == pytest.approx(expect, abs=1e-12)


def test_scheduled_run_matches_literal_per_target_loop():
    # literal loop: fresh models trained with/without one target, unlearned
    # per condition, no model sharing; the scheduled machinery must agree
    # distributionally for that target
    ds = synth_blobs(100, 2, 1.0, 0.0, 0.05, seed=43)
    target = 0
    attack = tuple(range(9, 59))
    hyper = UnlearnHyper(method="finetune", learning_rate=0.05, refine_epochs=1)
    n = 12

    literal = {"in": [], "out": [], "unlearned": [], "held-out": [], "remained": []}
    for i in range(n):
        seed = derive_seed("literal", i)
        th = TrainHyper(8, 16, 0.1, seed=derive_seed(seed, "t"))
        with_z = train(SPEC, ds, set(attack) | {target}, th)
        without_z = train(SPEC, ds, set(attack), th)
        literal["in"].append(signal_map(SPEC, with_z, ds, [target], "logit-confidence")[target])
        literal["out"].append(signal_map(SPEC, without_z, ds, [target], "logit-confidence")[target])
        forget_slice = set(attack[:10])
        from unlearn_audit.unlearn import run_unlearning

        part_u = make_partition(set(attack) | {target}, forget_slice | {target})
        part_h = make_partition(set(attack), forget_slice)
        part_r = make_partition(set(attack) | {target}, forget_slice)
        uh = UnlearnHyper(method="finetune", learning_rate=0.05, refine_epochs=1,
                          seed=derive_seed(seed, "u"))
        for cond, part, base in (
            ("unlearned", part_u, with_z),
            ("held-out", part_h, without_z),
            ("remained", part_r, with_z),
        ):
            model = run_unlearning(SPEC, base, ds, part, uh, th)
            literal[cond].append(signal_map(SPEC, model, ds, [target], "logit-confidence")[target])

    schedule = build_schedule(list(range(9)), n, seed=9)
    plans = plan_rounds(schedule, attack, 10, (), SPEC, FAST_TRAIN, hyper,
                        "logit-confidence", master_seed=44)
    store = new_store("h", 44, "logit-confidence")
    run_rounds(plans, ds, store, jobs=1)
    scheduled = store.by_target()[target]

    for cond in ("in", "out", "unlearned", "held-out", "remained"):
        lit = np.array(literal[cond])
        sch = scheduled[cond]
        spread = max(lit.std(), sch.std(), 0.5)
        assert abs(lit.mean() - sch.mean()) < 3.0 * spread
