import json

import pytest
import torch
from pydantic import ValidationError

from mnemonics.config import ExperimentConfig, MemoryBudget, load_config
from mnemonics.errors import BudgetError, ScheduleError
from mnemonics.exemplar import ExemplarSet
from mnemonics.protocol import (PhaseResults, average_accuracy, build_schedule, build_stream,
                                derive_seed, enforce_memory_budget, forgetting_rate, read_results,
                                relabel, run_mcil, write_results)


def small_config(**over):
    base = {
        "data": {"train_per_class": 40, "test_per_class": 20},
        "training": {"epochs": 40},
        "exemplar": {"outer_epochs": 3},
    }
    for k, v in over.items():
        if isinstance(v, dict) and k in base:
            base[k] = {**base[k], **v}
        else:
            base[k] = v
    return ExperimentConfig.model_validate(base)


def memory_of(counts, width=2):
    g = torch.Generator().manual_seed(0)
    return ExemplarSet({c: torch.randn(n, width, generator=g, dtype=torch.float64) for c, n in counts.items()})


# -- schedules ------------------------------------------------------------

@pytest.mark.parametrize("total,n,expected", [
    (100, 5, (50, 10, 10, 10, 10, 10)),
    (4, 1, (2, 2)),
    (6, 1, (3, 3)),
    (8, 0, (8,)),
])
def test_build_schedule(total, n, expected):
    s = build_schedule(total, n)
    assert s.classes_per_phase == expected and s.phases == n and sum(expected) == total


@pytest.mark.parametrize("total,n", [(10, 3), (7, 1), (6, -1), (0, 1)])
def test_build_schedule_errors(total, n):
    with pytest.raises(ScheduleError):
        build_schedule(total, n)


# -- memory budget --------------------------------------------------------

def test_budget_per_class_full_is_unchanged():
    mem = memory_of({0: 20, 1: 20})
    assert enforce_memory_budget(mem, MemoryBudget(per_class=20), seed=0).equal(mem)


def test_budget_per_class_trims_surplus():
    mem = memory_of({0: 25, 1: 20, 2: 7})
    out = enforce_memory_budget(mem, MemoryBudget(per_class=20), seed=0)
    assert out.counts() == {0: 20, 1: 20, 2: 7}
    kept = {tuple(r.tolist()) for r in out.exemplars[0]}
    assert kept <= {tuple(r.tolist()) for r in mem.exemplars[0]}


def test_budget_total_exact_division():
    out = enforce_memory_budget(memory_of({c: 15 for c in range(10)}),
                                MemoryBudget(mode="total", total_capacity=100), seed=1)
    assert set(out.counts().values()) == {10} and out.total() == 100


def test_budget_total_floor():
    out = enforce_memory_budget(memory_of({c: 15 for c in range(7)}),
                                MemoryBudget(mode="total", total_capacity=100), seed=1)
    assert set(out.counts().values()) == {14} and out.total() == 98


def test_budget_exhausted():
    with pytest.raises(BudgetError):
        enforce_memory_budget(memory_of({c: 3 for c in range(4)}),
                              MemoryBudget(mode="total", total_capacity=3), seed=0)


def test_budget_discard_is_seeded():
    mem = memory_of({0: 30})
    b = MemoryBudget(per_class=5)
    assert enforce_memory_budget(mem, b, 3).equal(enforce_memory_budget(mem, b, 3))
    assert not enforce_memory_budget(mem, b, 3).equal(enforce_memory_budget(mem, b, 4))


# -- metrics --------------------------------------------------------------

def test_average_accuracy_examples():
    assert average_accuracy([0.9, 0.8, 0.7]) == pytest.approx(0.8, abs=1e-15)
    assert average_accuracy([0.73]) == 0.73
    assert average_accuracy([0.1] * 7) == 0.1


def test_forgetting_examples():
    assert forgetting_rate([0.5, 0.5]) == 0.0
    assert forgetting_rate([0.9, 0.7, 0.6]) == pytest.approx(0.3, abs=1e-15)
    assert forgetting_rate([0.8]) == 0.0


# -- seeding --------------------------------------------------------------

def test_derive_seed_separates_purposes():
    seeds = {derive_seed(0, p, k, e) for p in range(3) for k in ("init", "exemplar", "discard") for e in range(2)}
    assert len(seeds) == 18
    assert derive_seed(5, 1, "split") == derive_seed(5, 1, "split")


# -- the phase loop -------------------------------------------------------

@pytest.fixture(scope="module")
def herding_run():
    return run_mcil(small_config(strategy="herding"))


def test_record_count_and_ranges(herding_run):
    assert len(herding_run.records) == 3
    for i, r in enumerate(herding_run.records):
        assert r.phase == i
        assert 0.0 <= r.accuracy <= 1.0 and 0.0 <= r.accuracy_initial <= 1.0
    assert herding_run.records[-1].classes_seen == list(range(6))
    assert herding_run.records[0].accuracy == herding_run.records[0].accuracy_initial


def test_per_class_budget_after_every_phase(herding_run):
    for r in herding_run.records:
        assert set(r.exemplar_counts) == set(r.classes_seen)
        assert set(r.exemplar_counts.values()) == {4}


def test_total_budget_after_every_phase():
    res = run_mcil(small_config(strategy="random", budget={"mode": "total", "total_capacity": 18}))
    for r in res.records:
        counts = set(r.exemplar_counts.values())
        assert len(counts) == 1 and sum(r.exemplar_counts.values()) <= 18


def test_single_phase_run():
    cfg = small_config(schedule={"total_classes": 6, "phases": 0, "classes_per_phase": [6]})
    res = run_mcil(cfg)
    assert len(res.records) == 1
    assert average_accuracy(res) == res.records[0].accuracy
    assert forgetting_rate(res) == 0.0


def test_rerun_is_byte_identical(tmp_path):
    cfg = small_config(strategy="mnemonics")
    write_results(run_mcil(cfg), tmp_path / "a.jsonl")
    again = ExperimentConfig.model_validate(cfg.snapshot())
    write_results(run_mcil(again), tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_results_file_layout(tmp_path, herding_run):
    write_results(herding_run, tmp_path / "r.jsonl", {"strategy": "herding"})
    lines = (tmp_path / "r.jsonl").read_text().splitlines()
    assert len(lines) == 4
    phases, summary = read_results(tmp_path / "r.jsonl")
    assert [p["phase"] for p in phases] == [0, 1, 2]
    assert summary["average_accuracy"] == average_accuracy(herding_run)
    assert summary["strategy"] == "herding"
    assert {"accuracy", "accuracy_initial", "exemplar_counts", "drift", "num_exemplars"} <= set(phases[0])
    assert "wall_time" not in phases[0]
    assert json.loads(lines[0]) == phases[0]


def test_strategies_differ_only_in_exemplars():
    def fixed(phase, c, rows, model, m):
        return list(range(m))

    a = run_mcil(small_config(strategy="random"), selector=fixed)
    b = run_mcil(small_config(strategy="herding"), selector=fixed)
    for ma, mb in zip(a.models, b.models):
        assert ma.equal(mb)
    assert a.accuracies == b.accuracies


def test_errors_carry_phase_index():
    cfg = small_config(budget={"mode": "total", "total_capacity": 3})
    with pytest.raises(BudgetError) as info:
        run_mcil(cfg)
    assert info.value.phase == 1 and str(info.value).startswith("[phase 1]")


def test_stream_schedule_mismatch():
    cfg = small_config()
    other = small_config(schedule={"total_classes": 6, "phases": 1, "classes_per_phase": [3, 3]})
    with pytest.raises(ScheduleError):
        run_mcil(cfg, build_stream(other))


def test_relabel_to_arrival_order():
    cfg = small_config()
    stream = build_stream(cfg)
    from mnemonics.dataio import Phase, PhaseStream
    swapped = PhaseStream((stream.phases[1], stream.phases[0], stream.phases[2]))
    out, order = relabel(swapped)
    assert order == [2, 3, 0, 1, 4, 5]
    assert out.phases[0].classes == (0, 1)
    assert out.phases[0].train.class_ids == [0, 1]


def test_upper_bound_keeps_everything():
    res = run_mcil(small_config(strategy="upper_bound"))
    assert res.records[-1].exemplar_counts == {c: 40 for c in range(6)}


def test_adjustment_traces_recorded():
    res = run_mcil(small_config(strategy="random", adjust_old=True))
    assert res.records[0].adjust_traces == []
    assert len(res.records[1].adjust_traces) == 2  # one trace per split
    res = run_mcil(small_config(strategy="random", adjust_old=False))
    assert res.records[1].adjust_traces == []


def test_transfer_mode_runs():
    res = run_mcil(small_config(use_transfer=True, strategy="herding"))
    assert len(res.records) == 3 and all(0 <= a <= 1 for a in res.accuracies)


# -- config ---------------------------------------------------------------

def test_config_rejects_unknown_key():
    with pytest.raises(ValidationError):
        ExperimentConfig.model_validate({"strategy": "herding", "typo": 1})


def test_config_lambda_alias_and_range():
    cfg = ExperimentConfig.model_validate({"loss": {"lambda": 0.25}})
    assert cfg.loss.lambda_ == 0.25
    with pytest.raises(ValidationError) as info:
        ExperimentConfig.model_validate({"loss": {"lambda": 1.5}})
    assert "lambda" in str(info.value)


def test_config_snapshot_round_trip(tmp_path):
    snap = small_config().snapshot()
    assert snap["fine_tune_lr"] is not None and snap["schedule"]["classes_per_phase"] == [2, 2, 2]
    (tmp_path / "c.json").write_text(json.dumps(snap))
    assert load_config(tmp_path / "c.json").snapshot() == snap


def test_config_schedule_checks():
    with pytest.raises(ValidationError):
        ExperimentConfig.model_validate({"schedule": {"total_classes": 6, "phases": 2}})
    with pytest.raises(ValidationError):
        ExperimentConfig.model_validate({"data": {"num_classes": 4}})


def test_phase_results_summary(herding_run):
    s = herding_run.summary()
    assert s["phases"] == 3 and isinstance(herding_run, PhaseResults)


def test_shipped_default_config_matches_defaults():
    from pathlib import Path
    path = Path(__file__).resolve().parent.parent / "configs" / "default.yaml"
    assert load_config(path) == ExperimentConfig()
