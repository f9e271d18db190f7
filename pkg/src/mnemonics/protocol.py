"""The multi-class incremental learning phase loop and its metrics."""

from __future__ import annotations

import json
import math
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import dataio
from .config import ExperimentConfig, MemoryBudget
from .dataio import LabeledDataset, PhaseStream
from .errors import BudgetError, MnemonicsError, ScheduleError
from .exemplar import (ExemplarSet, adjust_old_exemplars, exemplar_drift, fine_tune_balanced,
                       random_indices, select_herding, train_mnemonics)
from .model import (TransferParams, accuracy, apply_transfer, expand_head, features,
                    init_classifier, model_level_update, train_classifier)

log = logging.getLogger(__name__)

PURPOSES = {"data": 1, "init": 2, "head": 3, "exemplar": 4, "split": 5, "discard": 6, "partition": 7}


def derive_seed(master: int, phase: int, purpose: str, extra: int = 0) -> int:
    """Independent sub-seed for one (phase, purpose) pair. Strategy never enters,
    so ablations share data, initializations and random draws."""
    ss = np.random.SeedSequence([master, phase, PURPOSES[purpose], extra])
    return int(ss.generate_state(1)[0])


@dataclass(frozen=True)
class PhaseSchedule:
    total_classes: int
    classes_per_phase: tuple[int, ...]

    @property
    def phases(self) -> int:
        return len(self.classes_per_phase) - 1


def build_schedule(total_classes: int, phases: int) -> PhaseSchedule:
    """Half the classes up front, the rest split evenly over ``phases`` increments."""
    if total_classes <= 0 or total_classes % 2:
        raise ScheduleError(f"total_classes must be a positive even number, got {total_classes}")
    if phases < 0:
        raise ScheduleError("number of incremental phases must be non-negative")
    half = total_classes // 2
    if phases == 0:
        return PhaseSchedule(total_classes, (total_classes,))
    if half % phases:
        raise ScheduleError(f"{half} remaining classes cannot be split evenly over {phases} phases")
    return PhaseSchedule(total_classes, (half,) + (half // phases,) * phases)


def schedule_of(config: ExperimentConfig) -> PhaseSchedule:
    cfg = config.resolved()
    return PhaseSchedule(cfg.schedule.total_classes, tuple(cfg.schedule.classes_per_phase))


@dataclass
class PhaseRecord:
    phase: int
    classes: list[int]
    classes_seen: list[int]
    accuracy: float
    accuracy_initial: float
    exemplar_counts: dict[int, int]
    drift: dict[int, tuple[float, float]]
    mnemonics_loss_trace: list[float] = field(default_factory=list)
    mnemonics_drift_trace: list[float] = field(default_factory=list)
    adjust_traces: list[list[float]] = field(default_factory=list)
    wall_time: float = 0.0

    def to_json(self) -> dict:
        """Stable record fields; wall-clock time is kept out so reruns are byte-identical."""
        return {
            "record": "phase",
            "phase": self.phase,
            "classes": self.classes,
            "classes_seen": self.classes_seen,
            "accuracy": self.accuracy,
            "accuracy_initial": self.accuracy_initial,
            "num_exemplars": sum(self.exemplar_counts.values()),
            "exemplar_counts": {str(c): n for c, n in self.exemplar_counts.items()},
            "drift": {str(c): {"cosine": d[0], "euclidean": d[1]} for c, d in self.drift.items()},
            "mnemonics_loss_trace": self.mnemonics_loss_trace,
            "mnemonics_drift_trace": self.mnemonics_drift_trace,
            "adjust_traces": self.adjust_traces,
        }


@dataclass
class PhaseResults:
    records: list[PhaseRecord]
    models: list = field(default_factory=list)
    memories: list[ExemplarSet] = field(default_factory=list)
    class_order: list[int] = field(default_factory=list)

    @property
    def accuracies(self) -> list[float]:
        return [r.accuracy for r in self.records]

    @property
    def initial_accuracies(self) -> list[float]:
        return [r.accuracy_initial for r in self.records]

    def summary(self) -> dict:
        return {
            "record": "summary",
            "phases": len(self.records),
            "average_accuracy": average_accuracy(self),
            "forgetting_rate": forgetting_rate(self),
        }


def average_accuracy(results: PhaseResults | Sequence[float]) -> float:
    accs = results.accuracies if isinstance(results, PhaseResults) else list(results)
    # mean of deviations from the first entry: exact when all entries agree
    ref = float(accs[0])
    return ref + math.fsum(float(a) - ref for a in accs) / len(accs)


def forgetting_rate(results: PhaseResults | Sequence[float]) -> float:
    """Initial-phase test accuracy of the first model minus that of the last
    (positive means forgetting)."""
    accs = results.initial_accuracies if isinstance(results, PhaseResults) else list(results)
    return float(accs[0] - accs[-1])


def enforce_memory_budget(memory: ExemplarSet, budget: MemoryBudget, seed: int) -> ExemplarSet:
    """Randomly discard surplus exemplars down to the per-class quota."""
    if not memory.exemplars:
        raise BudgetError("memory is empty")
    quota = budget.quota(len(memory.classes))
    if quota < 1:
        raise BudgetError(f"capacity {budget.total_capacity} leaves no room for "
                          f"{len(memory.classes)} classes")
    rng = np.random.default_rng(seed)
    keep = {}
    for c, n in memory.counts().items():
        if n > quota:
            keep[c] = sorted(rng.choice(n, size=quota, replace=False).tolist())
    return memory.keep_rows(keep) if keep else memory


def relabel(stream: PhaseStream) -> tuple[PhaseStream, list[int]]:
    """Map class ids to output columns in arrival order."""
    order = [c for p in stream.phases for c in p.classes]
    if order == list(range(len(order))):
        return stream, order
    lut = torch.full((max(order) + 1,), -1, dtype=torch.long)
    for col, c in enumerate(order):
        lut[c] = col

    def conv(ds):
        return LabeledDataset(ds.features, lut[ds.labels])

    phases = tuple(dataio.Phase(tuple(int(lut[c]) for c in p.classes), conv(p.train), conv(p.test))
                   for p in stream.phases)
    drift = {int(lut[c]): v for c, v in stream.drift.items()}
    return PhaseStream(phases, drift), order


def build_stream(config: ExperimentConfig, base_dir: Path | None = None) -> PhaseStream:
    cfg = config.resolved()
    sched = schedule_of(cfg)
    d = cfg.data
    if d.kind == "gaussian":
        spec = dataio.hexagon_benchmark(d.num_classes, d.radius, d.std, d.train_per_class,
                                        d.test_per_class, d.drift)
        return dataio.generate_gaussian_stream(spec, sched, derive_seed(cfg.seed, 0, "data"))
    path = Path(d.path)
    if base_dir is not None and not path.is_absolute():
        path = base_dir / path
    ds = dataio.load_dataset(path) if d.kind == "csv" else dataio.load_dataset_binary(path)
    return dataio.partition_stream(ds, sched, d.test_fraction, derive_seed(cfg.seed, 0, "partition"))


Selector = Callable[[int, int, torch.Tensor, object, int], Sequence[int]]


def _select(cfg, phase, model, train: LabeledDataset, classes, quota, selector) -> ExemplarSet:
    origin = "all" if cfg.strategy == "upper_bound" else cfg.strategy
    chosen = {}
    for c in classes:
        rows = train.of_class(c)
        m = min(quota, len(rows))
        if selector is not None:
            idx = list(selector(phase, c, rows, model, m))
        elif cfg.strategy == "upper_bound":
            idx = list(range(len(rows)))
        elif cfg.strategy == "herding":
            with torch.no_grad():
                idx = select_herding(features(model, rows), m)
        else:
            idx = random_indices(len(rows), m, derive_seed(cfg.seed, phase, "exemplar", c))
        chosen[c] = rows[idx].clone()
    return ExemplarSet(chosen, origin)


def run_mcil(config: ExperimentConfig, stream: PhaseStream | None = None, *,
             selector: Selector | None = None) -> PhaseResults:
    """Run every phase of the incremental protocol.

    ``selector(phase, class_id, class_rows, model, m)`` overrides the
    strategy's choice of initial exemplar rows (used to pair strategies).
    """
    cfg = config.resolved()
    if stream is None:
        stream = build_stream(cfg)
    sched = schedule_of(cfg)
    if [len(p.classes) for p in stream.phases] != list(sched.classes_per_phase):
        raise ScheduleError("stream phases do not match the schedule's class counts")
    stream, order = relabel(stream)
    results = PhaseResults([], class_order=order)
    model = None
    memory: ExemplarSet | None = None
    upper = cfg.strategy == "upper_bound"
    for i, phase in enumerate(stream.phases):
        try:
            start = time.perf_counter()
            model, memory, record = _run_phase(cfg, stream, i, phase, model, memory, upper, selector)
            record.wall_time = time.perf_counter() - start
        except MnemonicsError as exc:
            exc.phase = i
            raise
        results.records.append(record)
        results.models.append(model)
        results.memories.append(memory)
        log.info("phase %d: accuracy %.4f (initial classes %.4f)", i, record.accuracy,
                 record.accuracy_initial)
    return results


def _run_phase(cfg, stream, i, phase, model, memory, upper, selector):
    train = phase.train
    seen_before = stream.classes_through(i - 1) if i > 0 else []
    seen = stream.classes_through(i)
    tr = cfg.training

    # model level
    if i == 0:
        model = init_classifier(stream.width, len(phase.classes), cfg.model.hidden,
                                derive_seed(cfg.seed, 0, "init"), cfg.model.activation)
        model = train_classifier(model, train.features, train.labels, tr.lr, tr.epochs)
    else:
        teacher = model
        base = expand_head(model, len(phase.classes), derive_seed(cfg.seed, i, "head"),
                           cfg.model.head_init_std)
        mem_x, mem_y = memory.as_batch()
        x = torch.cat([mem_x, train.features])
        y = torch.cat([mem_y, train.labels])
        if cfg.use_transfer:
            transfer, base = model_level_update(
                base, TransferParams.identity(base), teacher, x, y, cfg.loss, tr.lr, tr.epochs,
                len(seen_before), train_head=True, use_distillation=cfg.use_distillation)
            model = apply_transfer(base, transfer)
        else:
            model = train_classifier(base, x, y, tr.lr, tr.epochs, previous=teacher,
                                     weights=cfg.loss, old_classes=len(seen_before),
                                     use_distillation=cfg.use_distillation)

    # exemplar level
    quota = cfg.budget.quota(len(seen))
    if quota < 1 and not upper:
        raise BudgetError(f"budget leaves no exemplars for {len(seen)} classes")
    new = _select(cfg, i, model, train, phase.classes, quota, selector)
    loss_trace, drift_trace = [], []
    if cfg.strategy == "mnemonics":
        res = train_mnemonics(new, train.features, train.labels, model, cfg.exemplar)
        new = ExemplarSet(res.exemplars, "mnemonics", new.init_snapshot)
        loss_trace, drift_trace = res.loss_trace, res.drift_trace

    adjust_traces = []
    if memory is not None and cfg.adjust_old and not upper:
        adj = adjust_old_exemplars(memory, model, cfg.exemplar, derive_seed(cfg.seed, i, "split"))
        memory = adj.exemplars
        adjust_traces = adj.traces

    memory = new if memory is None else memory.merged(new)
    if not upper:
        memory = enforce_memory_budget(memory, cfg.budget, derive_seed(cfg.seed, i, "discard"))
        if cfg.fine_tune and i > 0:
            model = fine_tune_balanced(model, memory, cfg.fine_tune_lr, cfg.fine_tune_epochs)

    test = stream.cumulative_test(i)
    initial = stream.initial_test(i)
    record = PhaseRecord(
        phase=i,
        classes=list(phase.classes),
        classes_seen=list(seen),
        accuracy=accuracy(model, test.features, test.labels),
        accuracy_initial=accuracy(model, initial.features, initial.labels),
        exemplar_counts=memory.counts(),
        drift=exemplar_drift(memory),
        mnemonics_loss_trace=loss_trace,
        mnemonics_drift_trace=drift_trace,
        adjust_traces=adjust_traces,
    )
    return model, memory, record


def dumps_record(record: dict) -> str:
    return json.dumps(record, sort_keys=True)


def write_results(results: PhaseResults, path, extra: dict | None = None) -> None:
    """Line-delimited JSON: one ``phase`` record per phase, then one ``summary`` record."""
    lines = [dumps_record(r.to_json()) for r in results.records]
    lines.append(dumps_record({**results.summary(), **(extra or {})}))
    Path(path).write_text("\n".join(lines) + "\n")


def read_results(path) -> tuple[list[dict], dict]:
    rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    phases = [r for r in rows if r.get("record") == "phase"]
    summary = next((r for r in rows if r.get("record") == "summary"), {})
    return phases, summary
