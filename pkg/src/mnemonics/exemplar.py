"""Exemplar strategies: random, herding, and trainable (mnemonics) exemplars."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field

from .diffcore import DTYPE, UnrollSpec, unroll, unrolled_value_and_hypergradient
from .errors import ArgumentError, BalanceError, DivergenceError, FormatError, ParseError
from .model import ClassifierParams, cross_entropy, forward, train_classifier

log = logging.getLogger(__name__)

Origin = Literal["random", "herding", "mnemonics", "all"]


class ExemplarHyperparams(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    outer_lr_new: float = Field(1.0, ge=0)
    outer_lr_old: float = Field(0.3, ge=0)
    outer_epochs: int = Field(50, ge=0)
    unroll: UnrollSpec = UnrollSpec()
    num_splits: int = Field(2, ge=2)
    lr_halving_period: int = Field(10, ge=1)
    backtracking: bool = False
    clip: tuple[float, float] | None = None


@dataclass
class ExemplarSet:
    """Per-class exemplar rows plus a copy of their initial values."""

    exemplars: dict[int, torch.Tensor]
    origin: Origin = "random"
    init_snapshot: dict[int, torch.Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if not self.init_snapshot:
            self.init_snapshot = {c: e.clone() for c, e in self.exemplars.items()}
        for c, e in self.exemplars.items():
            if e.dim() != 2 or len(e) < 1:
                raise ArgumentError(f"class {c}: needs a non-empty 2-D exemplar tensor")
            if self.init_snapshot[c].shape != e.shape:
                raise ArgumentError(f"class {c}: init snapshot shape differs from exemplars")

    @property
    def classes(self) -> list[int]:
        return sorted(self.exemplars)

    def counts(self) -> dict[int, int]:
        return {c: len(self.exemplars[c]) for c in self.classes}

    def total(self) -> int:
        return sum(self.counts().values())

    def as_batch(self, classes=None) -> tuple[torch.Tensor, torch.Tensor]:
        classes = self.classes if classes is None else classes
        width = next(iter(self.exemplars.values())).shape[1] if self.exemplars else 0
        if not classes:
            return torch.zeros((0, width), dtype=DTYPE), torch.zeros(0, dtype=torch.long)
        x = torch.cat([self.exemplars[c] for c in classes])
        y = torch.cat([torch.full((len(self.exemplars[c]),), c, dtype=torch.long) for c in classes])
        return x, y

    def copy(self) -> ExemplarSet:
        return ExemplarSet({c: e.clone() for c, e in self.exemplars.items()}, self.origin,
                           {c: e.clone() for c, e in self.init_snapshot.items()})

    def merged(self, other: ExemplarSet) -> ExemplarSet:
        ex = {**{c: e.clone() for c, e in self.exemplars.items()},
              **{c: e.clone() for c, e in other.exemplars.items()}}
        snap = {**{c: e.clone() for c, e in self.init_snapshot.items()},
                **{c: e.clone() for c, e in other.init_snapshot.items()}}
        return ExemplarSet(ex, other.origin, snap)

    def keep_rows(self, rows: dict[int, list[int]]) -> ExemplarSet:
        """Restrict each class to the given row indices (current and snapshot alike)."""
        ex, snap = {}, {}
        for c in self.classes:
            idx = torch.as_tensor(rows.get(c, range(len(self.exemplars[c]))), dtype=torch.long)
            ex[c] = self.exemplars[c][idx].clone()
            snap[c] = self.init_snapshot[c][idx].clone()
        return ExemplarSet(ex, self.origin, snap)

    def equal(self, other: ExemplarSet) -> bool:
        return self.classes == other.classes and all(
            torch.equal(self.exemplars[c], other.exemplars[c]) for c in self.classes)


def _check_m(m, rows):
    if not 1 <= m <= rows:
        raise ArgumentError(f"exemplar count m={m} must lie in [1, {rows}]")


def random_indices(rows: int, m: int, seed: int) -> list[int]:
    _check_m(m, rows)
    rng = np.random.default_rng(seed)
    return sorted(rng.choice(rows, size=m, replace=False).tolist())


def select_random(class_data: torch.Tensor, m: int, seed: int) -> torch.Tensor:
    """``m`` distinct rows drawn uniformly without replacement, in row order."""
    return class_data[random_indices(len(class_data), m, seed)].clone()


HERDING_TIE_RTOL = 1e-12


def select_herding(class_features: torch.Tensor, m: int) -> list[int]:
    """Greedy mean matching: each step adds the row that brings the running
    mean of the selection closest to the class mean. Ties go to the lower index;
    distances that differ only by rounding (relative 1e-12 of the feature scale)
    count as ties."""
    feats = torch.as_tensor(class_features, dtype=DTYPE)
    n = len(feats)
    _check_m(m, n)
    mu = feats.mean(dim=0)
    tol = HERDING_TIE_RTOL * max(1.0, float(feats.abs().max())) if n else 0.0
    chosen: list[int] = []
    running = torch.zeros_like(mu)
    available = torch.ones(n, dtype=torch.bool)
    for k in range(1, m + 1):
        cand = (running[None, :] + feats) / k
        dist = torch.linalg.vector_norm(mu[None, :] - cand, dim=1)
        dist[~available] = math.inf
        j = int(torch.nonzero(dist <= dist.min() + tol)[0])
        chosen.append(j)
        available[j] = False
        running = running + feats[j]
    return chosen


@dataclass
class MnemonicsResult:
    exemplars: dict[int, torch.Tensor]
    loss_trace: list[float]
    drift_trace: list[float]


def _inner_outer(model: ClassifierParams, ex_labels: torch.Tensor):
    activation = model.activation

    def inner(flat, E):
        return cross_entropy(forward(ClassifierParams.from_flat(flat, activation), None, E), ex_labels)

    def outer(flat, val):
        x, y = val
        return cross_entropy(forward(ClassifierParams.from_flat(flat, activation), None, x), y)

    return inner, outer


def optimize_exemplars(E0: torch.Tensor, ex_labels: torch.Tensor, val, model: ClassifierParams,
                       hp: ExemplarHyperparams, lr: float):
    """Outer loop shared by new-exemplar training and old-exemplar adjustment.

    Returns ``(E, loss_trace, drift_trace)``; ``loss_trace[e]`` is the
    validation loss after ``e`` outer epochs, ``drift_trace[e]`` the mean
    distance from ``E0`` after ``e + 1`` epochs.
    """
    theta0 = model.to_flat()
    inner, outer = _inner_outer(model, ex_labels)
    spec = hp.unroll

    def value_at(E):
        theta = unroll(inner, theta0, E, spec)
        with torch.no_grad():
            return float(outer(theta, val))

    E = E0.clone()
    loss_trace, drift_trace = [], []
    current = None
    for epoch in range(hp.outer_epochs):
        try:
            current, grad = unrolled_value_and_hypergradient(inner, outer, theta0, E, val, spec)
        except DivergenceError as exc:
            exc.epoch = epoch
            raise
        loss_trace.append(current)
        step = lr * 0.5 ** (epoch // hp.lr_halving_period)
        candidate = E - step * grad
        if hp.clip is not None:
            candidate = candidate.clamp(*hp.clip)
        if hp.backtracking and step > 0:
            trial = value_at(candidate)
            if trial > current:
                candidate = E - 0.5 * step * grad
                if hp.clip is not None:
                    candidate = candidate.clamp(*hp.clip)
                if value_at(candidate) > current:
                    candidate = E
        E = candidate
        drift_trace.append(float(torch.linalg.vector_norm(E - E0, dim=1).mean()))
    loss_trace.append(value_at(E))
    return E, loss_trace, drift_trace


def train_mnemonics(init: ExemplarSet | dict[int, torch.Tensor], x: torch.Tensor, y: torch.Tensor,
                    model: ClassifierParams, hp: ExemplarHyperparams) -> MnemonicsResult:
    """Optimize new-class exemplars so a copy of ``model`` briefly trained on
    them classifies the new-class data ``(x, y)`` well."""
    exemplars = init.exemplars if isinstance(init, ExemplarSet) else init
    classes = sorted(exemplars)
    E0 = torch.cat([exemplars[c] for c in classes])
    labels = torch.cat([torch.full((len(exemplars[c]),), c, dtype=torch.long) for c in classes])
    E, loss_trace, drift_trace = optimize_exemplars(E0, labels, (x, y), model, hp, hp.outer_lr_new)
    out, start = {}, 0
    for c in classes:
        n = len(exemplars[c])
        out[c] = E[start:start + n].clone()
        start += n
    return MnemonicsResult(out, loss_trace, drift_trace)


def split_exemplars(counts: dict[int, int], num_splits: int, seed: int) -> dict[int, list[list[int]]]:
    """Seeded per-class partition of row indices into ``num_splits`` subsets."""
    rng = np.random.default_rng(seed)
    parts = {}
    for c in sorted(counts):
        perm = rng.permutation(counts[c])
        parts[c] = [sorted(chunk.tolist()) for chunk in np.array_split(perm, num_splits)]
    return parts


@dataclass
class AdjustResult:
    exemplars: ExemplarSet
    traces: list[list[float]]
    skipped: list[int]


def adjust_old_exemplars(old: ExemplarSet, model: ClassifierParams, hp: ExemplarHyperparams,
                         seed: int) -> AdjustResult:
    """Split old exemplars per class and optimize each subset in turn, validating
    on the union of the other (already updated) subsets."""
    counts = old.counts()
    skipped = [c for c in old.classes if counts[c] < hp.num_splits]
    for c in skipped:
        log.warning("class %d has %d exemplars (< %d splits); skipping adjustment",
                    c, counts[c], hp.num_splits)
    active = [c for c in old.classes if c not in skipped]
    result = old.copy()
    traces: list[list[float]] = []
    if not active:
        return AdjustResult(result, traces, skipped)
    parts = split_exemplars({c: counts[c] for c in active}, hp.num_splits, seed)
    current = {c: result.exemplars[c].clone() for c in active}

    def gather(js):
        xs, ys, where = [], [], []
        for c in active:
            for j in js:
                rows = parts[c][j]
                xs.append(current[c][rows])
                ys.append(torch.full((len(rows),), c, dtype=torch.long))
                where.append((c, rows))
        return torch.cat(xs), torch.cat(ys), where

    for j in range(hp.num_splits):
        E0, labels, where = gather([j])
        vx, vy, _ = gather([k for k in range(hp.num_splits) if k != j])
        E, trace, _ = optimize_exemplars(E0, labels, (vx, vy), model, hp, hp.outer_lr_old)
        traces.append(trace)
        start = 0
        for c, rows in where:
            current[c][rows] = E[start:start + len(rows)]
            start += len(rows)

    for c in active:
        result.exemplars[c] = current[c]
    return AdjustResult(result, traces, skipped)


def fine_tune_balanced(model: ClassifierParams, exemplars: ExemplarSet, lr: float,
                       epochs: int) -> ClassifierParams:
    """Classification-loss fine-tuning on an exemplar set with equal class counts."""
    counts = exemplars.counts()
    sizes = set(counts.values())
    if len(sizes) > 1:
        most = max(sizes, key=lambda s: (list(counts.values()).count(s), s))
        offending = [c for c, n in counts.items() if n != most]
        raise BalanceError(f"unbalanced exemplar counts {counts}; offending classes {offending}", offending)
    if epochs == 0:
        return model
    x, y = exemplars.as_batch()
    return train_classifier(model, x, y, lr, epochs)


def exemplar_drift(exemplars: ExemplarSet) -> dict[int, tuple[float, float]]:
    """Per class: (mean cosine distance, mean Euclidean distance) to the initial values."""
    out = {}
    for c in exemplars.classes:
        cur, init = exemplars.exemplars[c], exemplars.init_snapshot[c]
        euc = torch.linalg.vector_norm(cur - init, dim=1)
        cos = 1.0 - torch.nn.functional.cosine_similarity(cur, init, dim=1, eps=1e-300)
        same = (cur == init).all(dim=1)
        cos = torch.where(same, torch.zeros_like(cos), cos)
        out[c] = (float(cos.mean()), float(euc.mean()))
    return out


def save_exemplars(exemplars: ExemplarSet, path) -> None:
    """CSV with columns ``class,index,role,origin,f0,...``; role is
    ``exemplar`` or ``exemplar-init``."""
    width = next(iter(exemplars.exemplars.values())).shape[1] if exemplars.exemplars else 0
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "index", "role", "origin"] + [f"f{j}" for j in range(width)])
        for role, table in (("exemplar", exemplars.exemplars), ("exemplar-init", exemplars.init_snapshot)):
            for c in exemplars.classes:
                for i, row in enumerate(table[c].tolist()):
                    w.writerow([c, i, role, exemplars.origin] + [repr(v) for v in row])


def load_exemplars(path) -> ExemplarSet:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty exemplar file")
    cur: dict[int, list] = {}
    init: dict[int, list] = {}
    origin = "random"
    for lineno, row in enumerate(rows[1:], start=2):
        try:
            c, role, origin = int(row[0]), row[2], row[3]
            values = [float(v) for v in row[4:]]
        except (ValueError, IndexError) as exc:
            raise ParseError(str(exc), line=lineno) from None
        if role not in ("exemplar", "exemplar-init"):
            raise ParseError(f"unknown role {role!r}", line=lineno)
        (cur if role == "exemplar" else init).setdefault(c, []).append(values)
    to_t = lambda d: {c: torch.tensor(v, dtype=DTYPE) for c, v in d.items()}  # noqa: E731
    return ExemplarSet(to_t(cur), origin, to_t(init))
