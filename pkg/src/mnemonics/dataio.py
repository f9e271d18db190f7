"""Synthetic class streams, dataset files, and phase partitioning.

CSV layout: header ``label,f0,f1,...``; one row per sample; floats are written
with ``repr`` so a save/load round trip is bit-exact.

Binary layout (little-endian): magic ``b"MNDS"``, uint32 version (1), uint32
width, uint64 rows, then ``rows`` int64 labels, then ``rows * width`` float64
features in row-major order.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .diffcore import DTYPE
from .errors import FormatError, ParseError, ScheduleError, ShapeError, SpecError

BINARY_MAGIC = b"MNDS"
BINARY_HEADER = struct.Struct("<4sIIQ")


@dataclass(frozen=True)
class LabeledDataset:
    features: torch.Tensor
    labels: torch.Tensor

    def __post_init__(self):
        if self.features.dim() != 2:
            raise ShapeError(f"features must be 2-D, got {tuple(self.features.shape)}")
        if self.labels.dim() != 1 or len(self.labels) != len(self.features):
            raise ShapeError(f"{len(self.labels)} labels for {len(self.features)} rows")

    @classmethod
    def empty(cls, width: int) -> LabeledDataset:
        return cls(torch.zeros((0, width), dtype=DTYPE), torch.zeros(0, dtype=torch.long))

    @property
    def width(self) -> int:
        return self.features.shape[1]

    @property
    def class_ids(self) -> list[int]:
        return sorted(set(self.labels.tolist()))

    def __len__(self):
        return len(self.labels)

    def of_class(self, c: int) -> torch.Tensor:
        return self.features[self.labels == c]

    def subset(self, index) -> LabeledDataset:
        index = torch.as_tensor(index, dtype=torch.long)
        return LabeledDataset(self.features[index], self.labels[index])

    def equal(self, other: LabeledDataset) -> bool:
        return torch.equal(self.features, other.features) and torch.equal(self.labels, other.labels)


def concat(parts: Sequence[LabeledDataset], width: int | None = None) -> LabeledDataset:
    parts = list(parts)
    if not parts:
        return LabeledDataset.empty(width or 0)
    return LabeledDataset(torch.cat([p.features for p in parts]), torch.cat([p.labels for p in parts]))


@dataclass(frozen=True)
class ClassSpec:
    mean: tuple[float, ...]
    variance: tuple[float, ...]
    train_count: int
    test_count: int
    drift: tuple[float, ...] | None = None


@dataclass(frozen=True)
class GaussianMixtureSpec:
    """Axis-aligned Gaussian per class. ``drift`` moves a class mean by that
    vector per phase elapsed since the class arrived."""

    classes: tuple[ClassSpec, ...]

    def __post_init__(self):
        if not self.classes:
            raise SpecError("mixture needs at least one class")
        width = len(self.classes[0].mean)
        for c, cs in enumerate(self.classes):
            if len(cs.mean) != width or len(cs.variance) != width:
                raise SpecError(f"class {c}: mean/variance width differs from {width}")
            if cs.drift is not None and len(cs.drift) != width:
                raise SpecError(f"class {c}: drift width differs from {width}")
            if any(v <= 0 for v in cs.variance):
                raise SpecError(f"class {c}: variances must be positive")
            if cs.train_count <= 0 or cs.test_count <= 0:
                raise SpecError(f"class {c}: sample counts must be positive")

    @property
    def width(self) -> int:
        return len(self.classes[0].mean)


def hexagon_benchmark(num_classes: int = 6, radius: float = 4.0, std: float = 1.0,
                      train_count: int = 500, test_count: int = 100,
                      drift: float = 0.0) -> GaussianMixtureSpec:
    """Class means evenly spaced on a circle in 2-D (a hexagon for 6 classes).

    ``drift`` is a per-phase mean shift, in units of ``std``, along the
    counter-clockwise tangent of each class mean.
    """
    classes = []
    for c in range(num_classes):
        angle = 2 * math.pi * c / num_classes
        mean = (radius * math.cos(angle), radius * math.sin(angle))
        shift = (-drift * std * math.sin(angle), drift * std * math.cos(angle)) if drift else None
        classes.append(ClassSpec(mean, (std * std, std * std), train_count, test_count, shift))
    return GaussianMixtureSpec(tuple(classes))


@dataclass(frozen=True)
class Phase:
    classes: tuple[int, ...]
    train: LabeledDataset
    test: LabeledDataset


@dataclass(frozen=True)
class PhaseStream:
    phases: tuple[Phase, ...]
    drift: dict[int, torch.Tensor] = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for i, phase in enumerate(self.phases):
            overlap = seen & set(phase.classes)
            if overlap:
                raise ScheduleError(f"phase {i} repeats classes {sorted(overlap)}")
            seen |= set(phase.classes)

    def __len__(self):
        return len(self.phases)

    @property
    def width(self) -> int:
        return self.phases[0].train.width

    def classes_through(self, i: int) -> list[int]:
        return [c for p in self.phases[:i + 1] for c in p.classes]

    def test_view(self, phases: Sequence[int], at: int) -> LabeledDataset:
        """Test sets of ``phases`` as seen at phase ``at`` (drifted when drift is set)."""
        parts = []
        for j in phases:
            test = self.phases[j].test
            if self.drift and len(test):
                shift = torch.zeros_like(test.features)
                for c in self.phases[j].classes:
                    if c in self.drift:
                        shift[test.labels == c] = self.drift[c] * (at - j)
                test = LabeledDataset(test.features + shift, test.labels)
            parts.append(test)
        return concat(parts, self.width)

    def cumulative_test(self, i: int) -> LabeledDataset:
        return self.test_view(range(i + 1), i)

    def initial_test(self, i: int) -> LabeledDataset:
        return self.test_view([0], i)


def _phase_of_class(classes_per_phase: Sequence[int]) -> list[int]:
    return [i for i, n in enumerate(classes_per_phase) for _ in range(n)]


def generate_gaussian_stream(spec: GaussianMixtureSpec, schedule, seed: int) -> PhaseStream:
    """Sample a stream; classes are assigned to phases in spec order.

    ``schedule`` is anything with ``classes_per_phase``.
    """
    counts = list(schedule.classes_per_phase)
    if sum(counts) != len(spec.classes):
        raise SpecError(f"spec has {len(spec.classes)} classes, schedule expects {sum(counts)}")
    owner = _phase_of_class(counts)
    rng = np.random.default_rng(seed)
    train_parts, test_parts = [[] for _ in counts], [[] for _ in counts]
    drift = {}
    for c, cs in enumerate(spec.classes):
        p = owner[c]
        mean = np.asarray(cs.mean, dtype=np.float64)
        if cs.drift is not None:
            drift[c] = torch.tensor(cs.drift, dtype=DTYPE)
            mean = mean + p * np.asarray(cs.drift)
        std = np.sqrt(np.asarray(cs.variance, dtype=np.float64))
        for n, parts in ((cs.train_count, train_parts), (cs.test_count, test_parts)):
            x = mean + std * rng.standard_normal((n, spec.width))
            parts[p].append(LabeledDataset(torch.from_numpy(x), torch.full((n,), c, dtype=torch.long)))
    classes = [tuple(c for c in range(len(owner)) if owner[c] == p) for p in range(len(counts))]
    phases = tuple(
        Phase(classes[p], concat(train_parts[p], spec.width), concat(test_parts[p], spec.width))
        for p in range(len(counts)))
    return PhaseStream(phases, drift)


def partition_stream(ds: LabeledDataset, schedule, test_fraction: float, seed: int) -> PhaseStream:
    """Seeded class-to-phase assignment and per-class train/test split."""
    counts = list(schedule.classes_per_phase)
    class_ids = ds.class_ids
    if len(class_ids) != sum(counts):
        raise ScheduleError(f"dataset has {len(class_ids)} classes, schedule expects {sum(counts)}")
    if not 0.0 <= test_fraction < 1.0:
        raise ValueError("test_fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    order = [class_ids[k] for k in rng.permutation(len(class_ids))]
    phases, start = [], 0
    for n in counts:
        members = tuple(order[start:start + n])
        start += n
        train_idx, test_idx = [], []
        for c in members:
            rows = torch.nonzero(ds.labels == c).flatten().numpy()
            perm = rows[rng.permutation(len(rows))]
            n_test = int(round(test_fraction * len(rows)))
            test_idx += sorted(perm[:n_test].tolist())
            train_idx += sorted(perm[n_test:].tolist())
        phases.append(Phase(members, ds.subset(train_idx), ds.subset(test_idx)))
    return PhaseStream(tuple(phases))


def save_dataset(ds: LabeledDataset, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label"] + [f"f{j}" for j in range(ds.width)])
        for label, row in zip(ds.labels.tolist(), ds.features.tolist()):
            writer.writerow([label] + [repr(v) for v in row])


def load_dataset(path) -> LabeledDataset:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty file, expected a header line")
    header = rows[0]
    if not header or header[0] != "label" or header[1:] != [f"f{j}" for j in range(len(header) - 1)]:
        raise ParseError("header must be label,f0,f1,...", line=1)
    width = len(header) - 1
    labels, feats = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != width + 1:
            raise ParseError(f"expected {width + 1} fields, got {len(row)}", line=lineno)
        try:
            labels.append(int(row[0]))
            values = [float(v) for v in row[1:]]
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from None
        if not all(math.isfinite(v) for v in values):
            raise ParseError("non-finite feature value", line=lineno)
        feats.append(values)
    if not feats:
        return LabeledDataset.empty(width)
    return LabeledDataset(torch.tensor(feats, dtype=DTYPE), torch.tensor(labels, dtype=torch.long))


def save_dataset_binary(ds: LabeledDataset, path) -> None:
    with Path(path).open("wb") as fh:
        fh.write(BINARY_HEADER.pack(BINARY_MAGIC, 1, ds.width, len(ds)))
        fh.write(ds.labels.numpy().astype("<i8").tobytes())
        fh.write(ds.features.numpy().astype("<f8").tobytes())


def load_dataset_binary(path) -> LabeledDataset:
    raw = Path(path).read_bytes()
    if len(raw) < BINARY_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, width, rows = BINARY_HEADER.unpack_from(raw)
    if magic != BINARY_MAGIC or version != 1:
        raise FormatError(f"{path}: bad magic or unsupported version")
    expected = BINARY_HEADER.size + rows * 8 + rows * width * 8
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    off = BINARY_HEADER.size
    labels = np.frombuffer(raw, dtype="<i8", count=rows, offset=off)
    feats = np.frombuffer(raw, dtype="<f8", count=rows * width, offset=off + rows * 8)
    return LabeledDataset(torch.from_numpy(feats.reshape(rows, width).copy()),
                          torch.from_numpy(labels.astype(np.int64)))
