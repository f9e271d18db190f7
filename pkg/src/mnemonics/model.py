"""Small smooth classifiers, weight transfer, and the training losses."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field

from .diffcore import DTYPE, PARAM_LIMIT, FlatParams, value_and_grad
from .errors import DivergenceError, FormatError, LabelError, ShapeError

LOG_FLOOR = math.log(1e-300)
CHECKPOINT_FORMAT = "mnemonics-checkpoint"

Activation = Literal["tanh", "identity"]


class LossWeights(BaseModel):
    """lambda balances classification against distillation; temperature tempers the softmax."""

    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    lambda_: float = Field(0.5, alias="lambda", ge=0.0, le=1.0)
    temperature: float = Field(2.0, ge=1.0)


@dataclass(frozen=True)
class ClassifierParams:
    layers: tuple[tuple[torch.Tensor, torch.Tensor], ...]
    activation: Activation = "tanh"

    def __post_init__(self):
        if self.activation not in ("tanh", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")
        prev = None
        for q, (W, b) in enumerate(self.layers):
            if W.dim() != 2 or b.dim() != 1 or W.shape[0] != b.shape[0]:
                raise ShapeError(f"layer {q}: weight {tuple(W.shape)} and bias {tuple(b.shape)} disagree")
            if prev is not None and W.shape[1] != prev:
                raise ShapeError(f"layer {q}: expects input width {W.shape[1]}, previous layer emits {prev}")
            prev = W.shape[0]

    @property
    def num_classes(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def in_width(self) -> int:
        return self.layers[0][0].shape[1]

    def to_flat(self) -> FlatParams:
        blocks = []
        for q, (W, b) in enumerate(self.layers):
            blocks += [(f"W{q}", W), (f"b{q}", b)]
        return FlatParams.from_blocks(blocks)

    @classmethod
    def from_flat(cls, flat: FlatParams, activation: Activation = "tanh") -> ClassifierParams:
        blocks = flat.blocks()
        n = len(flat.layout) // 2
        return cls(tuple((blocks[f"W{q}"], blocks[f"b{q}"]) for q in range(n)), activation)

    def detach(self) -> ClassifierParams:
        return ClassifierParams(
            tuple((W.detach().clone(), b.detach().clone()) for W, b in self.layers), self.activation)

    def equal(self, other: ClassifierParams) -> bool:
        return self.activation == other.activation and len(self.layers) == len(other.layers) and all(
            torch.equal(W1, W2) and torch.equal(b1, b2)
            for (W1, b1), (W2, b2) in zip(self.layers, other.layers))


@dataclass(frozen=True)
class TransferParams:
    """Per-layer (per-output-neuron scaling, shifting) pairs."""

    layers: tuple[tuple[torch.Tensor, torch.Tensor], ...]

    @classmethod
    def identity(cls, base: ClassifierParams) -> TransferParams:
        return cls(tuple(
            (torch.ones(W.shape[0], dtype=DTYPE), torch.zeros(W.shape[0], dtype=DTYPE))
            for W, _ in base.layers))

    def to_flat(self) -> FlatParams:
        blocks = []
        for q, (s, t) in enumerate(self.layers):
            blocks += [(f"scale{q}", s), (f"shift{q}", t)]
        return FlatParams.from_blocks(blocks)

    @classmethod
    def from_flat(cls, flat: FlatParams) -> TransferParams:
        blocks = flat.blocks()
        n = len(flat.layout) // 2
        return cls(tuple((blocks[f"scale{q}"], blocks[f"shift{q}"]) for q in range(n)))

    def detach(self) -> TransferParams:
        return TransferParams(tuple((s.detach().clone(), t.detach().clone()) for s, t in self.layers))


def _check_transfer(base: ClassifierParams, transfer: TransferParams):
    if len(transfer.layers) != len(base.layers):
        raise ShapeError(f"transfer has {len(transfer.layers)} layers, model has {len(base.layers)}")
    for q, ((W, b), (s, t)) in enumerate(zip(base.layers, transfer.layers)):
        if s.shape != (W.shape[0],) or t.shape != b.shape:
            raise ShapeError(f"layer {q}: transfer shapes {tuple(s.shape)}/{tuple(t.shape)} "
                             f"do not match {W.shape[0]} neurons")


def _activate(h, activation):
    return torch.tanh(h) if activation == "tanh" else h


def _effective_layers(base, transfer):
    if transfer is None:
        return base.layers
    _check_transfer(base, transfer)
    return tuple((W * s[:, None], b + t) for (W, b), (s, t) in zip(base.layers, transfer.layers))


def _run(layers, activation, x, upto=None):
    if x.dim() != 2:
        raise ShapeError(f"input batch must be 2-D, got shape {tuple(x.shape)}")
    h = x
    last = len(layers) - 1
    for q, (W, b) in enumerate(layers[:upto]):
        if h.shape[1] != W.shape[1]:
            raise ShapeError(f"layer {q}: input width {h.shape[1]} does not match weight width {W.shape[1]}")
        h = h @ W.T + b
        if q < last:
            h = _activate(h, activation)
    return h


def forward(base: ClassifierParams, transfer: TransferParams | None, x: torch.Tensor) -> torch.Tensor:
    """Logits, one row per input. With ``transfer`` each layer uses
    ``(W * scale[:, None]) x + (b + shift)``."""
    return _run(_effective_layers(base, transfer), base.activation, x)


def features(params: ClassifierParams, x: torch.Tensor) -> torch.Tensor:
    """Penultimate-layer activations; raw inputs for a single-layer model."""
    if len(params.layers) == 1:
        return x
    return _run(params.layers, params.activation, x, upto=len(params.layers) - 1)


def predict(params: ClassifierParams, x: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return forward(params, None, x).argmax(dim=1)


def accuracy(params: ClassifierParams, x: torch.Tensor, y: torch.Tensor) -> float:
    if len(y) == 0:
        return 0.0
    return float((predict(params, x) == y).double().mean())


def apply_transfer(base: ClassifierParams, transfer: TransferParams) -> ClassifierParams:
    """Materialize the transferred model as ordinary weights."""
    return ClassifierParams(_effective_layers(base, transfer), base.activation)


def tempered_softmax(logits: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    z = logits / temperature
    z = z - z.max(dim=-1, keepdim=True).values
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def _log_softmax(logits, temperature=1.0):
    z = logits / temperature
    z = z - z.max(dim=-1, keepdim=True).values
    return (z - torch.log(torch.exp(z).sum(dim=-1, keepdim=True))).clamp_min(LOG_FLOOR)


def _check_labels(y, num_classes):
    if len(y) and (int(y.min()) < 0 or int(y.max()) >= num_classes):
        raise LabelError(f"labels must lie in [0, {num_classes}), got range "
                         f"[{int(y.min())}, {int(y.max())}]")


def cross_entropy(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    _check_labels(y, logits.shape[1])
    if len(y) == 0:
        return logits.sum() * 0.0
    return -_log_softmax(logits).gather(1, y[:, None]).mean()


def distill_from_logits(student: torch.Tensor, teacher: torch.Tensor, temperature: float,
                        old_classes: int) -> torch.Tensor:
    if old_classes > student.shape[1] or old_classes > teacher.shape[1]:
        raise ShapeError(f"old class count {old_classes} exceeds output width "
                         f"({student.shape[1]} current, {teacher.shape[1]} previous)")
    if old_classes == 0 or len(student) == 0:
        return student.sum() * 0.0
    teacher = teacher[:, :old_classes]
    target = tempered_softmax(teacher, temperature)
    log_t = _log_softmax(teacher, temperature)
    log_s = _log_softmax(student[:, :old_classes], temperature)
    # cross-entropy split as entropy + KL: the KL term is exactly zero when student == teacher
    return -(target * log_t).sum(dim=1).mean() + (target * (log_t - log_s)).sum(dim=1).mean()


def entropy_from_logits(logits: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """Mean entropy of the tempered softmax over rows, with the numerics used by
    the distillation loss."""
    p = tempered_softmax(logits, temperature)
    return -(p * _log_softmax(logits, temperature)).sum(dim=1).mean()


def classification_loss(params: ClassifierParams, x, y, transfer: TransferParams | None = None):
    """Mean softmax cross-entropy over all output classes."""
    return cross_entropy(forward(params, transfer, x), y)


def distillation_loss(current: ClassifierParams, previous: ClassifierParams, x, temperature: float,
                      old_classes: int, transfer: TransferParams | None = None):
    """Cross-entropy from the previous model's tempered old-class distribution
    to the current one's, averaged over the batch."""
    with torch.no_grad():
        teacher = forward(previous, None, x)
    return distill_from_logits(forward(current, transfer, x), teacher, temperature, old_classes)


def combined_loss(current, previous, x, y, weights: LossWeights, old_classes: int,
                  transfer: TransferParams | None = None):
    lam = weights.lambda_
    lc = classification_loss(current, x, y, transfer)
    ld = distillation_loss(current, previous, x, weights.temperature, old_classes, transfer)
    return lam * lc + (1.0 - lam) * ld


def descend(loss, params: FlatParams, lr: float, epochs: int) -> FlatParams:
    """Plain full-batch gradient descent on a FlatParams loss."""
    for epoch in range(epochs):
        _, grad = value_and_grad(loss, params)
        params = params.with_values(params.values - lr * grad.values)
        v = params.values
        if not bool(torch.isfinite(v).all()) or bool((v.abs() > PARAM_LIMIT).any()):
            raise DivergenceError(f"parameters diverged at epoch {epoch}", epoch=epoch)
    return params


def _phase_loss(logits, y, teacher, weights, old_classes, use_distillation):
    if teacher is None or not use_distillation or old_classes == 0:
        return cross_entropy(logits, y)
    lam = weights.lambda_
    ld = distill_from_logits(logits, teacher, weights.temperature, old_classes)
    return lam * cross_entropy(logits, y) + (1.0 - lam) * ld


def model_level_update(base: ClassifierParams, transfer: TransferParams, previous: ClassifierParams,
                       x, y, weights: LossWeights, lr: float, epochs: int, old_classes: int,
                       *, train_head: bool = False, use_distillation: bool = True):
    """Train the transfer parameters on the combined loss with ``base`` frozen.

    With ``train_head`` the last layer of ``base`` is trained directly next to the
    transfer parameters (new-class rows cannot be learnt through per-row
    scaling alone). Returns ``(transfer, base)``.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    with torch.no_grad():
        teacher = forward(previous, None, x) if previous is not None else None
    t_flat = transfer.to_flat()
    if not train_head:
        def loss(flat):
            logits = forward(base, TransferParams.from_flat(flat), x)
            return _phase_loss(logits, y, teacher, weights, old_classes, use_distillation)

        t_flat = descend(loss, t_flat, lr, epochs)
        return TransferParams.from_flat(t_flat).detach(), base

    head_W, head_b = base.layers[-1]
    n_t = len(t_flat)
    joint = FlatParams.from_blocks(
        [(b.name, t_flat.blocks()[b.name]) for b in t_flat.layout] + [("headW", head_W), ("headb", head_b)])

    def split(flat):
        blocks = flat.blocks()
        t = TransferParams.from_flat(FlatParams(flat.values[:n_t], t_flat.layout))
        b = ClassifierParams(base.layers[:-1] + ((blocks["headW"], blocks["headb"]),), base.activation)
        return t, b

    def joint_loss(flat):
        t, b = split(flat)
        return _phase_loss(forward(b, t, x), y, teacher, weights, old_classes, use_distillation)

    joint = descend(joint_loss, joint, lr, epochs)
    t, b = split(joint)
    return t.detach(), b.detach()


def train_classifier(params: ClassifierParams, x, y, lr: float, epochs: int,
                     previous: ClassifierParams | None = None, weights: LossWeights | None = None,
                     old_classes: int = 0, use_distillation: bool = True) -> ClassifierParams:
    """Direct (over-writing) full-batch training of the model weights."""
    with torch.no_grad():
        teacher = forward(previous, None, x) if previous is not None else None
    weights = weights or LossWeights()

    def loss(flat):
        logits = forward(ClassifierParams.from_flat(flat, params.activation), None, x)
        return _phase_loss(logits, y, teacher, weights, old_classes, use_distillation)

    flat = descend(loss, params.to_flat(), lr, epochs)
    return ClassifierParams.from_flat(flat, params.activation).detach()


def init_classifier(in_width: int, num_classes: int, hidden: int | None, seed: int,
                    activation: Activation = "tanh") -> ClassifierParams:
    """Gaussian init with std 1/sqrt(fan_in); zero biases. ``hidden=None`` gives softmax regression."""
    rng = np.random.default_rng(seed)
    widths = [in_width] + ([hidden] if hidden else []) + [num_classes]
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        W = torch.from_numpy(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_out, fan_in)))
        layers.append((W, torch.zeros(fan_out, dtype=DTYPE)))
    return ClassifierParams(tuple(layers), activation)


def expand_head(params: ClassifierParams, new_classes: int, seed: int, std: float = 0.01) -> ClassifierParams:
    """Append ``new_classes`` output rows drawn from N(0, std^2); old rows untouched."""
    if new_classes == 0:
        return params
    rng = np.random.default_rng(seed)
    W, b = params.layers[-1]
    W_new = torch.from_numpy(rng.normal(0.0, std, size=(new_classes, W.shape[1])))
    b_new = torch.from_numpy(rng.normal(0.0, std, size=new_classes))
    head = (torch.cat([W, W_new]), torch.cat([b, b_new]))
    return ClassifierParams(params.layers[:-1] + (head,), params.activation)


def save_checkpoint(params: ClassifierParams, path) -> None:
    """JSON document; floats are written with ``repr`` so reloading is bit-exact."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "activation": params.activation,
        "tensors": [
            {"name": name, "shape": list(t.shape), "data": t.reshape(-1).tolist()}
            for q, (W, b) in enumerate(params.layers)
            for name, t in ((f"W{q}", W), (f"b{q}", b))
        ],
    }
    Path(path).write_text(json.dumps(doc) + "\n")


def load_checkpoint(path) -> ClassifierParams:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != 1:
        raise FormatError(f"{path}: not a version-1 checkpoint")
    tensors = {}
    for entry in doc["tensors"]:
        shape = tuple(entry["shape"])
        data = entry["data"]
        if math.prod(shape) != len(data):
            raise FormatError(f"{path}: tensor {entry['name']} has {len(data)} values for shape {shape}")
        tensors[entry["name"]] = torch.tensor(data, dtype=DTYPE).reshape(shape)
    n = len(tensors) // 2
    return ClassifierParams(tuple((tensors[f"W{q}"], tensors[f"b{q}"]) for q in range(n)), doc["activation"])
