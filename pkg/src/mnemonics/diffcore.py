"""Differentiable numeric core.

Everything here works on float64 torch tensors. Parameters travel as
:class:`FlatParams`, a single 1-D vector plus a named block layout, so that
gradients, Hessian-vector products and unrolled adjoints are plain vector
arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import torch
from pydantic import BaseModel, ConfigDict, Field

from .errors import DivergenceError, NumericError, ShapeError

DTYPE = torch.float64

# |theta| above this during unrolling is treated as divergence
PARAM_LIMIT = 1e8


def as_dense(data, shape: Sequence[int] | None = None, name: str = "tensor") -> torch.Tensor:
    """Build a validated float64 tensor (finite entries, optional reshape)."""
    t = torch.as_tensor(data, dtype=DTYPE)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ShapeError(f"{name}: shape entries must be positive, got {shape}")
        if math.prod(shape) != t.numel():
            raise ShapeError(f"{name}: {t.numel()} values do not fill shape {shape}")
        t = t.reshape(shape)
    if not bool(torch.isfinite(t).all()):
        raise NumericError(f"{name} contains non-finite entries", block=name)
    return t


@dataclass(frozen=True)
class Block:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return math.prod(self.shape)


@dataclass(frozen=True)
class FlatParams:
    """A flat parameter vector with an ordered, contiguous block layout."""

    values: torch.Tensor
    layout: tuple[Block, ...]

    def __post_init__(self):
        offset = 0
        for block in self.layout:
            if block.offset != offset:
                raise ShapeError(f"block {block.name!r} starts at {block.offset}, expected {offset}")
            offset += block.size
        if self.values.dim() != 1 or self.values.numel() != offset:
            raise ShapeError(f"flat vector has {self.values.numel()} entries, layout needs {offset}")

    @classmethod
    def from_blocks(cls, blocks: Sequence[tuple[str, torch.Tensor]]) -> FlatParams:
        layout, chunks, offset = [], [], 0
        for name, tensor in blocks:
            tensor = torch.as_tensor(tensor, dtype=DTYPE)
            layout.append(Block(name, tuple(tensor.shape), offset))
            chunks.append(tensor.reshape(-1))
            offset += tensor.numel()
        values = torch.cat(chunks) if chunks else torch.zeros(0, dtype=DTYPE)
        return cls(values, tuple(layout))

    def blocks(self) -> dict[str, torch.Tensor]:
        """Views into ``values`` keyed by block name (gradients flow through)."""
        return {
            b.name: self.values[b.offset:b.offset + b.size].reshape(b.shape)
            for b in self.layout
        }

    def with_values(self, values: torch.Tensor) -> FlatParams:
        return FlatParams(values, self.layout)

    def zeros_like(self) -> FlatParams:
        return FlatParams(torch.zeros_like(self.values), self.layout)

    def detach(self) -> FlatParams:
        return FlatParams(self.values.detach().clone(), self.layout)

    def __len__(self):
        return self.values.numel()


class UnrollSpec(BaseModel):
    """Number of unrolled inner steps and their learning rate."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    steps: int = Field(5, ge=0)
    inner_lr: float = Field(0.2, gt=0)


def _offending_block(vec: torch.Tensor, layout: Sequence[Block], limit: float = math.inf):
    for b in layout:
        chunk = vec[b.offset:b.offset + b.size]
        if not bool(torch.isfinite(chunk).all()) or bool((chunk.abs() > limit).any()):
            return b.name
    return None


def _leaf(values: torch.Tensor) -> torch.Tensor:
    return values.detach().clone().requires_grad_(True)


def value_and_grad(loss: Callable[[FlatParams], torch.Tensor], params: FlatParams):
    """Loss value and exact reverse-mode gradient at ``params``.

    Returns ``(float, FlatParams)``; the gradient shares the input layout.
    """
    theta = _leaf(params.values)
    value = loss(params.with_values(theta))
    if not bool(torch.isfinite(value)):
        raise NumericError(f"loss is not finite ({float(value.detach())})", block=None)
    if value.requires_grad:
        (grad,) = torch.autograd.grad(value, theta, allow_unused=True)
    else:
        grad = None
    if grad is None:
        grad = torch.zeros_like(theta)
    bad = _offending_block(grad, params.layout)
    if bad is not None:
        raise NumericError(f"gradient of block {bad!r} is not finite", block=bad)
    return float(value.detach()), FlatParams(grad.detach(), params.layout)


def hessian_vector_product(loss, params: FlatParams, v: FlatParams) -> FlatParams:
    """H(params) @ v via double backward."""
    if v.layout != params.layout:
        raise ShapeError("vector layout does not match parameter layout")
    theta = _leaf(params.values)
    value = loss(params.with_values(theta))
    if not value.requires_grad:
        return params.zeros_like()
    (grad,) = torch.autograd.grad(value, theta, create_graph=True, allow_unused=True)
    if grad is None or not grad.requires_grad:
        return params.zeros_like()
    (hv,) = torch.autograd.grad(grad, theta, grad_outputs=v.values.detach(), allow_unused=True)
    if hv is None:
        hv = torch.zeros_like(theta)
    return FlatParams(hv.detach(), params.layout)


def _check_state(theta: torch.Tensor, layout, step: int):
    bad = _offending_block(theta, layout, PARAM_LIMIT)
    if bad is not None:
        raise DivergenceError(
            f"unrolled parameters diverged at step {step} (block {bad!r})", step=step, block=bad)


def unroll(inner_loss, theta0: FlatParams, exemplars: torch.Tensor, spec: UnrollSpec) -> FlatParams:
    """Run the K plain gradient-descent inner steps without tracking E."""
    theta = theta0.values.detach()
    for t in range(spec.steps):
        leaf = _leaf(theta)
        value = inner_loss(theta0.with_values(leaf), exemplars)
        (grad,) = torch.autograd.grad(value, leaf, allow_unused=True)
        if grad is not None:
            theta = theta - spec.inner_lr * grad
        _check_state(theta, theta0.layout, t)
    return theta0.with_values(theta.detach())


def unrolled_value_and_hypergradient(inner_loss, outer_loss, theta0: FlatParams,
                                     exemplars: torch.Tensor, val, spec: UnrollSpec):
    """Outer loss after K unrolled inner steps, and its exact gradient wrt ``exemplars``.

    ``inner_loss(params, exemplars)`` drives the inner descent
    ``theta_{t+1} = theta_t - lr * grad_theta inner_loss(theta_t, E)``;
    ``outer_loss(params, val)`` is evaluated at theta_K. The reverse pass keeps
    every inner gradient graph and pushes the adjoint back through them with
    Hessian-vector products, so no first-order truncation is involved.
    """
    layout = theta0.layout
    E = exemplars.detach().clone().requires_grad_(True)
    lr = spec.inner_lr

    tape = []
    theta = theta0.values.detach()
    for t in range(spec.steps):
        leaf = _leaf(theta)
        value = inner_loss(theta0.with_values(leaf), E)
        (grad,) = torch.autograd.grad(value, leaf, create_graph=True, allow_unused=True)
        if grad is None:
            grad = torch.zeros_like(leaf)
        tape.append((leaf, grad))
        theta = (leaf - lr * grad).detach()
        _check_state(theta, layout, t)

    final = _leaf(theta)
    out = outer_loss(theta0.with_values(final), val)
    if not bool(torch.isfinite(out)):
        raise DivergenceError("outer loss is not finite", step=spec.steps)
    if out.requires_grad:
        (adjoint,) = torch.autograd.grad(out, final, allow_unused=True)
    else:
        adjoint = None
    if adjoint is None:
        adjoint = torch.zeros_like(final)

    hyper = torch.zeros_like(E)
    for leaf, grad in reversed(tape):
        if not grad.requires_grad:
            continue
        d_theta, d_e = torch.autograd.grad(grad, (leaf, E), grad_outputs=adjoint, allow_unused=True)
        if d_e is not None:
            hyper = hyper - lr * d_e
        if d_theta is not None:
            adjoint = adjoint - lr * d_theta

    hyper = hyper.detach()
    if not bool(torch.isfinite(hyper).all()):
        raise DivergenceError("hypergradient is not finite", step=0)
    return float(out.detach()), hyper


def unrolled_hypergradient(inner_loss, outer_loss, theta0: FlatParams, exemplars: torch.Tensor,
                           val, spec: UnrollSpec) -> torch.Tensor:
    """Gradient of the outer loss at theta_K wrt ``exemplars`` (same shape)."""
    return unrolled_value_and_hypergradient(inner_loss, outer_loss, theta0, exemplars, val, spec)[1]
