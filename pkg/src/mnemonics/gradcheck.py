"""Finite-difference verification of the gradient machinery.

The oracles below only ever evaluate losses forward; they never call the
autodiff paths they check.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .diffcore import (DTYPE, FlatParams, UnrollSpec, hessian_vector_product, unroll,
                       unrolled_hypergradient, value_and_grad)
from .model import (ClassifierParams, LossWeights, TransferParams, cross_entropy, forward,
                    init_classifier, _phase_loss)

THRESHOLDS = {"value_and_grad": 1e-6, "model_level_update": 1e-5, "hvp": 1e-4, "hypergradient": 1e-4}

SIZES = {
    "small": dict(hidden=8, n_exemplars=4, n_val=40, steps=3, inner_lr=0.01),
    "medium": dict(hidden=16, n_exemplars=8, n_val=200, steps=5, inner_lr=0.1),
}


def relative_error(a, b) -> float:
    """||a - b|| / max(||a||, ||b||); 0 when both vanish."""
    a = torch.as_tensor(a, dtype=DTYPE).reshape(-1)
    b = torch.as_tensor(b, dtype=DTYPE).reshape(-1)
    scale = max(float(a.norm()), float(b.norm()))
    return 0.0 if scale == 0.0 else float((a - b).norm()) / scale


def central_difference(f, x: torch.Tensor, eps: float) -> torch.Tensor:
    x = x.detach().clone()
    flat = x.reshape(-1)
    out = torch.zeros_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + eps
            hi = float(f(x))
            flat[i] = orig - eps
            lo = float(f(x))
            flat[i] = orig
            out[i] = (hi - lo) / (2 * eps)
    return out.reshape(x.shape)


@dataclass
class CheckResult:
    name: str
    error: float
    threshold: float
    params: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.error < self.threshold


@dataclass
class ReferenceInstance:
    model: ClassifierParams
    exemplars: torch.Tensor
    exemplar_labels: torch.Tensor
    val_x: torch.Tensor
    val_y: torch.Tensor
    spec: UnrollSpec

    def losses(self):
        act, ey = self.model.activation, self.exemplar_labels

        def inner(flat, E):
            return cross_entropy(forward(ClassifierParams.from_flat(flat, act), None, E), ey)

        def outer(flat, val):
            return cross_entropy(forward(ClassifierParams.from_flat(flat, act), None, val[0]), val[1])

        return inner, outer


def reference_instance(hidden=8, n_exemplars=4, n_val=40, steps=3, inner_lr=0.01, seed=0,
                       width=2) -> ReferenceInstance:
    """Two Gaussian classes, a tanh hidden layer, exemplars split evenly over the classes."""
    rng = np.random.default_rng(seed)
    means = np.array([[-1.0, 0.0], [1.0, 0.0]])[:, :width] if width == 2 else rng.normal(size=(2, width))
    per = n_exemplars // 2
    ey = np.repeat([0, 1], [per, n_exemplars - per])
    ex = means[ey] + rng.normal(size=(n_exemplars, width))
    vy = np.repeat([0, 1], [n_val // 2, n_val - n_val // 2])
    vx = means[vy] + rng.normal(size=(n_val, width))
    model = init_classifier(width, 2, hidden, seed + 1)
    # larger initial biases keep tanh units out of the linear regime
    model = ClassifierParams(
        tuple((W, torch.from_numpy(rng.normal(0, 0.5, size=b.shape))) for W, b in model.layers),
        model.activation)
    return ReferenceInstance(model, torch.from_numpy(ex), torch.from_numpy(ey),
                             torch.from_numpy(vx), torch.from_numpy(vy),
                             UnrollSpec(steps=steps, inner_lr=inner_lr))


def check_value_and_grad(eps=1e-5, seed=0) -> CheckResult:
    """Softmax regression cross-entropy on one sample."""
    rng = np.random.default_rng(seed)
    x = torch.from_numpy(rng.normal(size=(1, 3)))
    y = torch.tensor([1])
    model = init_classifier(3, 4, None, seed, "identity")
    theta = model.to_flat()

    def loss(flat):
        return cross_entropy(forward(ClassifierParams.from_flat(flat, "identity"), None, x), y)

    _, grad = value_and_grad(loss, theta)
    fd = central_difference(lambda v: loss(theta.with_values(v)), theta.values, eps)
    return CheckResult("value_and_grad", relative_error(grad.values, fd),
                       THRESHOLDS["value_and_grad"], {"eps": eps, "seed": seed})


def check_model_level_gradient(eps=1e-5, seed=0) -> CheckResult:
    """Gradient of the combined loss with respect to transfer parameters."""
    rng = np.random.default_rng(seed)
    previous = init_classifier(2, 2, 6, seed)
    base = init_classifier(2, 3, 6, seed + 1)
    x = torch.from_numpy(rng.normal(size=(12, 2)))
    y = torch.from_numpy(rng.integers(0, 3, size=12))
    t0 = TransferParams(tuple(
        (torch.from_numpy(1 + 0.1 * rng.normal(size=s.shape)), torch.from_numpy(0.1 * rng.normal(size=t.shape)))
        for s, t in TransferParams.identity(base).layers))
    flat = t0.to_flat()
    with torch.no_grad():
        teacher = forward(previous, None, x)
    weights = LossWeights()

    def loss(f):
        return _phase_loss(forward(base, TransferParams.from_flat(f), x), y, teacher, weights, 2, True)

    _, grad = value_and_grad(loss, flat)
    fd = central_difference(lambda v: loss(flat.with_values(v)), flat.values, eps)
    return CheckResult("model_level_update", relative_error(grad.values, fd),
                       THRESHOLDS["model_level_update"], {"eps": eps, "seed": seed})


def check_hvp(eps=1e-5, seed=0, hidden=8) -> CheckResult:
    """HVP against the finite difference of gradients along v."""
    inst = reference_instance(hidden=hidden, seed=seed)
    act = inst.model.activation
    theta = inst.model.to_flat()

    def loss(flat):
        return cross_entropy(forward(ClassifierParams.from_flat(flat, act), None, inst.val_x), inst.val_y)

    v = theta.with_values(torch.from_numpy(np.random.default_rng(seed + 7).normal(size=len(theta))))
    hv = hessian_vector_product(loss, theta, v)
    _, g_hi = value_and_grad(loss, theta.with_values(theta.values + eps * v.values))
    _, g_lo = value_and_grad(loss, theta.with_values(theta.values - eps * v.values))
    fd = (g_hi.values - g_lo.values) / (2 * eps)
    return CheckResult("hvp", relative_error(hv.values, fd), THRESHOLDS["hvp"],
                       {"eps": eps, "seed": seed, "hidden": hidden})


def check_hypergradient(eps=1e-5, seed=0, size="small", steps=None) -> CheckResult:
    kw = dict(SIZES[size])
    if steps is not None:
        kw["steps"] = steps
    inst = reference_instance(seed=seed, **kw)
    inner, outer = inst.losses()
    theta0 = inst.model.to_flat()
    val = (inst.val_x, inst.val_y)
    hyper = unrolled_hypergradient(inner, outer, theta0, inst.exemplars, val, inst.spec)

    def objective(E):
        with torch.enable_grad():
            theta = unroll(inner, theta0, E, inst.spec)
        return outer(theta, val)

    fd = central_difference(objective, inst.exemplars, eps)
    return CheckResult("hypergradient", relative_error(hyper, fd), THRESHOLDS["hypergradient"],
                       {"eps": eps, "seed": seed, "size": size, **kw})


def run_suite(size="small", eps=1e-5) -> list[CheckResult]:
    hidden = SIZES[size]["hidden"]
    return [
        check_value_and_grad(eps),
        check_model_level_gradient(eps),
        check_hvp(eps, hidden=hidden),
        check_hypergradient(eps, size=size),
        check_hypergradient(eps, size=size, steps=0),
    ]
