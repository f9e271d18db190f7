import numpy as np
import pytest
import torch

torch.set_default_dtype(torch.float64)


def central_diff(f, x, eps=1e-5):
    """Per-coordinate central differences of scalar f at tensor x (forward evaluations only)."""
    x = x.detach().clone()
    flat = x.reshape(-1)
    out = torch.zeros_like(flat)
    for i in range(flat.numel()):
        orig = float(flat[i])
        flat[i] = orig + eps
        hi = float(f(x))
        flat[i] = orig - eps
        lo = float(f(x))
        flat[i] = orig
        out[i] = (hi - lo) / (2 * eps)
    return out.reshape(x.shape)


def rel_err(a, b):
    a = torch.as_tensor(a, dtype=torch.float64).reshape(-1)
    b = torch.as_tensor(b, dtype=torch.float64).reshape(-1)
    scale = max(float(a.norm()), float(b.norm()))
    if scale == 0.0:
        return 0.0
    return float((a - b).norm()) / scale


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
