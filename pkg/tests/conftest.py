import numpy as np
import pytest
import torch

torch.set_num_threads(2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_diff(fn, tensor, eps=1e-6, stride=1):
    """Central finite differences of scalar fn w.r.t. every entry of tensor."""
    flat = tensor.detach().reshape(-1)
    grad = torch.zeros_like(flat)
    for i in range(0, flat.numel(), stride):
        orig = flat[i].item()
        with torch.no_grad():
            flat[i] = orig + eps
            hi = float(fn())
            flat[i] = orig - eps
            lo = float(fn())
            flat[i] = orig
        grad[i] = (hi - lo) / (2 * eps)
    return grad.reshape(tensor.shape)


def rel_err(a: torch.Tensor, b: torch.Tensor, floor=1e-4) -> float:
    denom = torch.maximum(torch.maximum(a.abs(), b.abs()),
                          torch.full_like(a, floor))
    return float(((a - b).abs() / denom).max())
