import numpy as np
import torch


def central_fd_grad(fn, x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Central finite-difference gradient of a scalar function, 64-bit."""
    x = x.detach().double()
    g = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = float(fn(x))
        flat[i] = orig - eps
        lo = float(fn(x))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(float(a.norm()), float(b.norm()), 1e-12)
    return float((a - b).norm()) / denom


def assert_grad_matches(fn, x: torch.Tensor, tol: float = 1e-3, eps: float = 1e-5):
    x = x.detach().double().requires_grad_(True)
    fn(x).backward()
    fd = central_fd_grad(fn, x, eps=eps)
    err = relative_error(x.grad, fd)
    assert err < tol, f"gradient relative error {err:.2e} >= {tol}"


def make_volume_pair(seed: int, edge: int = 8):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1, 1, (edge, edge, edge))
    b = rng.uniform(-1, 1, (edge, edge, edge))
    return torch.from_numpy(a), torch.from_numpy(b)
