"""Central finite differences for scalar functions of one float64 tensor."""
import numpy as np
import torch


def numeric_grad(fn, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    x = x.detach().clone()
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + h
            up = fn(x).item()
            flat[i] = old - h
            down = fn(x).item()
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
    return g


def analytic_grad(fn, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    fn(x).backward()
    return x.grad


def grad_rel_error(fn, x: torch.Tensor) -> float:
    a, n = analytic_grad(fn, x), numeric_grad(fn, x)
    return float(np.linalg.norm((a - n).numpy()) / max(np.linalg.norm(n.numpy()), 1e-300))
