"""Shared test utilities: random unit batches, finite differences, tiny configs."""

from __future__ import annotations

import numpy as np
import torch

from tscir.config import ModelConfig


def unit_rows(rng: np.random.Generator, B: int, d: int) -> torch.Tensor:
    x = rng.standard_normal((B, d))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return torch.from_numpy(x)


def central_fd(f, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central finite-difference gradient of the scalar f() w.r.t. tensor x (in place)."""
    grad = torch.zeros_like(x)
    flat, gflat = x.data.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = float(f())
        flat[i] = orig - eps
        lo = float(f())
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def rel_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / denom


def grad_check(f, tensors, eps: float = 1e-6) -> float:
    """Relative error between autograd and central differences over all of `tensors`.

    Gradients are concatenated before comparing, so parameters whose true
    gradient is exactly zero (e.g. key biases under softmax shift invariance)
    do not turn finite-difference round-off into a spurious relative error.
    """
    loss = f()
    analytic = torch.autograd.grad(loss, tensors, allow_unused=True)
    with torch.no_grad():
        a = torch.cat([(torch.zeros_like(t) if g is None else g).reshape(-1)
                       for t, g in zip(tensors, analytic)])
        n = torch.cat([central_fd(f, t, eps).reshape(-1) for t in tensors])
    return rel_error(a, n)


def tiny_config(**overrides) -> ModelConfig:
    base = dict(embed_dim=4, image_size=16, patch_size=8, max_tokens=12, num_layers_img=1,
                num_layers_txt=2, num_heads=2, adapter_dim=2, latent_dim=2)
    base.update(overrides)
    return ModelConfig(**base)


def randomize(module: torch.nn.Module, seed: int, std: float = 0.3) -> None:
    """Overwrite every parameter (including zero-initialized ones) with N(0, std)."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)


def named_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {n: p.detach().to(torch.float64).numpy().copy() for n, p in module.named_parameters()}
