"""Small function approximators shared by the flow and the denoiser."""

from __future__ import annotations

import math

import torch
from torch import nn

from .numerics import RngStream


def init_params(module: nn.Module, rng: RngStream, zero_last: nn.Module | None = None) -> nn.Module:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init drawn from ``rng``.

    Parameters are visited in sorted name order so the draw sequence does not
    depend on module construction order.  ``zero_last`` is zero-initialized.
    """
    zeroed = {id(p) for p in zero_last.parameters()} if zero_last is not None else set()
    owners = {}
    for mod in module.modules():
        for pname, p in mod.named_parameters(recurse=False):
            owners[id(p)] = (mod, pname)
    with torch.no_grad():
        for name, p in sorted(module.named_parameters()):
            if id(p) in zeroed:
                p.zero_()
                continue
            mod, pname = owners[id(p)]
            w = mod.weight
            if w.dim() < 2:
                continue
            fan_in = w.shape[1] * (w[0, 0].numel() if w.dim() > 2 else 1)
            bound = 1.0 / math.sqrt(fan_in)
            p.copy_((rng.uniform(p.shape) * 2 - 1) * bound)
    return module


class DenseNet(nn.Module):
    """Two hidden tanh layers; the output layer starts at zero."""

    def __init__(self, n_in: int, n_out: int, hidden: int = 64):
        super().__init__()
        self.body = nn.Sequential(nn.Linear(n_in, hidden), nn.Tanh(),
                                  nn.Linear(hidden, hidden), nn.Tanh())
        self.out = nn.Linear(hidden, n_out)

    def forward(self, x):
        return self.out(self.body(x))


class ConvNet(nn.Module):
    """3x3 -> 1x1 -> 3x3 convolutions with SiLU; the output layer starts at zero."""

    def __init__(self, c_in: int, c_out: int, hidden: int = 64):
        super().__init__()
        self.body = nn.Sequential(nn.Conv2d(c_in, hidden, 3, padding=1), nn.SiLU(),
                                  nn.Conv2d(hidden, hidden, 1), nn.SiLU())
        self.out = nn.Conv2d(hidden, c_out, 3, padding=1)

    def forward(self, x):
        return self.out(self.body(x))


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape ``(B, dim)``."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=1)
    return emb
