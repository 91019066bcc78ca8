"""DDPM machinery over the kernel coordinates ``z``.

Timesteps are 1-based throughout: ``t = 1`` is the least noisy step.  A
subsampled schedule keeps the original timestep of every retained step in
``NoiseSchedule.timesteps`` so the denoiser is always queried at the time it
was trained on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .degradations import nearest_upsample
from .nets import init_params, timestep_embedding
from .numerics import ContractError, RngStream

SIGMA_VARIANTS = ("beta", "posterior")


@dataclass
class NoiseSchedule:
    betas: np.ndarray
    timesteps: np.ndarray
    sigma_variant: str = "beta"
    loss_weights: np.ndarray | None = None
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)
    sigmas: np.ndarray = field(init=False)

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        self.timesteps = np.asarray(self.timesteps, dtype=np.int64)
        if self.betas.ndim != 1 or len(self.betas) == 0:
            raise ContractError("schedule needs at least one step")
        if np.any(self.betas <= 0) or np.any(self.betas >= 1):
            raise ContractError("every beta must lie in (0, 1)")
        if self.sigma_variant not in SIGMA_VARIANTS:
            raise ContractError(f"unknown sigma variant {self.sigma_variant!r}")
        if self.loss_weights is None:
            self.loss_weights = np.ones_like(self.betas)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)
        self._fill_sigmas()

    def _fill_sigmas(self):
        if self.sigma_variant == "beta":
            var = self.betas.copy()
        else:
            prev = np.concatenate([[1.0], self.alpha_bars[:-1]])
            var = self.betas * (1 - prev) / (1 - self.alpha_bars)
        self.sigmas = np.sqrt(var)

    @classmethod
    def from_alpha_bars(cls, alpha_bars, timesteps, sigma_variant="beta", loss_weights=None):
        """Schedule whose cumulative products are exactly ``alpha_bars``, not a rounded cumprod."""
        abar = np.asarray(alpha_bars, dtype=np.float64)
        prev = np.concatenate([[1.0], abar[:-1]])
        out = cls(1.0 - abar / prev, timesteps, sigma_variant, loss_weights)
        out.alphas = abar / prev
        out.alpha_bars = abar.copy()
        out._fill_sigmas()
        return out

    @property
    def T(self) -> int:
        return len(self.betas)

    def _check(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ContractError(f"timestep outside [1, {self.T}]")

    def alpha_bar(self, t) -> np.ndarray:
        self._check(t)
        return self.alpha_bars[np.asarray(t) - 1]

    def hyperparams(self) -> dict:
        return {"T": str(self.T), "sigma_variant": self.sigma_variant,
                "betas": ",".join(repr(float(b)) for b in self.betas),
                "timesteps": ",".join(str(int(t)) for t in self.timesteps)}


def make_linear_schedule(T: int = 1000, beta_1: float = 1e-4, beta_T: float = 0.02,
                         sigma_variant: str = "beta") -> NoiseSchedule:
    if T < 1 or not 0 < beta_1 <= beta_T < 1:
        raise ContractError("need T >= 1 and 0 < beta_1 <= beta_T < 1")
    betas = np.linspace(beta_1, beta_T, T) if T > 1 else np.array([beta_1])
    return NoiseSchedule(betas, np.arange(1, T + 1), sigma_variant)


def subsample_schedule(schedule: NoiseSchedule, n: int) -> NoiseSchedule:
    """Keep ``n`` evenly spaced steps ending at ``T``; kept ``alpha_bar`` values are preserved."""
    T = schedule.T
    if not 1 <= n <= T:
        raise ContractError(f"n must lie in [1, {T}], got {n}")
    if n == T:
        keep = np.arange(1, T + 1)
    else:
        keep = np.round(np.arange(1, n + 1) * T / n).astype(np.int64)
    return NoiseSchedule.from_alpha_bars(schedule.alpha_bars[keep - 1], schedule.timesteps[keep - 1],
                                         schedule.sigma_variant, schedule.loss_weights[keep - 1])


def _bcast(values, like: torch.Tensor) -> torch.Tensor:
    v = torch.as_tensor(np.asarray(values, dtype=np.float64)).to(like.dtype)
    if v.dim() == 0:
        return v
    return v.reshape((-1,) + (1,) * (like.dim() - 1))


def forward_noise(z0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """``sqrt(abar_t) z0 + sqrt(1 - abar_t) eps``; ``t`` scalar or one per row."""
    if eps.shape != z0.shape:
        raise ContractError("eps must match z0's shape")
    abar = schedule.alpha_bar(t)
    return _bcast(np.sqrt(abar), z0) * z0 + _bcast(np.sqrt(1 - abar), z0) * eps


class VectorDenoiser(nn.Module):
    """Dense residual noise predictor for vector latents."""

    def __init__(self, z_dim: int, y_dim: int = 0, hidden: int = 128, n_blocks: int = 2,
                 emb_dim: int = 32):
        super().__init__()
        self.z_dim, self.y_dim, self.emb_dim = z_dim, y_dim, emb_dim
        self.inp = nn.Linear(z_dim + y_dim, hidden)
        self.temb = nn.Sequential(nn.Linear(emb_dim, hidden), nn.SiLU(), nn.Linear(hidden, hidden))
        self.blocks = nn.ModuleList(
            nn.ModuleDict({"a": nn.Linear(hidden, hidden), "b": nn.Linear(hidden, hidden)})
            for _ in range(n_blocks))
        self.out = nn.Linear(hidden, z_dim)

    def forward(self, z_t, y, t):
        h = z_t if y is None or self.y_dim == 0 else torch.cat([z_t, y.reshape(len(y), -1)], dim=1)
        h = self.inp(h)
        e = self.temb(timestep_embedding(t, self.emb_dim).to(h.dtype))
        for blk in self.blocks:
            h = h + blk["b"](F.silu(blk["a"](F.silu(h + e))))
        return self.out(F.silu(h))


class _ResBlock(nn.Module):
    def __init__(self, ch: int, emb: int):
        super().__init__()
        self.n1 = nn.GroupNorm(min(8, ch), ch)
        self.c1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.e = nn.Linear(emb, ch)
        self.n2 = nn.GroupNorm(min(8, ch), ch)
        self.c2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, h, e):
        r = self.c1(F.silu(self.n1(h))) + self.e(e)[:, :, None, None]
        return h + self.c2(F.silu(self.n2(r)))


class ImageDenoiser(nn.Module):
    """Two-resolution convolutional encoder-decoder.

    ``y`` is concatenated to ``z_t`` along channels (nearest-upsampled first
    if its grid is coarser); the timestep enters every residual block.
    """

    def __init__(self, z_channels: int, y_channels: int, base: int = 64, emb_dim: int = 64):
        super().__init__()
        self.z_channels, self.y_channels, self.emb_dim = z_channels, y_channels, emb_dim
        self.temb = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.inp = nn.Conv2d(z_channels + y_channels, base, 3, padding=1)
        self.enc = _ResBlock(base, emb_dim)
        self.down = nn.Conv2d(base, 2 * base, 3, stride=2, padding=1)
        self.mid = _ResBlock(2 * base, emb_dim)
        self.up = nn.Conv2d(2 * base, base, 3, padding=1)
        self.fuse = nn.Conv2d(2 * base, base, 3, padding=1)
        self.dec = _ResBlock(base, emb_dim)
        self.norm = nn.GroupNorm(min(8, base), base)
        self.out = nn.Conv2d(base, z_channels, 3, padding=1)

    def forward(self, z_t, y, t):
        if y is not None and self.y_channels:
            if y.shape[-1] != z_t.shape[-1]:
                y = nearest_upsample(y, z_t.shape[-1] // y.shape[-1])
            z_t = torch.cat([z_t, y], dim=1)
        e = self.temb(timestep_embedding(t, self.emb_dim).to(z_t.dtype))
        h0 = self.enc(self.inp(z_t), e)
        h = self.mid(self.down(h0), e)
        h = self.up(F.interpolate(h, size=h0.shape[-2:], mode="nearest"))
        h = self.dec(self.fuse(torch.cat([h, h0], dim=1)), e)
        return self.out(F.silu(self.norm(h)))


def make_denoiser(z_shape: tuple, y_shape: tuple | None, hidden: int = 64,
                  rng: RngStream | None = None) -> nn.Module:
    """Vector or image denoiser for the given latent shapes, output layer at zero."""
    y_size = 0 if y_shape is None else y_shape[0]
    if len(z_shape) == 1:
        net = VectorDenoiser(z_shape[0], y_size, hidden=hidden)
    else:
        net = ImageDenoiser(z_shape[0], y_size, base=hidden)
    if rng is not None:
        init_params(net, rng, zero_last=net.out)
    return net


def ddpm_loss(z0: torch.Tensor, y, denoiser, schedule: NoiseSchedule, rng: RngStream | None = None,
              t=None, eps=None) -> torch.Tensor:
    """Batch mean of ``lambda_t * ||eps_theta(z_t, y, t) - eps||^2``.

    ``t`` and ``eps`` are drawn from ``rng`` unless given.  ``t`` indexes the
    schedule's own steps.
    """
    B = z0.shape[0]
    if t is None:
        t = rng.integers(1, schedule.T + 1, size=B)
    t = np.broadcast_to(np.asarray(t), (B,))
    if eps is None:
        eps = rng.normal(z0.shape, dtype=z0.dtype)
    z_t = forward_noise(z0, t, eps, schedule)
    pred = denoiser(z_t, y, torch.as_tensor(schedule.timesteps[t - 1]))
    if pred.shape != eps.shape:
        raise ContractError(f"denoiser output {tuple(pred.shape)} does not match z {tuple(eps.shape)}")
    err = ((pred - eps) ** 2).reshape(B, -1).sum(dim=1)
    return (_bcast(schedule.loss_weights[t - 1], err) * err).mean()


def _draw(rng, shape, dtype):
    if isinstance(rng, RngStream):
        return rng.normal(shape, dtype=dtype)
    return torch.stack([r.normal(shape[1:], dtype=dtype) for r in rng])


def reverse_step(z_t: torch.Tensor, y, k: int, denoiser, schedule: NoiseSchedule,
                 rng: RngStream | Sequence[RngStream] | None = None, eps_pred=None) -> torch.Tensor:
    """One ancestral step from schedule step ``k`` to ``k - 1``.

    ``rng`` may be a single stream or one stream per batch row.  At ``k = 1``
    no noise is added.
    """
    schedule._check(k)
    i = k - 1
    if eps_pred is None:
        t_model = torch.full((z_t.shape[0],), int(schedule.timesteps[i]), dtype=torch.int64)
        eps_pred = denoiser(z_t, y, t_model)
    coef = schedule.betas[i] / np.sqrt(1 - schedule.alpha_bars[i])
    mean = (z_t - coef * eps_pred) / np.sqrt(schedule.alphas[i])
    if k == 1 or schedule.sigmas[i] == 0 or rng is None:
        return mean
    return mean + schedule.sigmas[i] * _draw(rng, tuple(z_t.shape), z_t.dtype)


@torch.no_grad()
def ancestral_sample(denoiser, schedule: NoiseSchedule, z_shape: tuple, y=None, n: int | None = None,
                     rng: RngStream | Sequence[RngStream] | None = None, z_T=None) -> torch.Tensor:
    """Run the reverse chain from ``z_T ~ N(0, I)`` to ``z_0``."""
    if n is None:
        n = len(y) if y is not None else len(rng)
    shape = (n,) + tuple(z_shape)
    z = _draw(rng, shape, torch.float32) if z_T is None else z_T
    for k in range(schedule.T, 0, -1):
        z = reverse_step(z, y, k, denoiser, schedule, rng)
    return z
