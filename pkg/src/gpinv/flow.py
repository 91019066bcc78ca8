"""Affine-coupling flow ``f: X <-> Y x Z``.

Images of shape ``(C, H, W)`` are squeezed once by the scale ``s`` into
``(s*s*C, H/s, W/s)``.  Squeezed channel ``(i*s + j)*C + c`` holds pixel
``(h*s + i, w*s + j)`` of input channel ``c``.  After the coupling stack the
first ``C`` channels are the measurement coordinates ``y`` and the remaining
``(s*s - 1)*C`` channels are the kernel coordinates ``z``.  For vector inputs
``(n,)`` the first ``m`` coordinates are ``y``.

Each coupling layer updates both halves of its partition::

    u' = exp(psi~(v)) * u + phi(v)
    v' = exp(rho~(u')) * v + eta(u')

with ``psi~ = c * tanh(psi / c)`` (likewise for ``rho``).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .nets import ConvNet, DenseNet, init_params
from .numerics import ContractError, NumericError, RngStream

PARTITIONS = ("checkerboard", "channel-split")
LAYOUT_VERSION = 1


def squeeze(x: torch.Tensor, factor: int) -> torch.Tensor:
    B, C, H, W = x.shape
    if H % factor or W % factor:
        raise ContractError(f"spatial shape {(H, W)} not divisible by {factor}")
    f = factor
    x = x.reshape(B, C, H // f, f, W // f, f).permute(0, 3, 5, 1, 2, 4)
    return x.reshape(B, f * f * C, H // f, W // f)


def unsqueeze(x: torch.Tensor, factor: int) -> torch.Tensor:
    B, K, h, w = x.shape
    f = factor
    if K % (f * f):
        raise ContractError(f"{K} channels not divisible by {f * f}")
    C = K // (f * f)
    x = x.reshape(B, f, f, C, h, w).permute(0, 3, 4, 1, 5, 2)
    return x.reshape(B, C, h * f, w * f)


@dataclass
class LatentPair:
    """Measurement coordinates ``y`` and kernel coordinates ``z``."""

    y: torch.Tensor
    z: torch.Tensor

    def __iter__(self):
        return iter((self.y, self.z))

    @property
    def size(self) -> int:
        return self.y[0].numel() + self.z[0].numel()


class _Partition(nn.Module):
    """Splits a batch into the ``(u, v)`` halves of one coupling layer.

    Channel splits slice; checkerboard splits keep the full shape and zero
    the complementary positions, so ``merge`` is a plain sum.
    """

    def __init__(self, kind: str, shape: tuple, swap: bool):
        super().__init__()
        if kind not in PARTITIONS:
            raise ContractError(f"unknown partition {kind!r}")
        self.kind, self.shape, self.swap = kind, tuple(shape), swap
        if kind == "checkerboard" and len(shape) == 3:
            _, h, w = shape
            grid = (torch.arange(h)[:, None] + torch.arange(w)[None]) % 2
            mask = (grid == int(swap)).float()[None, None]
            self.register_buffer("mask", mask, persistent=False)
        else:
            n = shape[0]
            if kind == "checkerboard":
                idx_u = torch.arange(int(swap), n, 2)
            else:
                k = (n + 1) // 2
                idx_u = torch.arange(n - k, n) if swap else torch.arange(k)
            keep = torch.ones(n, dtype=torch.bool)
            keep[idx_u] = False
            self.register_buffer("idx_u", idx_u, persistent=False)
            self.register_buffer("idx_v", torch.arange(n)[keep], persistent=False)
            order = torch.cat([idx_u, self.idx_v])
            self.register_buffer("inv_order", torch.argsort(order), persistent=False)

    @property
    def masked(self) -> bool:
        return hasattr(self, "mask")

    def sizes(self) -> tuple:
        if self.masked:
            c = self.shape[0]
            return c, c
        return len(self.idx_u), len(self.idx_v)

    def split(self, x):
        if self.masked:
            m = self.mask.to(x.dtype)
            return x * m, x * (1 - m)
        return x[:, self.idx_u], x[:, self.idx_v]

    def merge(self, u, v):
        if self.masked:
            return u + v
        return torch.cat([u, v], dim=1)[:, self.inv_order]

    def restrict_u(self, t):
        return t * self.mask.to(t.dtype) if self.masked else t

    def restrict_v(self, t):
        return t * (1 - self.mask.to(t.dtype)) if self.masked else t


def _clamp(s: torch.Tensor, c: float | None) -> torch.Tensor:
    if c is None or c == float("inf"):
        return s
    return c * torch.tanh(s / c)


def _sum_per_sample(t: torch.Tensor) -> torch.Tensor:
    return t.reshape(t.shape[0], -1).sum(dim=1)


class CouplingLayer(nn.Module):
    """One affine coupling layer.

    ``net_u`` maps ``v`` to the stacked ``(psi, phi)`` acting on ``u``;
    ``net_v`` maps ``u'`` to ``(rho, eta)`` acting on ``v``.  Both return
    ``2 * channels`` along dimension 1.
    """

    def __init__(self, partition: _Partition, net_u: nn.Module, net_v: nn.Module,
                 clamp: float | None = 2.0, index: int = 0):
        super().__init__()
        self.partition = partition
        self.net_u = net_u
        self.net_v = net_v
        self.clamp = clamp
        self.index = index

    def _scale_shift(self, net, inp, restrict):
        out = net(inp)
        if not torch.isfinite(out).all():
            raise NumericError(f"non-finite subnet output in coupling layer {self.index}")
        log_s, shift = out.chunk(2, dim=1)
        return restrict(_clamp(log_s, self.clamp)), restrict(shift)

    def forward(self, x):
        u, v = self.partition.split(x)
        u, v, logdet = coupling_forward(u, v, self)
        return self.partition.merge(u, v), logdet

    def inverse(self, x):
        u, v = self.partition.split(x)
        u, v = coupling_inverse(u, v, self)
        return self.partition.merge(u, v)


def coupling_forward(u, v, layer: CouplingLayer):
    """Returns ``(u', v', logdet)`` with one log-determinant per batch row."""
    p = layer.partition
    psi, phi = layer._scale_shift(layer.net_u, v, p.restrict_u)
    u2 = u * torch.exp(psi) + phi
    rho, eta = layer._scale_shift(layer.net_v, u2, p.restrict_v)
    v2 = v * torch.exp(rho) + eta
    return u2, v2, _sum_per_sample(psi) + _sum_per_sample(rho)


def coupling_inverse(u2, v2, layer: CouplingLayer):
    p = layer.partition
    rho, eta = layer._scale_shift(layer.net_v, u2, p.restrict_v)
    v = (v2 - eta) * torch.exp(-rho)
    psi, phi = layer._scale_shift(layer.net_u, v, p.restrict_u)
    u = (u2 - phi) * torch.exp(-psi)
    return u, v


class CouplingFlow(nn.Module):
    """Single squeeze followed by a stack of coupling layers.

    Parameters
    ----------
    in_shape : tuple
        ``(C, H, W)`` for images or ``(n,)`` for vectors.
    y_size : int
        Channels (images) or coordinates (vectors) assigned to ``y``.
    scale : int
        Squeeze factor; must be 1 for vectors.
    """

    def __init__(self, in_shape, y_size: int, scale: int = 1, n_layers: int = 8,
                 hidden: int = 64, clamp: float | None = 2.0, rng: RngStream | None = None,
                 layers: list | None = None):
        super().__init__()
        self.in_shape = tuple(int(s) for s in in_shape)
        self.scale = int(scale)
        self.y_size = int(y_size)
        self.hidden = hidden
        self.clamp = clamp
        self.image = len(self.in_shape) == 3
        if self.image:
            C, H, W = self.in_shape
            self.latent_shape = (scale * scale * C, H // scale, W // scale)
            if H % scale or W % scale:
                raise ContractError(f"input {self.in_shape} not divisible by scale {scale}")
        else:
            if scale != 1:
                raise ContractError("vector flows use scale 1")
            self.latent_shape = self.in_shape
        if not 0 < self.y_size < self.latent_shape[0]:
            raise ContractError(f"y_size {y_size} must leave a non-empty z for latent {self.latent_shape}")
        if layers is None:
            layers = [self._make_layer(i, hidden, clamp) for i in range(n_layers)]
        self.layers = nn.ModuleList(layers)
        if rng is not None:
            for layer in self.layers:
                init_params(layer.net_u, rng, zero_last=layer.net_u.out)
                init_params(layer.net_v, rng, zero_last=layer.net_v.out)

    def _make_layer(self, i: int, hidden: int, clamp) -> CouplingLayer:
        part = _Partition(PARTITIONS[i % 2], self.latent_shape, swap=bool((i // 2) % 2))
        nu, nv = part.sizes()
        if self.image:
            net_u, net_v = ConvNet(nv, 2 * nu, hidden), ConvNet(nu, 2 * nv, hidden)
        else:
            net_u, net_v = DenseNet(nv, 2 * nu, hidden), DenseNet(nu, 2 * nv, hidden)
        return CouplingLayer(part, net_u, net_v, clamp, index=i)

    @property
    def y_shape(self) -> tuple:
        return (self.y_size,) + self.latent_shape[1:]

    @property
    def z_shape(self) -> tuple:
        return (self.latent_shape[0] - self.y_size,) + self.latent_shape[1:]

    def hyperparams(self) -> dict:
        return {"in_shape": "x".join(map(str, self.in_shape)), "y_size": str(self.y_size),
                "scale": str(self.scale), "n_layers": str(len(self.layers)),
                "hidden": str(self.hidden), "clamp": repr(self.clamp),
                "partitions": ",".join(l.partition.kind for l in self.layers),
                "layout_version": str(LAYOUT_VERSION)}

    def forward(self, x):
        if tuple(x.shape[1:]) != self.in_shape:
            raise ContractError(f"flow expects (B, {self.in_shape}), got {tuple(x.shape)}")
        h = squeeze(x, self.scale) if self.image else x
        logdet = torch.zeros(x.shape[0], dtype=x.dtype)
        for layer in self.layers:
            h, ld = layer(h)
            logdet = logdet + ld
        return LatentPair(h[:, :self.y_size], h[:, self.y_size:]), logdet

    def inverse(self, pair: LatentPair):
        y, z = pair
        if tuple(y.shape[1:]) != self.y_shape or tuple(z.shape[1:]) != self.z_shape:
            raise ContractError(f"latent shapes {tuple(y.shape[1:])}/{tuple(z.shape[1:])} do not match "
                                f"flow output {self.y_shape}/{self.z_shape}")
        h = torch.cat([y, z], dim=1)
        for layer in reversed(self.layers):
            h = layer.inverse(h)
        return unsqueeze(h, self.scale) if self.image else h


def flow_forward(x, flow: CouplingFlow):
    return flow(x)


def flow_inverse(pair: LatentPair, flow: CouplingFlow):
    return flow.inverse(pair)
