"""Degradation operators and their linear-algebra helpers.

Spatial operators act on batches shaped ``(B, C, H, W)``; the matrix operator
acts on batches of vectors ``(B, n)``.

Bicubic downsampling uses the Catmull-Rom kernel (a = -0.5) stretched by the
scale factor (anti-aliasing), half-sample symmetric reflection at the borders,
and rows renormalized to sum to one.  Output pixel ``i`` is centred at input
coordinate ``(i + 0.5) * s - 0.5``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch

from .numerics import DTYPE, ContractError, RngStream, as_tensor

KINDS = ("linear-matrix", "average-pool", "bicubic-downsample", "nearest-subsample")
MAX_MATERIALIZE = 64 * 64
CUBIC_A = -0.5


def cubic_kernel(d, a: float = CUBIC_A):
    d = np.abs(np.asarray(d, dtype=np.float64))
    out = np.zeros_like(d)
    near = d <= 1
    far = (d > 1) & (d < 2)
    out[near] = (a + 2) * d[near] ** 3 - (a + 3) * d[near] ** 2 + 1
    out[far] = a * d[far] ** 3 - 5 * a * d[far] ** 2 + 8 * a * d[far] - 4 * a
    return out


def _reflect(k: np.ndarray, n: int) -> np.ndarray:
    period = 2 * n
    k = np.mod(k, period)
    return np.where(k >= n, period - 1 - k, k)


@lru_cache(maxsize=64)
def bicubic_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-D resampling matrix of shape ``(n_out, n_in)``.

    Downsampling stretches the kernel by ``n_in / n_out``; upsampling uses
    the plain interpolating kernel.
    """
    scale = n_in / n_out
    stretch = max(scale, 1.0)
    W = np.zeros((n_out, n_in))
    for i in range(n_out):
        centre = (i + 0.5) * scale - 0.5
        lo = int(np.floor(centre - 2 * stretch)) - 1
        taps = np.arange(lo, int(np.ceil(centre + 2 * stretch)) + 2)
        w = cubic_kernel((taps - centre) / stretch)
        np.add.at(W[i], _reflect(taps, n_in), w)
    W /= W.sum(axis=1, keepdims=True)
    return W


@dataclass(frozen=True)
class DegradationOp:
    """A forward operator ``D: X -> Y``.

    ``in_shape``/``out_shape`` exclude the batch dimension.
    """

    kind: str
    in_shape: tuple
    scale: int = 1
    matrix: torch.Tensor | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown degradation kind {self.kind!r}")
        object.__setattr__(self, "in_shape", tuple(int(s) for s in self.in_shape))
        if self.kind == "linear-matrix":
            if self.matrix is None:
                raise ContractError("linear-matrix degradation needs a matrix")
            A = as_tensor(self.matrix, name="degradation matrix")
            if A.dim() != 2 or A.shape[1] != self.in_shape[-1] or len(self.in_shape) != 1:
                raise ContractError(f"matrix shape {tuple(A.shape)} incompatible with input {self.in_shape}")
            rank = np.linalg.matrix_rank(A.double().numpy())
            if rank < A.shape[0]:
                raise ContractError(f"degradation matrix {tuple(A.shape)} is rank deficient (rank {rank})")
            object.__setattr__(self, "matrix", A)
        else:
            if len(self.in_shape) != 3:
                raise ContractError("spatial degradations take (C, H, W) inputs")
            if self.scale < 1:
                raise ContractError("scale must be a positive integer")
            _, H, W = self.in_shape
            if H % self.scale or W % self.scale:
                raise ContractError(f"input {self.in_shape} not divisible by scale {self.scale}")

    @property
    def out_shape(self) -> tuple:
        if self.kind == "linear-matrix":
            return (self.matrix.shape[0],)
        C, H, W = self.in_shape
        return (C, H // self.scale, W // self.scale)

    @property
    def is_linear(self) -> bool:
        return True

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return apply(self, x)

    def descriptor(self) -> dict:
        d = {"kind": self.kind, "scale": str(self.scale),
             "in_shape": "x".join(map(str, self.in_shape)),
             "out_shape": "x".join(map(str, self.out_shape))}
        if self.kind == "linear-matrix":
            d["matrix"] = ";".join(",".join(repr(float(v)) for v in row) for row in self.matrix.tolist())
        return d

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.descriptor().items())

    @classmethod
    def from_descriptor(cls, d: dict) -> "DegradationOp":
        kind = d["kind"].strip()
        in_shape = tuple(int(s) for s in d["in_shape"].split("x"))
        if kind == "linear-matrix":
            rows = [[float(v) for v in row.split(",")] for row in d["matrix"].split(";")]
            return cls(kind, in_shape, matrix=torch.tensor(rows, dtype=DTYPE))
        return cls(kind, in_shape, scale=int(d.get("scale", 1)))

    def __eq__(self, other):
        return isinstance(other, DegradationOp) and self.descriptor() == other.descriptor()

    def __hash__(self):
        return hash(tuple(sorted(self.descriptor().items())))

    def as_matrix(self) -> torch.Tensor:
        """Dense ``(|Y|, |X|)`` matrix of the operator (small shapes only)."""
        if self.kind == "linear-matrix":
            return self.matrix.clone()
        n = int(np.prod(self.in_shape))
        if n > MAX_MATERIALIZE:
            raise ContractError(f"refusing to materialize an operator with {n} inputs")
        eye = torch.eye(n, dtype=torch.float64).reshape((n,) + self.in_shape)
        return apply(self, eye).reshape(n, -1).T.contiguous().to(DTYPE)


def _check_input(op: DegradationOp, x: torch.Tensor):
    if tuple(x.shape[1:]) != op.in_shape:
        raise ContractError(f"expected batch of shape (B, {op.in_shape}), got {tuple(x.shape)}")


def apply(op: DegradationOp, x: torch.Tensor) -> torch.Tensor:
    """``y = D(x)`` for a batch ``x``."""
    _check_input(op, x)
    if op.kind == "linear-matrix":
        return x @ op.matrix.to(x.dtype).T
    s = op.scale
    if op.kind == "average-pool":
        B, C, H, W = x.shape
        return x.reshape(B, C, H // s, s, W // s, s).mean(dim=(3, 5))
    if op.kind == "nearest-subsample":
        return nearest_subsample(x, s)
    _, H, W = op.in_shape
    Wh = torch.from_numpy(bicubic_matrix(H, H // s)).to(x.dtype)
    Ww = torch.from_numpy(bicubic_matrix(W, W // s)).to(x.dtype)
    return Wh @ x @ Ww.T


def bicubic_resize(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Separable bicubic resampling of ``(B, C, H, W)`` to ``size``."""
    Wh = torch.from_numpy(bicubic_matrix(x.shape[-2], size[0])).to(x.dtype)
    Ww = torch.from_numpy(bicubic_matrix(x.shape[-1], size[1])).to(x.dtype)
    return Wh @ x @ Ww.T


def bicubic_upsample(y: torch.Tensor, s: int) -> torch.Tensor:
    return bicubic_resize(y, (y.shape[-2] * s, y.shape[-1] * s))


def moore_penrose(op: DegradationOp) -> torch.Tensor:
    """Explicit ``A^T (A A^T)^{-1}`` for a full-row-rank linear operator."""
    if op.kind not in ("linear-matrix", "average-pool"):
        raise ContractError(f"no materialized pseudoinverse for kind {op.kind!r}")
    A = op.as_matrix().double()
    gram = A @ A.T
    if torch.linalg.matrix_rank(gram) < gram.shape[0]:
        raise ContractError("operator is rank deficient")
    return (A.T @ torch.linalg.inv(gram)).to(DTYPE)


def apply_pinv(op: DegradationOp, pinv: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Apply a materialized pseudoinverse to a batch of measurements."""
    flat = y.reshape(y.shape[0], -1) @ pinv.to(y.dtype).T
    return flat.reshape((y.shape[0],) + op.in_shape)


def nearest_upsample(y: torch.Tensor, s: int) -> torch.Tensor:
    """Replicate every pixel of ``(..., H, W)`` into an ``s x s`` block."""
    if s < 1:
        raise ContractError("scale must be >= 1")
    return y.repeat_interleave(s, dim=-2).repeat_interleave(s, dim=-1)


def nearest_subsample(x: torch.Tensor, s: int) -> torch.Tensor:
    """Keep the top-left pixel of each ``s x s`` block."""
    return x[..., ::s, ::s]


def dequantize(img8, rng: RngStream) -> torch.Tensor:
    """Map 8-bit values ``k`` to ``(k + u) / 256`` with ``u ~ U[0, 1)``."""
    k = torch.as_tensor(np.asarray(img8), dtype=torch.float64)
    if k.numel() and (k.min() < 0 or k.max() > 255):
        raise ContractError("8-bit image values must lie in [0, 255]")
    u = rng.uniform(tuple(k.shape), dtype=torch.float64)
    # float32 rounding can push 255 + u to 256; keep the half-open range
    out = ((k + u) / 256.0).to(DTYPE)
    return torch.clamp(out, max=np.nextafter(np.float32(1.0), np.float32(0.0)).item())


def to_unit(img8) -> torch.Tensor:
    """Deterministic dequantization to the bin centre ``(k + 0.5) / 256``."""
    return ((torch.from_numpy(np.array(img8, dtype=np.float64)) + 0.5) / 256.0).to(DTYPE)


def quantize(x: torch.Tensor) -> np.ndarray:
    """Clamp to [0, 1) and round to the nearest bin centre; returns uint8."""
    k = torch.round(x.double() * 256.0 - 0.5)
    return torch.clamp(k, 0, 255).to(torch.uint8).numpy()
