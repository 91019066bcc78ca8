"""Array core: parameter storage, reverse-mode gradients, finite-difference
checks, optimizer steps, seeded random streams and the checkpoint container.

Tensors are ``torch.Tensor`` objects in float32; autograd provides the
reverse-mode pass.  ``gradcheck`` is an independent central-difference
oracle and never touches autograd on its numerical side.
"""

from __future__ import annotations

import io
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np
import torch

DTYPE = torch.float32

ADAM_PREFIX = "__adam__"


class ContractError(ValueError):
    """Raised when a caller violates an operation's preconditions."""


class NumericError(ArithmeticError):
    """Raised when a computation produces NaN or Inf."""


def as_tensor(x, dtype=DTYPE, name: str = "input") -> torch.Tensor:
    """Convert ``x`` to a finite tensor of ``dtype``."""
    t = torch.as_tensor(np.asarray(x) if not torch.is_tensor(x) else x, dtype=dtype)
    check_finite(t, name)
    return t


def check_finite(t: torch.Tensor, name: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite values in {name}")
    return t


class ParamStore(Mapping):
    """Named tensors, iterated in sorted path order.

    Paths under ``__adam__/`` hold optimizer state and are skipped by
    :meth:`trainable`.
    """

    def __init__(self, tensors: Mapping[str, torch.Tensor] | None = None, version: int = 0):
        tensors = dict(tensors or {})
        self._data = OrderedDict((k, tensors[k]) for k in sorted(tensors))
        self.version = version

    @classmethod
    def from_module(cls, module: torch.nn.Module) -> "ParamStore":
        return cls(dict(module.named_parameters()))

    def __getitem__(self, key):
        return self._data[key]

    def __iter__(self):
        return iter(self._data)

    def __len__(self):
        return len(self._data)

    def __repr__(self):
        shapes = ", ".join(f"{k}: {tuple(v.shape)}" for k, v in self._data.items())
        return f"ParamStore(v{self.version}; {shapes})"

    def trainable(self) -> "ParamStore":
        return ParamStore({k: v for k, v in self._data.items() if not k.startswith(ADAM_PREFIX)},
                          self.version)

    def replace(self, updates: Mapping[str, torch.Tensor], bump: bool = True) -> "ParamStore":
        merged = dict(self._data)
        merged.update(updates)
        return ParamStore(merged, self.version + int(bump))

    def map(self, fn: Callable[[torch.Tensor], torch.Tensor]) -> "ParamStore":
        return ParamStore({k: fn(v) for k, v in self._data.items()}, self.version)

    def load_into(self, module: torch.nn.Module) -> None:
        """Copy trainable entries into ``module``'s parameters in place."""
        named = dict(module.named_parameters())
        keys = [k for k in self._data if not k.startswith(ADAM_PREFIX)]
        with torch.no_grad():
            torch._foreach_copy_([named[k] for k in keys], [self._data[k] for k in keys])

    def global_norm(self) -> float:
        tensors = [v.double() for k, v in self._data.items() if not k.startswith(ADAM_PREFIX)]
        if not tensors:
            return 0.0
        return float(torch.linalg.vector_norm(torch.stack(torch._foreach_norm(tensors))))


def grad(loss_fn: Callable[[ParamStore], torch.Tensor], params: ParamStore) -> ParamStore:
    """Reverse-mode gradient of a scalar ``loss_fn`` with respect to ``params``."""
    leaves = ParamStore({k: v.detach().clone().requires_grad_(True)
                         for k, v in params.trainable().items()}, params.version)
    loss = loss_fn(leaves)
    if not torch.is_tensor(loss) or loss.numel() != 1:
        raise ContractError("loss_fn must return a scalar tensor")
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {float(loss)} over parameters {list(leaves)}")
    keys = list(leaves)
    if not loss.requires_grad:
        return ParamStore({k: torch.zeros_like(leaves[k]) for k in keys}, params.version)
    gs = torch.autograd.grad(loss.reshape(()), [leaves[k] for k in keys], allow_unused=True)
    out = {}
    for k, g in zip(keys, gs):
        g = torch.zeros_like(leaves[k]) if g is None else g
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient at parameter {k!r}")
        out[k] = g.detach()
    return ParamStore(out, params.version)


@dataclass
class GradcheckReport:
    passed: bool
    worst_path: str | None = None
    worst_index: tuple | None = None
    worst_error: float = 0.0
    failures: list = field(default_factory=list)

    def __bool__(self):
        return self.passed


def gradcheck(loss_fn, params: ParamStore, eps: float = 1e-4, tol: float = 1e-3,
              grad_fn=None, atol: float = 1e-6, dtype=torch.float64) -> GradcheckReport:
    """Compare reverse-mode gradients with central differences.

    Both sides are evaluated in ``dtype`` (float64 by default) so the finite
    difference truncation error, not float32 rounding, sets the noise floor.
    A coordinate fails when ``|analytic - numeric| > tol * max(|numeric|, |analytic|) + atol``.
    ``grad_fn`` substitutes the analytic side (used for negative controls).
    """
    if not 0 < eps <= 1e-2:
        raise ContractError("eps must lie in (0, 1e-2]")
    base = params.trainable().map(lambda v: v.detach().to(dtype))
    analytic = (grad_fn or grad)(loss_fn, base)
    report = GradcheckReport(passed=True)
    with torch.no_grad():
        for path, value in base.items():
            flat = value.reshape(-1)
            for i in range(flat.numel()):
                plus = flat.clone()
                plus[i] += eps
                minus = flat.clone()
                minus[i] -= eps
                f_plus = float(loss_fn(base.replace({path: plus.view_as(value)}, bump=False)))
                f_minus = float(loss_fn(base.replace({path: minus.view_as(value)}, bump=False)))
                numeric = (f_plus - f_minus) / (2 * eps)
                a = float(analytic[path].reshape(-1)[i])
                err = abs(a - numeric)
                scale = max(abs(a), abs(numeric))
                rel = err / scale if scale > 0 else 0.0
                if rel > report.worst_error:
                    report.worst_error = rel
                    report.worst_path = path
                    report.worst_index = tuple(np.unravel_index(i, tuple(value.shape)))
                if err > tol * scale + atol:
                    report.passed = False
                    report.failures.append((path, i, a, numeric))
    return report


def clip_by_global_norm(grads: ParamStore, max_norm: float) -> ParamStore:
    norm = grads.global_norm()
    if norm <= max_norm or norm == 0:
        return grads
    factor = max_norm / norm
    keys = list(grads)
    return ParamStore(dict(zip(keys, torch._foreach_mul([grads[k] for k in keys], factor))), grads.version)


def _check_shapes(params: ParamStore, grads: ParamStore):
    for k, g in grads.items():
        if k not in params or tuple(params[k].shape) != tuple(g.shape):
            have = tuple(params[k].shape) if k in params else None
            raise ContractError(f"gradient {k!r} has shape {tuple(g.shape)}, parameter has {have}")


def sgd_step(params: ParamStore, grads: ParamStore, lr: float = 1e-2) -> ParamStore:
    _check_shapes(params, grads)
    return params.replace({k: (params[k] - lr * g).detach() for k, g in grads.items()})


def adam_step(params: ParamStore, grads: ParamStore, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> ParamStore:
    """One bias-corrected Adam update; moments live under ``__adam__/`` paths."""
    _check_shapes(params, grads)
    step_key = f"{ADAM_PREFIX}/step"
    step = int(params[step_key].item()) + 1 if step_key in params else 1
    keys = list(grads)
    g = [grads[k] for k in keys]
    m = [params.get(f"{ADAM_PREFIX}/m/{k}", None) for k in keys]
    v = [params.get(f"{ADAM_PREFIX}/v/{k}", None) for k in keys]
    m = [torch.zeros_like(gi) if mi is None else mi for mi, gi in zip(m, g)]
    v = [torch.zeros_like(gi) if vi is None else vi for vi, gi in zip(v, g)]
    m = torch._foreach_add(torch._foreach_mul(m, beta1), g, alpha=1 - beta1)
    v = torch._foreach_add(torch._foreach_mul(v, beta2), torch._foreach_mul(g, g), alpha=1 - beta2)
    c1 = 1 - beta1 ** step
    c2 = 1 - beta2 ** step
    denom = torch._foreach_add(torch._foreach_sqrt(torch._foreach_div(v, c2)), eps)
    steps = torch._foreach_div(torch._foreach_mul(m, -lr / c1), denom)
    new = torch._foreach_add([params[k].detach() for k in keys], steps)
    updates = {step_key: torch.tensor(step, dtype=torch.int64)}
    for k, mi, vi, ni in zip(keys, m, v, new):
        updates[f"{ADAM_PREFIX}/m/{k}"] = mi
        updates[f"{ADAM_PREFIX}/v/{k}"] = vi
        updates[k] = ni
    return params.replace(updates)


class RngStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Backed by numpy's Philox generator, so a given key reproduces the same
    draws regardless of process, thread count or draw interleaving with other
    streams.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & (2**64 - 1)
        self.stream_id = int(stream_id) & (2**64 - 1)
        self._bitgen = np.random.Philox(key=np.array([self.seed, self.stream_id], dtype=np.uint64))
        self._gen = np.random.Generator(self._bitgen)

    @property
    def counter(self) -> int:
        c = self._bitgen.state["state"]["counter"]
        return int(sum(int(w) << (64 * i) for i, w in enumerate(c)))

    def spawn(self, sub_id: int) -> "RngStream":
        """Derived stream; distinct ``sub_id`` values give independent streams."""
        mixed = (self.stream_id * 0x9E3779B97F4A7C15 + int(sub_id) + 1) & (2**64 - 1)
        return RngStream(self.seed ^ 0xD1B54A32D192ED03, mixed)

    def normal(self, shape, dtype=DTYPE) -> torch.Tensor:
        return torch.from_numpy(self._gen.standard_normal(tuple(shape), dtype=np.float64)).to(dtype)

    def uniform(self, shape, dtype=DTYPE) -> torch.Tensor:
        return torch.from_numpy(self._gen.random(tuple(shape), dtype=np.float64)).to(dtype)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def numpy(self) -> np.random.Generator:
        return self._gen


# Stream ids, one per purpose.
STREAM_INIT = 1
STREAM_DATA = 2
STREAM_EPS = 3
STREAM_T = 4
STREAM_ZT = 5
STREAM_DEQUANT = 6
STREAM_EVAL = 7


# Checkpoint container
#
#   magic      8 bytes   b"GPINVCK\0"
#   version    u32       FORMAT_VERSION
#   header_len u32       length of the UTF-8 header
#   header     bytes     "key=value\n" lines, keys sorted
#   n_arrays   u32
#   per array (sorted by path):
#     path_len u16, path bytes (UTF-8)
#     dtype    4 bytes   b"f4\0\0" | b"f8\0\0" | b"i8\0\0"
#     ndim     u8, then ndim x u64 extents
#     payload  little-endian, row-major
#
# All integers little-endian.

MAGIC = b"GPINVCK\0"
FORMAT_VERSION = 1
_DTYPE_TAGS = {torch.float32: b"f4\0\0", torch.float64: b"f8\0\0", torch.int64: b"i8\0\0"}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}
_NP_DTYPES = {b"f4\0\0": "<f4", b"f8\0\0": "<f8", b"i8\0\0": "<i8"}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: Mapping[str, torch.Tensor], header: Mapping[str, str]) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    lines = []
    for k in sorted(header):
        v = str(header[k])
        if "\n" in k or "=" in k or "\n" in v:
            raise CheckpointError(f"header entry {k!r} cannot be encoded")
        lines.append(f"{k}={v}\n")
    text = "".join(lines).encode("utf-8")
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    buf.write(struct.pack("<I", len(params)))
    for name in sorted(params):
        t = params[name].detach().cpu().contiguous()
        if t.dtype not in _DTYPE_TAGS:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name!r}")
        tag = _DTYPE_TAGS[t.dtype]
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(tag)
        buf.write(struct.pack("<B", t.dim()))
        for extent in t.shape:
            buf.write(struct.pack("<Q", extent))
        buf.write(t.numpy().astype(_NP_DTYPES[tag], copy=False).tobytes(order="C"))
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict[str, str]]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<I", data, 12)
    pos = 16
    header = {}
    for line in data[pos:pos + hlen].decode("utf-8").splitlines():
        k, _, v = line.partition("=")
        header[k] = v
    pos += hlen
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    params = {}
    for _ in range(n):
        (plen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + plen].decode("utf-8")
        pos += plen
        tag = data[pos:pos + 4]
        pos += 4
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"{path}: unknown dtype tag {tag!r}")
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype=_NP_DTYPES[tag], count=count, offset=pos).reshape(shape)
        pos += arr.nbytes
        params[name] = torch.from_numpy(arr.copy())
    return params, header


def batched(n: int, batch_size: int) -> Iterable[slice]:
    for start in range(0, n, batch_size):
        yield slice(start, min(n, start + batch_size))
