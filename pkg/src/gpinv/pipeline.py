"""Training and sampling loops.

``train_flow`` fits the flow so that its ``y`` output reproduces ``D(x)``
while ``z`` is pushed toward a standard normal.  ``train_ddpm`` fits a
conditional noise predictor on ``z`` given ``y`` through the frozen flow.
``sample_posterior`` draws ``z`` with the reverse chain and inverts the flow
at the measured ``y``.

Metric logs are CSV files with a header row.  Flow log columns::

    iter,loss,fit_mse,z_mean,z_var,logdet,grad_norm,lr

``fit_mse`` is the per-element mean of ``(y - D(x))**2`` over the logging
interval.  Denoiser log columns::

    iter,loss,loss_ema,lr
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import ConfigError, ExperimentConfig
from .degradations import DegradationOp, apply, dequantize
from .diffusion import (NoiseSchedule, ancestral_sample, ddpm_loss, make_denoiser,
                        make_linear_schedule, subsample_schedule)
from .flow import CouplingFlow, LatentPair
from .numerics import (STREAM_DATA, STREAM_DEQUANT, STREAM_EPS, STREAM_INIT, STREAM_T,
                       STREAM_ZT, ContractError, NumericError, ParamStore, RngStream, adam_step,
                       clip_by_global_norm, load_checkpoint, save_checkpoint)

log = logging.getLogger(__name__)

FLOW_LOG_COLUMNS = ("iter", "loss", "fit_mse", "z_mean", "z_var", "logdet", "grad_norm", "lr")
DDPM_LOG_COLUMNS = ("iter", "loss", "loss_ema", "lr")


class TrainingDiverged(NumericError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class CompatibilityError(ContractError):
    pass


def flow_loss(x, flow: CouplingFlow, degradation: DegradationOp, sigma: float, parts: bool = False):
    """Batch mean of ``||y - D(x)||^2 / (2 sigma^2) + ||z||^2 / 2 - log|det J|``."""
    pair, logdet = flow(x)
    target = apply(degradation, x)
    B = x.shape[0]
    fit = ((pair.y - target) ** 2).reshape(B, -1).sum(dim=1)
    zsq = (pair.z ** 2).reshape(B, -1).sum(dim=1)
    loss = (fit / (2 * sigma ** 2) + 0.5 * zsq - logdet).mean()
    if parts:
        return loss, {"fit": fit.detach(), "pair": pair, "logdet": logdet.detach()}
    return loss


def _lr_at(base: float, it: int, total: int, decay: str) -> float:
    if decay == "none":
        return base
    return base * 0.5 * (1 + math.cos(math.pi * it / total))


def _fmt(v) -> str:
    return str(v) if isinstance(v, (int, np.integer)) else repr(float(v))


class MetricsLog:
    """Rows of floats, rendered with ``repr`` so reruns produce identical bytes."""

    def __init__(self, columns):
        self.columns = tuple(columns)
        self.rows = []

    def append(self, **row):
        self.rows.append(tuple(row[c] for c in self.columns))

    def column(self, name) -> np.ndarray:
        i = self.columns.index(name)
        return np.array([r[i] for r in self.rows], dtype=np.float64)

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([_fmt(v) for v in r])
        return out.getvalue()

    def write(self, path):
        Path(path).write_text(self.to_csv())


# Checkpoint bundles

def _config_header(config: ExperimentConfig) -> dict:
    return {f"config.{k}": v for k, v in config.flat().items()}


def _config_from_header(header: dict) -> ExperimentConfig:
    items = [f"{k[len('config.'):]}={v}" for k, v in header.items() if k.startswith("config.")]
    return ExperimentConfig.from_text("", items)


@dataclass
class FlowModel:
    flow: CouplingFlow
    config: ExperimentConfig
    degradation: DegradationOp
    metrics: MetricsLog | None = None

    def save(self, path):
        header = {"kind": "flow", "created_by": f"gpinv {__version__}"}
        header.update(_config_header(self.config))
        header.update({f"flow.{k}": v for k, v in self.flow.hyperparams().items()})
        header.update({f"degradation.{k}": v for k, v in self.degradation.descriptor().items()})
        save_checkpoint(path, dict(self.flow.state_dict()), header)

    @classmethod
    def load(cls, path) -> "FlowModel":
        params, header = load_checkpoint(path)
        if header.get("kind") != "flow":
            raise CompatibilityError(f"{path} is not a flow checkpoint (kind={header.get('kind')})")
        if header.get("flow.layout_version") != "1":
            raise CompatibilityError(f"{path}: unsupported latent layout {header.get('flow.layout_version')}")
        config = _config_from_header(header)
        flow = build_flow(config)
        flow.load_state_dict(params)
        return cls(flow.eval(), config, config.degradation())


@dataclass
class DenoiserModel:
    denoiser: torch.nn.Module
    schedule: NoiseSchedule
    z_shape: tuple
    y_shape: tuple | None
    config: ExperimentConfig
    metrics: MetricsLog | None = None

    def save(self, path):
        header = {"kind": "denoiser", "created_by": f"gpinv {__version__}",
                  "z_shape": "x".join(map(str, self.z_shape)),
                  "y_shape": "" if self.y_shape is None else "x".join(map(str, self.y_shape))}
        header.update(_config_header(self.config))
        header.update({f"schedule.{k}": v for k, v in self.schedule.hyperparams().items()})
        save_checkpoint(path, dict(self.denoiser.state_dict()), header)

    @classmethod
    def load(cls, path) -> "DenoiserModel":
        params, header = load_checkpoint(path)
        if header.get("kind") != "denoiser":
            raise CompatibilityError(f"{path} is not a denoiser checkpoint (kind={header.get('kind')})")
        config = _config_from_header(header)
        z_shape = tuple(int(s) for s in header["z_shape"].split("x"))
        y_shape = tuple(int(s) for s in header["y_shape"].split("x")) if header["y_shape"] else None
        net = make_denoiser(z_shape, y_shape, config.diffusion.hidden)
        net.load_state_dict(params)
        return cls(net.eval(), build_schedule(config), z_shape, y_shape, config)


def build_flow(config: ExperimentConfig, rng: RngStream | None = None) -> CouplingFlow:
    shape = config.in_shape
    op = config.degradation()
    y_size = shape[0] if config.problem.kind == "image" else op.out_shape[0]
    scale = config.problem.scale if config.problem.kind == "image" else 1
    return CouplingFlow(shape, y_size, scale, config.flow.layers, config.flow.hidden,
                        config.flow.clamp, rng=rng)


def build_schedule(config: ExperimentConfig) -> NoiseSchedule:
    d = config.diffusion
    return make_linear_schedule(d.T, d.beta_1, d.beta_T, d.sigma_variant)


def _batch(dataset, idx, image: bool, deq_rng: RngStream) -> torch.Tensor:
    if image:
        return dequantize(dataset[idx], deq_rng)
    return torch.as_tensor(np.asarray(dataset[idx]), dtype=torch.float32)


def _is_image(config):
    return config.problem.kind == "image"


def train_flow(config: ExperimentConfig, dataset, checkpoint_path=None, log_path=None) -> FlowModel:
    """Fit the degradation flow on ``dataset`` for ``training.flow_iters`` steps."""
    if dataset is None or len(dataset) == 0:
        raise ContractError("dataset is empty")
    tr = config.training
    seed = tr.seed
    flow = build_flow(config, RngStream(seed, STREAM_INIT))
    op = config.degradation()
    data_rng, deq_rng = RngStream(seed, STREAM_DATA), RngStream(seed, STREAM_DEQUANT)
    image = _is_image(config)
    named = list(flow.named_parameters())
    params = ParamStore.from_module(flow).map(lambda p: p.detach().clone())
    good = params
    metrics = MetricsLog(FLOW_LOG_COLUMNS)
    acc = _Accumulator()
    for it in range(1, tr.flow_iters + 1):
        idx = data_rng.integers(0, len(dataset), size=tr.flow_batch)
        x = _batch(dataset, idx, image, deq_rng)
        flow.zero_grad(set_to_none=True)
        try:
            loss, parts = flow_loss(x, flow, op, tr.sigma, parts=True)
        except NumericError as exc:
            _abort(flow, good, config, op, checkpoint_path, f"iteration {it}: {exc}")
        if not torch.isfinite(loss):
            _abort(flow, good, config, op, checkpoint_path,
                   f"iteration {it}: non-finite loss; mean logdet {float(parts['logdet'].mean())}")
        loss.backward()
        grads = ParamStore({k: p.grad for k, p in named})
        gnorm = grads.global_norm()
        if not math.isfinite(gnorm):
            _abort(flow, good, config, op, checkpoint_path, f"iteration {it}: non-finite gradient")
        grads = clip_by_global_norm(grads, tr.clip_norm)
        lr = _lr_at(tr.flow_lr, it - 1, tr.flow_iters, tr.lr_decay)
        params = adam_step(params, grads, lr=lr)
        _copy_into(named, params)
        z = parts["pair"].z.detach()
        acc.add(loss=float(loss.detach()), fit_mse=float(parts["fit"].mean()) / parts["pair"].y[0].numel(),
                z_mean=float(z.mean()), z_var=float(z.var()), logdet=float(parts["logdet"].mean()),
                grad_norm=gnorm)
        if it % tr.log_every == 0 or it == tr.flow_iters:
            metrics.append(iter=it, lr=lr, **acc.flush())
            good = params
    model = FlowModel(flow.eval(), config, op, metrics)
    if checkpoint_path is not None:
        model.save(checkpoint_path)
    if log_path is not None:
        metrics.write(log_path)
    return model


def _copy_into(named, params: ParamStore):
    with torch.no_grad():
        torch._foreach_copy_([p for _, p in named], [params[k] for k, _ in named])


def _abort(flow, good, config, op, checkpoint_path, message):
    if checkpoint_path is not None:
        good.load_into(flow)
        FlowModel(flow, config, op).save(checkpoint_path)
    raise TrainingDiverged(f"flow training diverged at {message}", checkpoint_path)


class _Accumulator:
    def __init__(self):
        self.sums, self.n = {}, 0

    def add(self, **vals):
        for k, v in vals.items():
            self.sums[k] = self.sums.get(k, 0.0) + v
        self.n += 1

    def flush(self) -> dict:
        out = {k: v / self.n for k, v in self.sums.items()}
        self.sums, self.n = {}, 0
        return out


@torch.no_grad()
def encode_dataset(flow_model: FlowModel, dataset, rng: RngStream, batch: int = 512):
    image = _is_image(flow_model.config)
    ys, zs = [], []
    for start in range(0, len(dataset), batch):
        x = _batch(dataset, np.arange(start, min(len(dataset), start + batch)), image, rng)
        pair, _ = flow_model.flow(x)
        ys.append(pair.y)
        zs.append(pair.z)
    return torch.cat(ys), torch.cat(zs)


def check_compatible(flow: CouplingFlow, z_shape, y_shape):
    if tuple(flow.z_shape) != tuple(z_shape) or (y_shape is not None and tuple(flow.y_shape) != tuple(y_shape)):
        raise CompatibilityError(f"flow latent shapes y={flow.y_shape}, z={flow.z_shape} do not match "
                                 f"denoiser shapes y={y_shape}, z={tuple(z_shape)}")


def train_ddpm(config: ExperimentConfig, flow_model: FlowModel, dataset, checkpoint_path=None,
               log_path=None) -> DenoiserModel:
    """Fit the conditional noise predictor on latents pushed through the frozen flow."""
    if dataset is None or len(dataset) == 0:
        raise ContractError("dataset is empty")
    if tuple(config.in_shape) != tuple(flow_model.flow.in_shape):
        raise CompatibilityError(f"flow input shape {flow_model.flow.in_shape} does not match "
                                 f"config shape {config.in_shape}")
    tr = config.training
    seed = tr.seed
    flow = flow_model.flow.eval()
    for p in flow.parameters():
        p.requires_grad_(False)
    z_shape, y_shape = flow.z_shape, flow.y_shape
    net = make_denoiser(z_shape, y_shape, config.diffusion.hidden, RngStream(seed, STREAM_INIT + 100))
    schedule = build_schedule(config)
    data_rng, deq_rng = RngStream(seed, STREAM_DATA + 100), RngStream(seed, STREAM_DEQUANT + 100)
    t_rng, eps_rng = RngStream(seed, STREAM_T), RngStream(seed, STREAM_EPS)
    image = _is_image(config)
    cache = encode_dataset(flow_model, dataset, deq_rng) if tr.cache_latents else None
    named = list(net.named_parameters())
    params = ParamStore.from_module(net).map(lambda p: p.detach().clone())
    metrics = MetricsLog(DDPM_LOG_COLUMNS)
    ema, acc = None, _Accumulator()
    for it in range(1, tr.ddpm_iters + 1):
        idx = data_rng.integers(0, len(dataset), size=tr.ddpm_batch)
        if cache is not None:
            y, z0 = cache[0][idx], cache[1][idx]
        else:
            with torch.no_grad():
                pair, _ = flow(_batch(dataset, idx, image, deq_rng))
            y, z0 = pair.y, pair.z
        t = t_rng.integers(1, schedule.T + 1, size=tr.ddpm_batch)
        eps = eps_rng.normal(z0.shape)
        net.zero_grad(set_to_none=True)
        loss = ddpm_loss(z0, y, net, schedule, t=t, eps=eps)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"denoiser training diverged at iteration {it}")
        loss.backward()
        grads = ParamStore({k: p.grad for k, p in named})
        lr = _lr_at(tr.ddpm_lr, it - 1, tr.ddpm_iters, tr.lr_decay)
        params = adam_step(params, grads, lr=lr)
        _copy_into(named, params)
        lv = float(loss.detach())
        ema = lv if ema is None else 0.99 * ema + 0.01 * lv
        acc.add(loss=lv)
        if it % tr.log_every == 0 or it == tr.ddpm_iters:
            metrics.append(iter=it, loss_ema=ema, lr=lr, **acc.flush())
    model = DenoiserModel(net.eval(), schedule, z_shape, y_shape, config, metrics)
    if checkpoint_path is not None:
        model.save(checkpoint_path)
    if log_path is not None:
        metrics.write(log_path)
    return model


@dataclass
class SampleResult:
    x: torch.Tensor
    z0: torch.Tensor
    nfe: int


@torch.no_grad()
def sample_posterior(y_measured: torch.Tensor, flow_model: FlowModel, denoiser_model: DenoiserModel,
                     n_steps: int | None = None, rng=None, seed: int = 0) -> SampleResult:
    """Draw ``x ~ p(x | y)`` for each row of ``y_measured``.

    ``rng`` is a single stream or one stream per row; by default a stream keyed
    by ``seed`` is used.  The result records the number of function
    evaluations: ``n_steps`` denoiser calls plus one flow inversion.
    """
    flow = flow_model.flow
    check_compatible(flow, denoiser_model.z_shape, denoiser_model.y_shape)
    y = torch.as_tensor(y_measured, dtype=torch.float32)
    if tuple(y.shape[1:]) != tuple(flow.y_shape):
        raise ContractError(f"measurement batch {tuple(y.shape)} does not match (B, {flow.y_shape})")
    schedule = denoiser_model.schedule
    n_steps = schedule.T if n_steps is None else int(n_steps)
    if not 1 <= n_steps <= schedule.T:
        raise ContractError(f"n_steps must lie in [1, {schedule.T}], got {n_steps}")
    sched = subsample_schedule(schedule, n_steps)
    if rng is None:
        rng = RngStream(seed, STREAM_ZT)
    z0 = ancestral_sample(denoiser_model.denoiser, sched, flow.z_shape, y=y, rng=rng)
    x = flow.inverse(LatentPair(y, z0))
    return SampleResult(x, z0, n_steps + 1)
