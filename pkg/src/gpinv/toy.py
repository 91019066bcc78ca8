"""The two-dimensional linear toy: ``x ~ N(0, I)``, ``y = D x`` with ``D`` a 1x2 row.

``run_toy2d`` trains the flow and the denoiser, samples the posterior at one
measurement and compares against the closed form from ``oracle2d``.
``sigma_scaling`` retrains the flow at several ``sigma`` and regresses the
measurement residual on ``sigma`` in log-log space.

Data file columns (``toy2d.csv``)::

    kind,x1,x2

``kind`` is one of ``feasibility`` (points on ``D x = y``), ``flow`` (flow
inverse at the measured ``y`` with ``z ~ N(0, I)``), ``posterior`` (flow
inverse of denoiser samples), ``oracle`` (closed-form posterior draws) and
``moore_penrose``.  The scaling table (``sigma_scaling.csv``) has columns
``sigma,fit_mse,sample_residual`` followed by a ``slope`` row.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig
from .data import gaussian_dataset
from .degradations import apply, apply_pinv, moore_penrose
from .flow import LatentPair
from .numerics import STREAM_EVAL, RngStream
from .oracle2d import LinearGaussianProblem, moore_penrose_point, posterior, posterior_sampler
from .pipeline import FlowModel, sample_posterior, train_ddpm, train_flow

TOY_DEFAULTS = ("problem.kind=vector", "problem.degradation=linear-matrix", "problem.in_shape=2",
                "flow.layers=4", "flow.hidden=32")
SCALING_SIGMAS = (0.1, 0.05, 0.025)


def toy_config(matrix: str = "1,0", sigma: float = 0.05, overrides=()) -> ExperimentConfig:
    return ExperimentConfig.from_text("", list(TOY_DEFAULTS) + [f"problem.matrix={matrix}",
                                                                f"training.sigma={sigma}"] + list(overrides))


def _fmt(v) -> str:
    return repr(float(v))


@dataclass
class ToyResult:
    matrix: np.ndarray
    y: float
    oracle_mean: np.ndarray
    oracle_cov: np.ndarray
    sample_mean: np.ndarray
    sample_var: np.ndarray
    sample_residual: float
    mp_oracle: np.ndarray
    mp_analytic: np.ndarray
    fit_mse: float
    z_mean: float
    z_var: float
    yz_corr: float
    rows: list = field(default_factory=list, repr=False)
    flow_model: FlowModel | None = field(default=None, repr=False)
    denoiser_model: object = field(default=None, repr=False)

    def summary(self) -> str:
        return "\n".join([
            f"D                : {self.matrix.tolist()}   y = {self.y}",
            f"oracle mean      : {np.round(self.oracle_mean, 4).tolist()}",
            f"sample mean      : {np.round(self.sample_mean, 4).tolist()}",
            f"oracle variance  : {np.round(np.diag(self.oracle_cov), 4).tolist()}",
            f"sample variance  : {np.round(self.sample_var, 4).tolist()}",
            f"Moore-Penrose    : {self.mp_analytic.tolist()}",
            f"fit MSE          : {self.fit_mse:.4g}",
            f"sample residual  : {self.sample_residual:.4g}",
            f"z mean / var     : {self.z_mean:.4f} / {self.z_var:.4f}   corr(y, z) = {self.yz_corr:.4f}",
        ]) + "\n"

    def write(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["kind", "x1", "x2"])
            for kind, pts in self.rows:
                for p in np.atleast_2d(pts):
                    w.writerow([kind, _fmt(p[0]), _fmt(p[1])])


@torch.no_grad()
def flow_diagnostics(flow_model: FlowModel, n: int = 10000, seed: int = 0) -> dict:
    """Measurement fit and pushforward moments on fresh prior draws."""
    x = torch.as_tensor(gaussian_dataset(n, 2, seed + 1))
    pair, _ = flow_model.flow(x)
    target = apply(flow_model.degradation, x)
    y, z = pair.y.double(), pair.z.double()
    zflat = z.reshape(n, -1)
    corr = float(torch.corrcoef(torch.stack([y[:, 0], zflat[:, 0]]))[0, 1])
    # residual of generated points: inverse at data y with fresh z, then re-degrade
    zs = RngStream(seed, STREAM_EVAL).normal(tuple(pair.z.shape))
    xs = flow_model.flow.inverse(LatentPair(target, zs))
    resid = ((apply(flow_model.degradation, xs) - target).double() ** 2).sum(dim=1).mean()
    return {"fit_mse": float(((y - target.double()) ** 2).sum(dim=1).mean()),
            "sample_residual": float(resid), "z_mean": float(z.mean()), "z_var": float(z.var()),
            "yz_corr": corr}


def run_toy2d(matrix: str = "1,0", y: float = 2.0, sigma: float = 0.05, iters: int | None = None,
              ddpm_iters: int | None = None, n_samples: int = 10000, seed: int = 0, n_steps=None,
              n_data: int = 200000, overrides=(), out_dir=None) -> ToyResult:
    extra = [f"training.seed={seed}"]
    if iters is not None:
        extra.append(f"training.flow_iters={iters}")
    if ddpm_iters is not None:
        extra.append(f"training.ddpm_iters={ddpm_iters}")
    config = toy_config(matrix, sigma, extra + list(overrides))
    data = gaussian_dataset(n_data, 2, seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    fm = train_flow(config, data, out / "flow.ckpt" if out else None, out / "flow_metrics.csv" if out else None)
    dm = train_ddpm(config, fm, data, out / "ddpm.ckpt" if out else None, out / "ddpm_metrics.csv" if out else None)

    op = fm.degradation
    D = op.matrix.double().numpy()
    problem = LinearGaussianProblem(D, [y])
    mean, cov = posterior(problem)
    y_batch = torch.full((n_samples, 1), float(y))
    xs = sample_posterior(y_batch, fm, dm, n_steps=n_steps, seed=seed).x.double()
    with torch.no_grad():
        z_flow = RngStream(seed, STREAM_EVAL + 1).normal((n_samples,) + tuple(fm.flow.z_shape))
        x_flow = fm.flow.inverse(LatentPair(y_batch, z_flow)).double()
    resid = float(((xs @ torch.as_tensor(D).T - y) ** 2).sum(dim=1).mean())
    mp_analytic = apply_pinv(op, moore_penrose(op), torch.tensor([[float(y)]])).double().numpy()[0]
    kernel = np.array([-D[0, 1], D[0, 0]]) / np.linalg.norm(D)
    line = mean + np.linspace(-4, 4, 81)[:, None] * kernel
    oracle = posterior_sampler(problem, RngStream(seed, STREAM_EVAL + 2), min(n_samples, 2000))
    diag = flow_diagnostics(fm, seed=seed)
    keep = min(n_samples, 2000)
    result = ToyResult(
        matrix=D, y=float(y), oracle_mean=mean, oracle_cov=cov,
        sample_mean=xs.mean(dim=0).numpy(), sample_var=xs.var(dim=0).numpy(), sample_residual=resid,
        mp_oracle=moore_penrose_point(problem), mp_analytic=mp_analytic, fit_mse=diag["fit_mse"],
        z_mean=diag["z_mean"], z_var=diag["z_var"], yz_corr=diag["yz_corr"],
        rows=[("feasibility", line), ("flow", x_flow[:keep].numpy()), ("posterior", xs[:keep].numpy()),
              ("oracle", oracle), ("moore_penrose", mp_analytic)],
        flow_model=fm, denoiser_model=dm)
    if out is not None:
        result.write(out / "toy2d.csv")
    return result


@dataclass
class ScalingResult:
    sigmas: list
    fit_mse: list
    sample_residual: list
    slope: float

    def to_csv(self) -> str:
        lines = ["sigma,fit_mse,sample_residual"]
        lines += [",".join(_fmt(v) for v in row) for row in zip(self.sigmas, self.fit_mse, self.sample_residual)]
        lines.append(f"slope,{_fmt(self.slope)},")
        return "\n".join(lines) + "\n"


def loglog_slope(sigmas, values) -> float:
    return float(np.polyfit(np.log(sigmas), np.log(values), 1)[0])


def sigma_scaling(matrix: str = "0.5,0.5", sigmas=SCALING_SIGMAS, iters: int | None = None, seed: int = 0,
                  n_data: int = 200000, overrides=()) -> ScalingResult:
    """Retrain the flow at each ``sigma`` with the same budget; slope of residual vs ``sigma``."""
    data = gaussian_dataset(n_data, 2, seed)
    fits, resids = [], []
    for s in sigmas:
        extra = [f"training.seed={seed}"] + ([f"training.flow_iters={iters}"] if iters is not None else [])
        fm = train_flow(toy_config(matrix, s, extra + list(overrides)), data)
        d = flow_diagnostics(fm, seed=seed)
        fits.append(d["fit_mse"])
        resids.append(d["sample_residual"])
    return ScalingResult(list(sigmas), fits, resids, loglog_slope(sigmas, resids))
