"""PSNR, SSIM and measurement consistency."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch.nn import functional as F

from .degradations import DegradationOp, apply
from .numerics import ContractError

PSNR_CAP = 99.0
CONSISTENCY_UNIT = 1e5
SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_RANGE = 1.0


def _same_shape(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ContractError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def psnr(a, b, peak: float = 1.0) -> float:
    """PSNR in dB; identical inputs give ``inf``."""
    a, b = torch.as_tensor(a, dtype=torch.float64), torch.as_tensor(b, dtype=torch.float64)
    _same_shape(a, b)
    if peak <= 0:
        raise ContractError("peak must be positive")
    mse = float(torch.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak ** 2 / mse)


def ssim(a, b, window: int = SSIM_WINDOW, k1: float = SSIM_K1, k2: float = SSIM_K2,
         data_range: float = SSIM_RANGE) -> float:
    """Mean SSIM of ``(C, H, W)`` or ``(H, W)`` images over valid uniform windows.

    Channels are scored separately and averaged.
    """
    a, b = torch.as_tensor(a, dtype=torch.float64), torch.as_tensor(b, dtype=torch.float64)
    _same_shape(a, b)
    if a.dim() == 2:
        a, b = a[None], b[None]
    if a.shape[-1] < window or a.shape[-2] < window:
        raise ContractError(f"image {tuple(a.shape[-2:])} smaller than the {window}x{window} window")
    a, b = a[:, None], b[:, None]
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2

    def mean(t):
        return F.avg_pool2d(t, window, stride=1)

    mu_a, mu_b = mean(a), mean(b)
    var_a = mean(a * a) - mu_a ** 2
    var_b = mean(b * b) - mu_b ** 2
    cov = mean(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    per_channel = (num / den).mean(dim=(1, 2, 3))
    return float(per_channel.mean())


def consistency(y_measured, x_sr, degradation: DegradationOp) -> float:
    """``1e5 * MSE(y, D(x_sr))`` over a batch."""
    y = torch.as_tensor(y_measured, dtype=torch.float64)
    x = torch.as_tensor(x_sr, dtype=torch.float64)
    redeg = apply(degradation, x)
    _same_shape(redeg, y)
    return float(torch.mean((redeg - y) ** 2)) * CONSISTENCY_UNIT


@dataclass
class EvalReport:
    names: list = field(default_factory=list)
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    consistency: list = field(default_factory=list)
    degradation: dict = field(default_factory=dict)

    def add(self, name, x_sr, y_measured, degradation: DegradationOp, original=None):
        """Score one ``(C, H, W)`` output; PSNR/SSIM need the original."""
        self.degradation = degradation.descriptor()
        self.names.append(name)
        self.consistency.append(consistency(y_measured[None], x_sr[None], degradation))
        if original is not None:
            self.psnr.append(psnr(x_sr, original))
            self.ssim.append(ssim(x_sr, original))
        else:
            self.psnr.append(math.nan)
            self.ssim.append(math.nan)

    @property
    def count(self) -> int:
        return len(self.names)

    def aggregate(self) -> dict:
        def avg(vals):
            vals = [v for v in vals if not math.isnan(v)]
            return float(np.mean(vals)) if vals else math.nan
        return {"psnr": avg([min(v, PSNR_CAP) for v in self.psnr]),
                "ssim": avg(self.ssim),
                "consistency": avg(self.consistency),
                "count": self.count}

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["name", "psnr_db", "ssim", "consistency_1e-5"])
        for row in zip(self.names, self.psnr, self.ssim, self.consistency):
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
        agg = self.aggregate()
        w.writerow(["MEAN", repr(agg["psnr"]), repr(agg["ssim"]), repr(agg["consistency"])])
        return out.getvalue()

    def summary(self) -> str:
        agg = self.aggregate()
        desc = ", ".join(f"{k}={v}" for k, v in self.degradation.items() if k != "matrix")
        return (f"images       : {agg['count']}\n"
                f"degradation  : {desc}\n"
                f"PSNR (dB)    : {agg['psnr']:.3f}  (cap {PSNR_CAP})\n"
                f"SSIM         : {agg['ssim']:.4f}  (window {SSIM_WINDOW}, K1 {SSIM_K1}, K2 {SSIM_K2})\n"
                f"consistency  : {agg['consistency']:.5g}  (MSE x 1e-5)\n")
