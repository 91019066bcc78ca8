"""``gpinv`` command line.

Commands: ``train-flow``, ``train-ddpm``, ``sample``, ``eval``, ``toy2d``,
``gen-data``.  Exit status is 0 on success, 1 for user or configuration
errors and 2 for numeric failures (divergence, non-finite values).

Environment: ``GPINV_OUT_DIR`` replaces the default output directory and
``GPINV_NUM_THREADS`` caps the torch thread pool.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, ExperimentConfig
from .data import DatasetError, load_dataset, read_png, read_vector, synthetic_image, write_png, write_vector
from .degradations import DegradationOp, apply, quantize, to_unit
from .metrics import EvalReport, consistency
from .numerics import STREAM_ZT, CheckpointError, ContractError, NumericError, RngStream, load_checkpoint
from .pipeline import (CompatibilityError, DenoiserModel, FlowModel, sample_posterior, train_ddpm,
                       train_flow)

log = logging.getLogger("gpinv")

EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 1, 2
MANIFEST_COLUMNS = ("input", "output", "seed", "stream", "nfe", "consistency", "quantization_mse")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _out_dir(args, config: ExperimentConfig | None = None) -> Path:
    if args.out:
        out = Path(args.out)
    elif os.environ.get("GPINV_OUT_DIR"):
        out = Path(os.environ["GPINV_OUT_DIR"])
    elif config is not None:
        out = Path(config.io.out_dir)
    else:
        out = Path("runs/default")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args, base: ExperimentConfig | None = None) -> ExperimentConfig:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"training.seed={args.seed}")
    if args.config:
        return ExperimentConfig.from_file(args.config, overrides)
    text = base.to_text() if base is not None else ""
    return ExperimentConfig.from_text(text, overrides)


def _dataset(config: ExperimentConfig):
    return load_dataset(config.io.dataset, config.in_shape, config.training.seed)


def cmd_train_flow(args) -> int:
    config = _config(args)
    out = _out_dir(args, config)
    data = _dataset(config)
    try:
        train_flow(config, data, out / config.io.flow_checkpoint, out / config.io.flow_log)
    except NumericError as exc:
        ck = getattr(exc, "checkpoint", None)
        raise NumericError(f"{exc}" + (f" (last good parameters saved to {ck})" if ck else "")) from None
    print(f"flow checkpoint : {out / config.io.flow_checkpoint}")
    print(f"metrics log     : {out / config.io.flow_log}")
    return EXIT_OK


def cmd_train_ddpm(args) -> int:
    flow_model = FlowModel.load(args.flow)
    config = _config(args, base=flow_model.config)
    out = _out_dir(args, config)
    data = _dataset(config)
    train_ddpm(config, flow_model, data, out / config.io.ddpm_checkpoint, out / config.io.ddpm_log)
    print(f"denoiser checkpoint : {out / config.io.ddpm_checkpoint}")
    print(f"metrics log         : {out / config.io.ddpm_log}")
    return EXIT_OK


def _list_inputs(path: Path, image: bool):
    """``(name, array)`` pairs; image inputs are PNG files, vector inputs CSV rows."""
    if not path.exists():
        raise DatasetError(f"input not found: {path}")
    if image:
        files = sorted(path.glob("*.png")) if path.is_dir() else [path]
        if not files:
            raise DatasetError(f"no .png files in {path}")
        return [(f.name, read_png(f)) for f in files]
    files = sorted(path.glob("*.csv")) if path.is_dir() else [path]
    items = []
    for f in files:
        rows = np.loadtxt(f, delimiter=",", dtype=np.float32, ndmin=2)
        items += [(f"{f.name}:{i}", r) for i, r in enumerate(rows)]
    if not items:
        raise DatasetError(f"no measurements in {path}")
    return items


def cmd_sample(args) -> int:
    flow_model = FlowModel.load(args.flow)
    den = DenoiserModel.load(args.ddpm)
    image = flow_model.config.problem.kind == "image"
    items = _list_inputs(Path(args.input), image)
    y_shape = tuple(flow_model.flow.y_shape)
    for name, arr in items:
        if tuple(arr.shape) != y_shape:
            raise ContractError(f"{name}: measurement shape {tuple(arr.shape)} does not match {y_shape}")
    if image:
        y = to_unit(np.stack([a for _, a in items]))
    else:
        y = torch.as_tensor(np.stack([a for _, a in items]), dtype=torch.float32)
    nfe = den.schedule.T if args.nfe is None else args.nfe
    root = RngStream(args.seed, STREAM_ZT)
    streams = [root.spawn(i) for i in range(len(items))]
    res = sample_posterior(y, flow_model, den, n_steps=nfe, rng=streams)
    out = _out_dir(args)
    op = flow_model.degradation
    rows = []
    for i, (name, _) in enumerate(items):
        x = res.x[i:i + 1]
        if image:
            q8 = quantize(x[0])
            xq = to_unit(q8)[None]
            fname = f"{Path(name).stem}_sr.png"
            write_png(out / fname, q8)
            qerr = float(((xq.double() - x.clamp(0, 1).double()) ** 2).mean())
        else:
            xq = x
            fname = "samples.csv"
            qerr = 0.0
        rows.append([name, fname, args.seed, i, res.nfe, repr(consistency(y[i:i + 1], xq, op)), repr(qerr)])
    if not image:
        write_vector(out / "samples.csv", res.x.numpy())
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        w.writerows(rows)
    print(f"{len(rows)} sample(s), {res.nfe} NFEs ({nfe} denoiser + 1 flow inversion) -> {out}")
    return EXIT_OK


def parse_degradation(spec: str) -> DegradationOp:
    """A descriptor file, a checkpoint carrying one, or inline ``key=value`` tokens."""
    p = Path(spec)
    if p.is_file():
        raw = p.read_bytes()
        if raw.startswith(b"GPINVCK"):
            _, header = load_checkpoint(p)
            d = {k[len("degradation."):]: v for k, v in header.items() if k.startswith("degradation.")}
            if not d:
                raise ContractError(f"{p} carries no degradation descriptor")
            return DegradationOp.from_descriptor(d)
        tokens = [ln.replace(" = ", "=") for ln in raw.decode().splitlines() if ln.strip()]
    else:
        tokens = spec.split()
    d = {}
    for tok in tokens:
        key, sep, val = tok.partition("=")
        if not sep:
            raise ContractError(f"degradation descriptor token {tok!r} is not key=value")
        d[key.strip()] = val.strip()
    for key in ("kind", "in_shape"):
        if key not in d:
            raise ContractError(f"degradation descriptor needs {key!r}")
    return DegradationOp.from_descriptor(d)


def _load_any(path: Path, image: bool):
    if not path.is_file():
        raise DatasetError(f"file not found: {path}")
    return to_unit(read_png(path)) if image else torch.as_tensor(read_vector(path), dtype=torch.float32)


def cmd_eval(args) -> int:
    op = parse_degradation(args.degradation)
    image = len(op.in_shape) == 3
    manifest = Path(args.pairs)
    if not manifest.is_file():
        raise DatasetError(f"manifest not found: {manifest}")
    with open(manifest, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ContractError(f"manifest {manifest} has no pairs")
    if "output" not in rows[0] or not ({"input", "original"} & set(rows[0])):
        raise ContractError("manifest needs an 'output' column and an 'input' or 'original' column")
    base = manifest.parent
    report = EvalReport()
    for row in rows:
        x_sr = _load_any(base / row["output"], image)
        original = _load_any(base / row["original"], image) if row.get("original") else None
        if row.get("input"):
            y = _load_any(base / row["input"], image)
        elif original is not None:
            y = apply(op, original[None])[0]
        else:
            raise ContractError(f"row for {row['output']} has neither input nor original")
        report.add(row["output"], x_sr, y, op, original=original)
    out = _out_dir(args)
    (out / "eval_report.csv").write_text(report.to_csv())
    summary = report.summary()
    (out / "eval_summary.txt").write_text(summary)
    print(summary, end="")
    return EXIT_OK


def cmd_toy2d(args) -> int:
    from .toy import run_toy2d, sigma_scaling

    out = _out_dir(args)
    overrides = list(args.set or [])
    for i, matrix in enumerate(args.matrix or ["1,0", "0.5,0.5"]):
        sub = out / f"D{i}"
        res = run_toy2d(matrix, args.y, args.sigma, args.iters, args.ddpm_iters, args.samples,
                        args.seed, args.nfe, overrides=overrides, out_dir=sub)
        print(res.summary())
    if not args.no_scaling:
        table = sigma_scaling((args.matrix or ["0.5,0.5"])[-1], iters=args.iters, seed=args.seed,
                              overrides=overrides)
        (out / "sigma_scaling.csv").write_text(table.to_csv())
        print(table.to_csv(), end="")
    print(f"data files in {out}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    out = _out_dir(args)
    for i in range(args.n):
        img = synthetic_image(args.seed, i, args.size, args.channels)
        write_png(out / f"{i:06d}.png", img)
        if args.lr_scale:
            op = DegradationOp("bicubic-downsample", img.shape, scale=args.lr_scale)
            (out / "lr").mkdir(exist_ok=True)
            write_png(out / "lr" / f"{i:06d}.png", quantize(op(to_unit(img)[None])[0]))
    print(f"{args.n} image(s) written to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gpinv", description="Generative pseudoinverse: train, sample and evaluate.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="INI experiment config")
            p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override")
        p.add_argument("--seed", type=int, default=None if config else 0)
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("train-flow", help="fit the degradation flow")
    common(p)
    p.set_defaults(func=cmd_train_flow)

    p = sub.add_parser("train-ddpm", help="fit the conditional denoiser on a frozen flow")
    common(p)
    p.add_argument("--flow", required=True, help="flow checkpoint")
    p.set_defaults(func=cmd_train_ddpm)

    p = sub.add_parser("sample", help="draw one restoration per measurement")
    common(p, config=False)
    p.add_argument("--flow", required=True)
    p.add_argument("--ddpm", required=True)
    p.add_argument("--input", required=True, help="PNG file or directory, or CSV of vector measurements")
    p.add_argument("--nfe", type=int, help="denoiser evaluations (default: full schedule)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="PSNR, SSIM and consistency over a manifest of pairs")
    p.add_argument("--pairs", required=True, help="CSV with output and input and/or original columns")
    p.add_argument("--degradation", required=True,
                   help="descriptor file, checkpoint, or inline 'kind=... in_shape=... scale=...'")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("toy2d", help="two-dimensional linear toy against the closed form")
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--iters", type=int, help="flow iterations (default: config default)")
    p.add_argument("--ddpm-iters", type=int)
    p.add_argument("--matrix", action="append", help="row of D, e.g. 0.5,0.5 (repeatable)")
    p.add_argument("--y", type=float, default=2.0, help="measurement to condition on")
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--nfe", type=int)
    p.add_argument("--no-scaling", action="store_true", help="skip the sigma-scaling table")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_toy2d)

    p = sub.add_parser("gen-data", help="write the synthetic image corpus as PNGs")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--channels", type=int, default=1, choices=(1, 3))
    p.add_argument("--lr-scale", type=int, default=0, help="also write bicubic measurements at this factor")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    threads = os.environ.get("GPINV_NUM_THREADS")
    try:
        if threads:
            torch.set_num_threads(max(1, int(threads)))
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except (UsageError, ConfigError, DatasetError, CompatibilityError, CheckpointError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ContractError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
