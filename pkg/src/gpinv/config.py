"""Experiment configuration: an INI file with five fixed sections.

Example::

    [problem]
    kind = vector
    degradation = linear-matrix
    matrix = 0.5,0.5
    in_shape = 2

    [training]
    sigma = 0.05

Every key has a default; unknown sections or keys are errors.  Dotted
overrides such as ``flow.layers=4`` are applied on top of the file.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import torch

from .degradations import DegradationOp
from .numerics import DTYPE


class ConfigError(ValueError):
    pass


@dataclass
class ProblemConfig:
    kind: str = "vector"                 # vector | image
    degradation: str = "linear-matrix"
    matrix: str = "1,0"                  # rows separated by ';'
    in_shape: str = "2"                  # n, or CxHxW
    scale: int = 1


@dataclass
class FlowConfig:
    layers: int = 8
    hidden: int = 64
    clamp: float = 2.0


@dataclass
class DiffusionConfig:
    T: int = 1000
    beta_1: float = 1e-4
    beta_T: float = 0.02
    sigma_variant: str = "beta"
    hidden: int = 128


@dataclass
class TrainingConfig:
    sigma: float = 0.05
    flow_iters: int = 20000
    flow_batch: int = 256
    flow_lr: float = 1e-3
    clip_norm: float = 1.0
    lr_decay: str = "cosine"             # cosine | none
    ddpm_iters: int = 10000
    ddpm_batch: int = 256
    ddpm_lr: float = 1e-3
    cache_latents: bool = False
    log_every: int = 100
    seed: int = 0


@dataclass
class IOConfig:
    dataset: str = "gaussian:200000"     # directory of PNGs, .npy file, gaussian:N or synthetic:N
    out_dir: str = "runs/default"
    flow_checkpoint: str = "flow.ckpt"
    ddpm_checkpoint: str = "ddpm.ckpt"
    flow_log: str = "flow_metrics.csv"
    ddpm_log: str = "ddpm_metrics.csv"


SECTIONS = {"problem": ProblemConfig, "flow": FlowConfig, "diffusion": DiffusionConfig,
            "training": TrainingConfig, "io": IOConfig}


def _convert(raw: str, typ, where: str):
    typ = {"int": int, "float": float, "str": str, "bool": bool}.get(typ, typ)
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        return typ(raw.strip())
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {typ.__name__}") from None


@dataclass
class ExperimentConfig:
    problem: ProblemConfig = field(default_factory=ProblemConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    io: IOConfig = field(default_factory=IOConfig)

    def __post_init__(self):
        self.validate()

    @classmethod
    def from_text(cls, text: str, overrides=()) -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from None
        values = {name: {} for name in SECTIONS}
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            values[section].update(parser[section])
        for item in overrides:
            key, sep, raw = item.partition("=")
            section, dot, name = key.strip().partition(".")
            if not sep or not dot:
                raise ConfigError(f"override {item!r} must look like section.key=value")
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section [{section}] in override {item!r}")
            values[section][name] = raw
        built = {}
        for section, klass in SECTIONS.items():
            known = {f.name: f for f in fields(klass)}
            kwargs = {}
            for name, raw in values[section].items():
                if name not in known:
                    raise ConfigError(f"unknown config key {section}.{name}")
                kwargs[name] = _convert(raw, known[name].type, f"{section}.{name}")
            built[section] = klass(**kwargs)
        return cls(**built)

    @classmethod
    def from_file(cls, path, overrides=()) -> "ExperimentConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        return cls.from_text(p.read_text(), overrides)

    def to_text(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for section in SECTIONS:
            parser[section] = {k: str(v) for k, v in dataclasses.asdict(getattr(self, section)).items()}
        out = []
        for section in SECTIONS:
            out.append(f"[{section}]")
            out.extend(f"{k} = {v}" for k, v in parser[section].items())
            out.append("")
        return "\n".join(out)

    def flat(self) -> dict:
        return {f"{s}.{k}": str(v) for s in SECTIONS
                for k, v in dataclasses.asdict(getattr(self, s)).items()}

    def replace(self, **sections) -> "ExperimentConfig":
        return dataclasses.replace(self, **sections)

    @property
    def in_shape(self) -> tuple:
        return tuple(int(s) for s in self.problem.in_shape.split("x"))

    def degradation(self) -> DegradationOp:
        p = self.problem
        if p.degradation == "linear-matrix":
            rows = [[float(v) for v in r.split(",")] for r in p.matrix.split(";")]
            return DegradationOp("linear-matrix", self.in_shape, matrix=torch.tensor(rows, dtype=DTYPE))
        return DegradationOp(p.degradation, self.in_shape, scale=p.scale)

    def validate(self):
        if self.training.sigma <= 0:
            raise ConfigError("training.sigma must be > 0")
        if self.problem.kind not in ("vector", "image"):
            raise ConfigError(f"problem.kind must be vector or image, got {self.problem.kind!r}")
        try:
            shape = self.in_shape
            op = self.degradation()
        except ValueError as exc:
            raise ConfigError(f"invalid problem section: {exc}") from None
        if (len(shape) == 1) != (self.problem.kind == "vector"):
            raise ConfigError(f"problem.in_shape {self.problem.in_shape} does not fit kind {self.problem.kind}")
        if self.problem.kind == "image":
            C, H, W = shape
            s = self.problem.scale
            if op.out_shape != (C, H // s, W // s):
                raise ConfigError(f"degradation output {op.out_shape} does not match the y grid "
                                  f"{(C, H // s, W // s)}")
            if s < 2:
                raise ConfigError("image problems need scale >= 2 so that z is non-empty")
        elif op.out_shape[0] >= shape[0]:
            raise ConfigError("vector problems need fewer measurements than unknowns")
        if self.training.lr_decay not in ("cosine", "none"):
            raise ConfigError("training.lr_decay must be cosine or none")
        for name in ("flow_iters", "ddpm_iters", "flow_batch", "ddpm_batch", "log_every"):
            if getattr(self.training, name) < 1:
                raise ConfigError(f"training.{name} must be >= 1")
