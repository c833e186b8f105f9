"""Experiment configuration: INI-style file with sections, plus dotted
``--set section.key=value`` overrides for sweeps."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigurationError


@dataclass
class RunSection:
    seed: int = 0
    seeds: list[int] = field(default_factory=lambda: [0])


@dataclass
class DataSection:
    kind: str = "synthetic"  # synthetic | csv | raw-f32
    classes: int = 20
    dim: int = 32
    train_per_class: int = 100
    test_per_class: int = 50
    spread: float = 0.25
    seed: int = -1  # -1: derive from the run seed
    train_path: str = ""
    test_path: str = ""
    header: bool = False


@dataclass
class ProtocolSection:
    steps: int = 5  # T
    replay_per_class: int = 0  # R
    split_sizes: list[int] = field(default_factory=list)  # explicit override


@dataclass
class ModelSection:
    hidden: list[int] = field(default_factory=lambda: [64, 32])
    scale_init: float = 4.0
    learn_scale: bool = True


@dataclass
class OptimSection:
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 32


@dataclass
class ReplaySection:
    enabled: bool = False
    strategy: str = "herding"  # herding | random


@dataclass
class DistillSection:
    feature: bool = False
    label: bool = False
    lambda_feat: float = 1.0
    lambda_label: float = 1.0
    kd_temperature: float = 2.0


@dataclass
class DceSection:
    enabled: bool = False
    k: int = -1  # -1: 10 for <=200 classes, 1 above
    scheme: str = "top_k"


@dataclass
class MerSection:
    enabled: bool = False
    alpha: float = 0.5
    beta: float = 0.8
    finetune: bool = True
    finetune_epochs: int = 30
    finetune_lr: float = 0.05


@dataclass
class OutputSection:
    results: str = ""
    checkpoint: str = ""
    resume: str = ""


@dataclass
class ExperimentConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    protocol: ProtocolSection = field(default_factory=ProtocolSection)
    model: ModelSection = field(default_factory=ModelSection)
    optim: OptimSection = field(default_factory=OptimSection)
    replay: ReplaySection = field(default_factory=ReplaySection)
    distill: DistillSection = field(default_factory=DistillSection)
    dce: DceSection = field(default_factory=DceSection)
    mer: MerSection = field(default_factory=MerSection)
    output: OutputSection = field(default_factory=OutputSection)

    def effective_k(self) -> int:
        if self.dce.k >= 0:
            return self.dce.k
        return 10 if self.data.classes <= 200 else 1

    def validate(self) -> None:
        from .collider import SCHEMES

        p, d = self.protocol, self.data
        if d.kind not in ("synthetic", "csv", "raw-f32"):
            raise ConfigurationError(f"unknown data.kind {d.kind!r}")
        if d.kind == "synthetic" and (d.classes < 2 or d.dim < 2):
            raise ConfigurationError("synthetic data needs classes >= 2 and dim >= 2")
        if p.steps < 1:
            raise ConfigurationError(f"protocol.steps must be >= 1, got {p.steps}")
        if p.replay_per_class < 0:
            raise ConfigurationError("protocol.replay_per_class must be >= 0")
        if p.split_sizes:
            if sum(p.split_sizes) != d.classes:
                raise ConfigurationError(
                    f"protocol.split_sizes {p.split_sizes} must partition {d.classes} classes"
                )
        else:
            if d.classes % 2 != 0:
                raise ConfigurationError(f"class count {d.classes} must be even (half first)")
            if (d.classes // 2) % p.steps != 0:
                raise ConfigurationError(
                    f"half the classes ({d.classes // 2}) must divide evenly into T={p.steps} steps"
                )
        if self.optim.lr <= 0 or not 0 <= self.optim.momentum < 1:
            raise ConfigurationError("optim.lr must be > 0 and momentum in [0, 1)")
        if self.optim.epochs < 1 or self.optim.batch_size < 1:
            raise ConfigurationError("optim.epochs and optim.batch_size must be >= 1")
        if self.dce.scheme not in SCHEMES:
            raise ConfigurationError(f"dce.scheme must be one of {SCHEMES}, got {self.dce.scheme!r}")
        if self.dce.enabled and d.kind == "synthetic":
            min_split = min(p.split_sizes[1:]) if p.split_sizes else (d.classes // 2) // p.steps
            if self.effective_k() >= min_split * d.train_per_class:
                raise ConfigurationError(
                    f"dce.k={self.effective_k()} must be smaller than the smallest incremental "
                    f"step's data ({min_split * d.train_per_class} samples)"
                )
        if not 0 <= self.mer.beta <= 1:
            raise ConfigurationError(f"mer.beta must lie in [0, 1], got {self.mer.beta}")
        if self.mer.alpha < 0:
            raise ConfigurationError(f"mer.alpha must be >= 0, got {self.mer.alpha}")
        if self.distill.kd_temperature <= 0:
            raise ConfigurationError("distill.kd_temperature must be positive")
        if self.replay.strategy not in ("herding", "random"):
            raise ConfigurationError(f"replay.strategy must be herding or random")
        if not self.model.hidden:
            raise ConfigurationError("model.hidden needs at least one layer width")

    def to_dict(self) -> dict:
        out = {}
        for sec in fields(self):
            sub = getattr(self, sec.name)
            for f in fields(sub):
                out[f"{sec.name}.{f.name}"] = getattr(sub, f.name)
        return out


def _parse_value(raw: str, ann, key: str):
    raw = raw.strip()
    if ann == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if ann == "int":
            return int(raw)
        if ann == "float":
            return float(raw)
        if ann == "list[int]":
            return [int(v) for v in raw.split(",") if v.strip()] if raw else []
    except ValueError as e:
        raise ConfigurationError(f"{key}: {e}") from e
    return raw  # str


def _set_key(cfg: ExperimentConfig, dotted: str, raw: str) -> None:
    if "." in dotted:
        sec_name, key = dotted.split(".", 1)
        candidates = [(sec_name, key)]
    else:
        candidates = [
            (sec.name, dotted)
            for sec in fields(cfg)
            if any(f.name == dotted for f in fields(getattr(cfg, sec.name)))
        ]
        if len(candidates) > 1:
            raise ConfigurationError(
                f"key {dotted!r} is ambiguous ({', '.join(s for s, _ in candidates)}); qualify it"
            )
    if not candidates:
        raise ConfigurationError(f"unknown config key {dotted!r}")
    sec_name, key = candidates[0]
    section = getattr(cfg, sec_name, None)
    if section is None or not hasattr(type(section), "__dataclass_fields__"):
        raise ConfigurationError(f"unknown config section {sec_name!r}")
    match = [f for f in fields(section) if f.name == key]
    if not match:
        raise ConfigurationError(f"unknown config key {sec_name}.{key!r}")
    setattr(section, key, _parse_value(raw, match[0].type, f"{sec_name}.{key}"))


def load_config(path=None, overrides: list[str] | None = None) -> ExperimentConfig:
    """Config from an INI file plus ``key=value`` overrides, validated."""
    cfg = ExperimentConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(Path(path))
        if not read:
            raise ConfigurationError(f"cannot read config file {path}")
        for sec_name in parser.sections():
            if not hasattr(cfg, sec_name):
                raise ConfigurationError(f"unknown config section [{sec_name}]")
            for key, raw in parser.items(sec_name):
                _set_key(cfg, f"{sec_name}.{key}", raw)
    for ov in overrides or []:
        if "=" not in ov:
            raise ConfigurationError(f"override {ov!r} must look like section.key=value")
        dotted, raw = ov.split("=", 1)
        _set_key(cfg, dotted.strip(), raw)
    if len(cfg.run.seeds) == 1 and cfg.run.seeds == [0] and cfg.run.seed != 0:
        cfg.run.seeds = [cfg.run.seed]
    cfg.validate()
    return cfg
