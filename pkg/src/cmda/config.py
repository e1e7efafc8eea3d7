"""Experiment configuration as flat sectioned ``key = value`` text.

Every section maps onto one dataclass.  Values are scalars or comma-separated
lists; unknown sections and keys are rejected.  ``dumps(loads(text))`` is a
canonical form, so parse -> serialize -> parse is a fixed point.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
import typing
from dataclasses import dataclass, field, fields

from .adapt import EvalConfig, ModelConfig, TrainConfig
from .losses import LossWeights
from .scene import DomainSpec, source_preset, target_preset


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    source_frames: int = 200
    target_frames: int = 200
    eval_frames: int = 100
    camera: bool = True
    image_size: int = 64
    root: str = "data"


@dataclass
class DomainSection:
    beam_count: int = 64
    beam_elevations: tuple[float, ...] = ()
    points_per_beam: int = 720
    object_length_mean: float = 4.6
    object_length_std: float = 0.25
    object_count_range: tuple[int, ...] = (4, 10)
    dropout_rate: float = 0.0
    seed: int = 0

    @classmethod
    def from_spec(cls, spec: DomainSpec) -> "DomainSection":
        return cls(spec.beam_count, tuple(spec.beam_elevations), spec.points_per_beam, spec.object_length_mean,
                   spec.object_length_std, tuple(spec.object_count_range), spec.dropout_rate, spec.seed)

    def to_spec(self) -> DomainSpec:
        return DomainSpec(self.beam_count, tuple(self.beam_elevations), self.points_per_beam,
                          self.object_length_mean, self.object_length_std, tuple(self.object_count_range),
                          self.dropout_rate, self.seed)


@dataclass
class StageSection:
    """Per-stage training options (loss weights live in the shared ``[loss]`` section)."""

    epochs: int = 24
    rounds: int = 4
    batch_size: int = 4
    lr: float = 0.03
    momentum: float = 0.9
    seed: int = 0
    refresh_period: int = 1
    theta_low: float = math.pi / 2
    theta_high: float = 3 * math.pi / 2
    pos_weight: float = 20.0
    t_pos: float = 0.6
    disc_score: float = 0.3
    disc_lr_scale: float = 1.0
    grl_warmup: int = 0
    adversarial: bool = True
    use_cmki: bool = True
    max_steps: int = 0

    def to_train_config(self, stage: str, weights: LossWeights) -> TrainConfig:
        if stage == "pretrain" and not self.use_cmki:
            weights = dataclasses.replace(weights, cmki=0.0)
        return TrainConfig(
            stage=stage, epochs=self.epochs, rounds=self.rounds, batch_size=self.batch_size, lr=self.lr,
            momentum=self.momentum, seed=self.seed, weights=weights, refresh_period=self.refresh_period,
            theta_low=self.theta_low, theta_high=self.theta_high, pos_weight=self.pos_weight, t_pos=self.t_pos,
            disc_score=self.disc_score, disc_lr_scale=self.disc_lr_scale, adversarial=self.adversarial,
            grl_warmup=self.grl_warmup, max_steps=self.max_steps)


@dataclass
class LossSection:
    det: float = 1.0
    cmki: float = 1.0
    cdan: float = 1.0
    d: float = 0.1
    ent: float = 1e-4

    def weights(self) -> LossWeights:
        return LossWeights(self.det, self.cmki, self.cdan, self.d, self.ent)


def _default_source():
    return DomainSection.from_spec(source_preset(0))


def _default_target():
    return DomainSection.from_spec(target_preset(1))


def _default_selftrain():
    return StageSection(epochs=1, batch_size=1, lr=0.003, t_pos=0.75, disc_lr_scale=10.0, grl_warmup=400)


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    source: DomainSection = field(default_factory=_default_source)
    target: DomainSection = field(default_factory=_default_target)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: StageSection = field(default_factory=StageSection)
    selftrain: StageSection = field(default_factory=_default_selftrain)
    loss: LossSection = field(default_factory=LossSection)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def train_config(self, stage: str) -> TrainConfig:
        return getattr(self, stage).to_train_config(stage, self.loss.weights())

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Offset every seed by ``seed`` (data, model init and both training stages)."""
        c = loads(dumps(self))
        c.source.seed += seed
        c.target.seed += seed
        c.model.seed += seed
        c.pretrain.seed += seed
        c.selftrain.seed += seed
        return c


SECTIONS = tuple(f.name for f in fields(ExperimentConfig))


# ------------------------------------------------------------- (de)serialise


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    return str(value)


def _parse(text: str, tp, where: str):
    try:
        if tp is bool:
            low = text.strip().lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text.strip()
        origin = typing.get_origin(tp)
        if origin is tuple:
            (inner, *_rest) = typing.get_args(tp)
            parts = [p.strip() for p in text.split(",") if p.strip()]
            return tuple(_parse(p, inner, where) for p in parts)
    except ValueError as err:
        raise ConfigError(f"{where}: {err}") from None
    raise ConfigError(f"{where}: unsupported field type {tp!r}")


def dumps(cfg: ExperimentConfig) -> str:
    out = []
    for sec in SECTIONS:
        obj = getattr(cfg, sec)
        out.append(f"[{sec}]")
        for f in fields(obj):
            out.append(f"{f.name} = {_format(getattr(obj, f.name))}")
        out.append("")
    return "\n".join(out)


def loads(text: str, source: str = "<config>") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"),
                                   inline_comment_prefixes=None, default_section="\x00unused")
    cp.optionxform = str  # keep key case
    try:
        cp.read_string(text, source=source)
    except configparser.Error as err:
        raise ConfigError(f"{source}: {err}") from None
    cfg = ExperimentConfig()
    for sec in cp.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{sec}]")
        obj = getattr(cfg, sec)
        hints = typing.get_type_hints(type(obj))
        known = {f.name for f in fields(obj)}
        values = {}
        for key, raw in cp.items(sec):
            if key not in known:
                raise ConfigError(f"{source}: unknown key {key!r} in [{sec}]")
            values[key] = _parse(raw, hints[key], f"{source}: [{sec}] {key}")
        try:
            setattr(cfg, sec, dataclasses.replace(obj, **values))
        except (ValueError, TypeError) as err:
            raise ConfigError(f"{source}: [{sec}]: {err}") from None
    _validate(cfg, source)
    return cfg


def _validate(cfg: ExperimentConfig, source: str) -> None:
    try:
        cfg.source.to_spec()
        cfg.target.to_spec()
        cfg.loss.weights()
        cfg.model.grid
    except ValueError as err:
        raise ConfigError(f"{source}: {err}") from None
    for name in ("source_frames", "target_frames", "eval_frames"):
        if getattr(cfg.dataset, name) < 0:
            raise ConfigError(f"{source}: [dataset] {name} must be >= 0")


def load(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read(), str(path))


def save(cfg: ExperimentConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(cfg))
