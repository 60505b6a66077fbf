"""Run configuration: named presets, JSON config files and flag overrides.

Resolution order is defaults < preset < config file < command-line flags.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace

from .attention import ScanConfig
from .errors import ConfigError
from .learning import LossConfig, TrainConfig


@dataclass(frozen=True)
class RunConfig:
    direction: str = "i-t"
    pooling: str = "avg"
    lambda1: float = 4.0
    lambda2: float = 5.0
    max_regions: int | None = None
    method: str = "scan"
    summax_cosine: bool = False
    margin: float = 0.2
    loss_mode: str = "hardest"
    batch_size: int = 16
    lr: float = 0.002
    lr_decay_epoch: int = 10
    lr_decay: float = 0.1
    epochs: int = 20
    clip_norm: float = 2.0
    bidirectional: bool = True
    hidden: int = 64
    embed_dim: int = 32
    seed: int = 7
    threads: int = 1

    def scan(self):
        return ScanConfig(self.direction, self.pooling, self.lambda1, self.lambda2,
                          self.max_regions, self.method, self.summax_cosine)

    def train_config(self):
        return TrainConfig(scan=self.scan(), loss=LossConfig(self.margin, self.loss_mode),
                           batch_size=self.batch_size, lr=self.lr,
                           lr_decay_epoch=self.lr_decay_epoch, lr_decay=self.lr_decay,
                           epochs=self.epochs, clip_norm=self.clip_norm,
                           bidirectional=self.bidirectional)

    def validate(self):
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.hidden < 1 or self.embed_dim < 1:
            raise ConfigError("hidden and embed_dim must be positive")
        self.train_config()  # runs the component validators
        return self

    def to_dict(self):
        return asdict(self)


FIELD_NAMES = tuple(f.name for f in fields(RunConfig))

PROFILES = {
    # desk-scale defaults
    "toy": dict(batch_size=16, lr=0.002, lr_decay_epoch=10, epochs=20, hidden=64, embed_dim=32),
    # 15 epochs at 2e-4 then 15 at 2e-5
    "flickr": dict(batch_size=128, lr=0.0002, lr_decay_epoch=15, epochs=30, hidden=1024, embed_dim=300),
    # 10 epochs at 5e-4 then 10 at 5e-5
    "coco": dict(batch_size=128, lr=0.0005, lr_decay_epoch=10, epochs=20, hidden=1024, embed_dim=300),
}

FORMULATIONS = {
    "ti-lse": dict(direction="t-i", pooling="lse", lambda1=9.0, lambda2=6.0),
    "ti-avg": dict(direction="t-i", pooling="avg", lambda1=9.0),
    "it-lse": dict(direction="i-t", pooling="lse", lambda1=4.0, lambda2=5.0),
    "it-avg": dict(direction="i-t", pooling="avg", lambda1=4.0),
    "it-avg-l10": dict(direction="i-t", pooling="avg", lambda1=10.0),
    "it-sum": dict(direction="i-t", pooling="sum", lambda1=4.0),
    "it-max": dict(direction="i-t", pooling="max", lambda1=4.0),
    "it-avg-unidir": dict(direction="i-t", pooling="avg", lambda1=4.0, bidirectional=False),
    "it-avg-nohard": dict(direction="i-t", pooling="avg", lambda1=4.0, loss_mode="all"),
    "summax-ti": dict(method="sum-max", direction="t-i"),
    "summax-it": dict(method="sum-max", direction="i-t"),
}


def _build_presets():
    presets = {}
    for prof, pvals in PROFILES.items():
        for form, fvals in FORMULATIONS.items():
            vals = {**pvals, **fvals}
            if prof == "coco" and form == "it-lse":
                vals["lambda2"] = 20.0
            presets[f"{prof}-{form}"] = vals
    return presets


PRESETS = _build_presets()
DEFAULT_PRESET = "toy-it-avg"


def _apply(cfg, values, source):
    unknown = sorted(set(values) - set(FIELD_NAMES))
    if unknown:
        raise ConfigError(f"unknown configuration keys in {source}: {', '.join(unknown)}")
    try:
        return replace(cfg, **values)
    except TypeError as exc:
        raise ConfigError(f"bad configuration in {source}: {exc}") from None


def resolve(preset=None, config_path=None, overrides=None):
    """Build a validated :class:`RunConfig`."""
    file_values = {}
    if config_path is not None:
        try:
            with open(config_path, encoding="utf-8") as f:
                file_values = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {config_path} is not valid JSON: {exc}") from None
        if not isinstance(file_values, dict):
            raise ConfigError(f"config file {config_path} must hold a JSON object")
        file_values = dict(file_values)
    preset = preset or file_values.pop("preset", None) or DEFAULT_PRESET
    file_values.pop("preset", None)
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(sorted(PRESETS))}")
    cfg = _apply(RunConfig(), PRESETS[preset], f"preset {preset}")
    cfg = _apply(cfg, file_values, str(config_path))
    cfg = _apply(cfg, {k: v for k, v in (overrides or {}).items() if v is not None}, "flags")
    return cfg.validate()
