"""Versioned JSON run configuration. Unknown keys are rejected."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .fusion import FusionConfig
from .losses import LossConfig
from .model import ModelConfig
from .training import TrainConfig

CONFIG_VERSION = 1


def _build(cls, section: str, d):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(f"[{section}] must be an object")
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"[{section}] unknown keys {unknown}; allowed: {sorted(allowed)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"[{section}] {exc}") from None


@dataclass
class RunConfig:
    data: str
    out: str = "run"
    seed: int = 0
    target_range: tuple = (-1.0, 1.0)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.seed, loss=self.loss)

    def to_dict(self) -> dict:
        t = self.train.to_dict()
        t.pop("loss")
        t.pop("seed")
        return {"version": CONFIG_VERSION, "data": self.data, "out": self.out, "seed": self.seed,
                "target_range": list(self.target_range), "fusion": self.fusion.to_dict(),
                "model": self.model.to_dict(), "train": t, "loss": self.loss.to_dict()}


TOP_KEYS = {"version", "data", "out", "seed", "target_range", "fusion", "model", "train", "loss"}


def parse_run_config(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("run configuration must be a JSON object")
    unknown = sorted(set(d) - TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}; allowed: {sorted(TOP_KEYS)}")
    version = d.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version}; expected {CONFIG_VERSION}")
    if "data" not in d:
        raise ConfigError("missing required key 'data'")
    train = dict(d.get("train") or {})
    for k in ("loss", "seed"):
        if k in train:
            raise ConfigError(f"[train] set {k!r} at the top level, not inside train")
    tr = list(d.get("target_range", (-1.0, 1.0)))
    if len(tr) != 2 or not tr[0] < tr[1]:
        raise ConfigError(f"target_range must be an increasing pair, got {tr}")
    loss = _build(LossConfig, "loss", d.get("loss"))
    return RunConfig(
        data=str(d["data"]), out=str(d.get("out", "run")), seed=int(d.get("seed", 0)),
        target_range=(float(tr[0]), float(tr[1])),
        fusion=_build(FusionConfig, "fusion", d.get("fusion")),
        model=_build(ModelConfig, "model", d.get("model")),
        train=_build(TrainConfig, "train", train),
        loss=loss,
    )


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_run_config(d)
