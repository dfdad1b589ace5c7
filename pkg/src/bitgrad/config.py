"""Experiment configuration: one JSON document drives every CLI command."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .fxp import GRANULARITIES, OVERFLOW_MODES, ROUND_MODES
from .resource import LossConfig
from .training import TrainSettings


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    kind: str = "synthetic"        # synthetic | csv
    n_samples: int = 6000
    n_features: int = 16
    n_classes: int = 5
    separation: float = 2.0
    val_fraction: float = 0.25
    csv_path: str | None = None
    task: str = "classification"   # classification | regression


@dataclass
class ModelConfig:
    layer_sizes: list[int] = field(default_factory=lambda: [16, 64, 32, 32, 5])
    weight_granularity: str = "per_parameter"
    act_granularity: str = "per_channel"
    weight_f_init: float = 2.0
    act_f_init: float = 4.0
    act_i_init: float = 2.0
    round_mode: str = "RND"
    act_overflow: str = "WRAP"
    input_format: str = "s3.8:RND:SAT"
    rounded_sat_bounds: bool = True


@dataclass
class TrainBlock:
    epochs: int = 12
    batch_size: int = 256
    lr: float = 3e-3
    lr_min: float = 1e-5
    bitwidth_lr_scale: float = 1.0
    cosine_t0: int | None = None
    cosine_t_mult: int = 2
    beta_init: float = 5e-7
    beta_final: float = 1e-3
    gamma: float = 2e-8


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/run0"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainBlock = field(default_factory=TrainBlock)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def train_settings(self) -> TrainSettings:
        t = self.train
        return TrainSettings(
            epochs=t.epochs,
            batch_size=t.batch_size,
            lr=t.lr,
            lr_min=t.lr_min,
            bitwidth_lr_scale=t.bitwidth_lr_scale,
            cosine_t0=t.cosine_t0,
            cosine_t_mult=t.cosine_t_mult,
            loss=LossConfig(t.beta_init, t.beta_final, t.gamma),
            seed=self.seed,
            task=self.data.task,
        )


def _build(cls, raw: dict, path: str):
    fields = {f.name for f in cls.__dataclass_fields__.values()}
    unknown = set(raw) - fields
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {path}")
    return raw


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    _build(ExperimentConfig, raw, "config")
    cfg = ExperimentConfig(
        seed=int(raw.get("seed", 0)),
        out_dir=str(raw.get("out_dir", "runs/run0")),
        data=DataConfig(**_build(DataConfig, raw.get("data", {}), "data")),
        model=ModelConfig(**_build(ModelConfig, raw.get("model", {}), "model")),
        train=TrainBlock(**_build(TrainBlock, raw.get("train", {}), "train")),
    )
    validate_config(cfg)
    return cfg


def validate_config(cfg: ExperimentConfig):
    m, d, t = cfg.model, cfg.data, cfg.train
    if len(m.layer_sizes) < 2 or any(s < 1 for s in m.layer_sizes):
        raise ConfigError(f"bad layer_sizes {m.layer_sizes}")
    if m.weight_granularity not in GRANULARITIES:
        raise ConfigError(f"bad weight_granularity {m.weight_granularity!r}")
    if m.act_granularity not in GRANULARITIES:
        raise ConfigError(f"bad act_granularity {m.act_granularity!r}")
    if m.round_mode not in ROUND_MODES or m.act_overflow not in OVERFLOW_MODES:
        raise ConfigError("bad round/overflow mode")
    if d.kind not in ("synthetic", "csv"):
        raise ConfigError(f"bad data kind {d.kind!r}")
    if d.kind == "csv" and not d.csv_path:
        raise ConfigError("csv data needs csv_path")
    if d.task not in ("classification", "regression"):
        raise ConfigError(f"bad task {d.task!r}")
    if not 0.0 < d.val_fraction < 1.0:
        raise ConfigError("val_fraction must be in (0, 1)")
    if d.kind == "synthetic" and d.task == "classification" \
            and m.layer_sizes[-1] != d.n_classes:
        raise ConfigError("last layer size must equal n_classes")
    if d.kind == "synthetic" and m.layer_sizes[0] != d.n_features:
        raise ConfigError("first layer size must equal n_features")
    if t.epochs < 1 or t.batch_size < 1:
        raise ConfigError("epochs and batch_size must be positive")
    if (t.beta_init <= 0) != (t.beta_final <= 0):
        raise ConfigError("beta endpoints must both be positive or both zero")


def load_config(path: str | Path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    try:
        return config_from_dict(raw)
    except TypeError as e:
        raise ConfigError(str(e)) from e
