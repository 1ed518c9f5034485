"""JSON run configuration with strict key checking."""
from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field

from .backbone import UNet, UNetConfig
from .degradations import ALL_TASKS
from .pip import ABLATIONS, PipConfig


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    levels: int = 3
    base_channels: int = 16
    blocks_per_level: int = 2
    bypass_pip: bool = False


@dataclass
class TrainConfig:
    alpha: float = 0.002
    theta_thre: float = math.pi / 2
    lr_peak: float = 5e-4
    lr_scale: float = 4.0
    warmup_epochs: int = 1
    total_epochs: int = 10
    steps_per_epoch: int = 150
    batch_size: int = 4
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    seed: int = 0
    dmix_enabled: bool = False
    ablation: str = "e"

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError("train.alpha must be >= 0")
        if not 0 <= self.theta_thre <= math.pi:
            raise ConfigError("train.theta_thre must lie in [0, pi]")
        if self.total_epochs < 1 or self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ConfigError("train.total_epochs, steps_per_epoch and batch_size must be >= 1")
        if not 0 <= self.warmup_epochs <= self.total_epochs:
            raise ConfigError("train.warmup_epochs must lie in [0, total_epochs]")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"train.ablation must be one of {sorted(ABLATIONS)}, got {self.ablation!r}")

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch


@dataclass
class DataConfig:
    tasks: list = field(default_factory=lambda: ["noise", "rain", "lowlight"])
    image_size: int = 64
    val_per_task: int = 16
    val_seed: int = 12345

    def __post_init__(self):
        self.tasks = list(self.tasks)
        bad = [t for t in self.tasks if t not in ALL_TASKS]
        if bad or not self.tasks:
            raise ConfigError(f"data.tasks must be a non-empty subset of {list(ALL_TASKS)}, got {self.tasks}")
        if len(set(self.tasks)) != len(self.tasks):
            raise ConfigError("data.tasks contains duplicates")
        if self.image_size < 8:
            raise ConfigError("data.image_size must be >= 8")


@dataclass
class PathsConfig:
    run_dir: str
    log_name: str = "metrics.log"


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: DataConfig
    paths: PathsConfig
    pip: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def unet_config(self) -> UNetConfig:
        T = len(self.data.tasks)
        ucfg = UNetConfig(levels=self.model.levels, base_channels=self.model.base_channels,
                          blocks_per_level=self.model.blocks_per_level, image_size=self.data.image_size,
                          T=T, bypass_pip=self.model.bypass_pip)
        if self.pip:
            base = [PipConfig(**{**p, "T": T}) for p in self.pip]
        else:
            base = ucfg.skip_pip_configs()
        ucfg.pip_configs = [dataclasses.replace(p, theta_thre=self.train.theta_thre).with_ablation(self.train.ablation)
                            for p in base]
        if len(ucfg.pip_configs) != ucfg.n_skips:
            raise ConfigError(f"pip needs one entry per skip ({ucfg.n_skips}), got {len(ucfg.pip_configs)}")
        return ucfg

    def build_model(self) -> UNet:
        return UNet(self.unet_config(), seed=self.train.seed)


_PIP_FIELDS = {f.name for f in dataclasses.fields(PipConfig)} - {"T", "theta_thre",
                                                                  "enable_d", "enable_B", "enable_selective"}


def _build(cls, section: str, raw, required=()):
    if not isinstance(raw, dict):
        raise ConfigError(f"{section}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {', '.join(unknown)}")
    for key in required:
        if key not in raw:
            raise ConfigError(f"{section}.{key}: missing required field")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from None


def parse_config(raw: dict, seed_override: int | None = None) -> RunConfig:
    """Validate a raw JSON document; ``seed_override`` replaces ``train.seed``."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - {"model", "pip", "train", "data", "paths"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {', '.join(unknown)}")
    if "paths" not in raw:
        raise ConfigError("paths.run_dir: missing required field")
    train_raw = dict(raw.get("train", {}))
    if seed_override is not None:
        train_raw["seed"] = int(seed_override)
    pip = raw.get("pip", [])
    if not isinstance(pip, list):
        raise ConfigError("pip: expected a list with one object per skip connection")
    for i, p in enumerate(pip):
        if not isinstance(p, dict):
            raise ConfigError(f"pip[{i}]: expected an object")
        bad = sorted(set(p) - _PIP_FIELDS)
        if bad:
            raise ConfigError(f"pip[{i}]: unknown key(s) {', '.join(bad)}")
    cfg = RunConfig(
        model=_build(ModelConfig, "model", raw.get("model", {})),
        train=_build(TrainConfig, "train", train_raw),
        data=_build(DataConfig, "data", raw.get("data", {})),
        paths=_build(PathsConfig, "paths", raw["paths"], required=("run_dir",)),
        pip=[dict(p) for p in pip],
    )
    cfg.unet_config()
    return cfg


def resolve_seed(flag: int | None, config_seed: int | None = None) -> int | None:
    """Seed precedence: command-line flag, then ``PIP_SEED``, then the config."""
    if flag is not None:
        return flag
    env = os.environ.get("PIP_SEED")
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"PIP_SEED must be an integer, got {env!r}") from None
    return config_seed


def load_config(path, seed_flag: int | None = None) -> RunConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(raw, resolve_seed(seed_flag))
