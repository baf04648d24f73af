"""Training configuration and its ``key = value`` text format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from anca.classifier import LossConfig
from anca.data import AUGMENT_MODES
from anca.errors import ConfigError
from anca.model import Architecture
from anca.nca import RolloutConfig
from anca.pooling import POOL_MODES


@dataclass(frozen=True)
class TrainConfig:
    input_size: int = 64
    channels: int = 128
    steps: int = 64
    hidden: int = 128
    fire_rate: float = 0.5
    pool_mode: str = "attention"
    top_fraction: float = 0.10
    gamma: float = 2.0
    lr0: float = 0.0004
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    decay: float = 0.9999
    batch_size: int = 16
    epochs: int = 32
    folds: int = 5
    seed: int = 0
    eval_seed: int = 1234
    augmentation: str = "rot90"
    checkpoint_interval: int = 0
    class_weights: bool = False
    checkpoint_segments: bool = False

    def __post_init__(self):
        positive = ("input_size", "channels", "hidden", "batch_size", "folds")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("steps", "epochs", "checkpoint_interval", "seed", "eval_seed"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.channels < 3:
            raise ConfigError("channels must be >= 3 to hold the RGB image")
        if self.pool_mode not in POOL_MODES:
            raise ConfigError(f"pool_mode must be one of {POOL_MODES}")
        if self.augmentation not in AUGMENT_MODES:
            raise ConfigError(f"augmentation must be one of {AUGMENT_MODES}")
        if not 0.0 < self.top_fraction <= 1.0:
            raise ConfigError("top_fraction must be in (0, 1]")
        if not 0.0 < self.fire_rate <= 1.0:
            raise ConfigError("fire_rate must be in (0, 1]")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0 and 0.0 < self.decay <= 1.0):
            raise ConfigError("beta1, beta2 must be in [0, 1) and decay in (0, 1]")
        if self.lr0 <= 0 or self.adam_eps <= 0 or self.gamma < 0:
            raise ConfigError("lr0 and adam_eps must be positive, gamma nonnegative")

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)

    def architecture(self, classes: int) -> Architecture:
        return Architecture(
            channels=self.channels,
            hidden=self.hidden,
            classes=classes,
            input_size=self.input_size,
            pool_mode=self.pool_mode,
            top_fraction=self.top_fraction,
        )

    def rollout(self, record_trajectory: bool = False) -> RolloutConfig:
        return RolloutConfig(self.steps, self.fire_rate, record_trajectory, self.checkpoint_segments)

    def loss(self, class_weights=None) -> LossConfig:
        return LossConfig(self.gamma, class_weights, "mean")

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str, base: TrainConfig | None = None) -> TrainConfig:
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key in values:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            values[key] = value
        return (base or cls()).with_overrides(values)

    @classmethod
    def load(cls, path) -> TrainConfig:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        return cls.from_text(text)

    def with_overrides(self, values: dict[str, str]) -> TrainConfig:
        types = {f.name: f.type for f in fields(self)}
        parsed = {}
        for key, value in values.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            parsed[key] = _parse(key, value, types[key])
        return self.replace(**parsed)


PRESETS = {
    "full": {},
    # the two large tissue datasets converge faster and use a higher rate
    "crc": {"epochs": "10", "lr0": "0.001"},
    "patchcam": {"epochs": "5", "lr0": "0.004"},
    "toy": {
        "input_size": "32",
        "channels": "16",
        "hidden": "16",
        "steps": "16",
        "epochs": "15",
    },
}


def preset(name: str) -> TrainConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return TrainConfig().with_overrides(PRESETS[name])


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(key: str, value: str, typ) -> object:
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            low = value.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(value)
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"bad value {value!r} for {key} ({typ})") from None
