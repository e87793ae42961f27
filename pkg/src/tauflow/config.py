"""Model and training configuration.

Configs are plain dataclasses serialised as JSON text. Unknown keys and
wrong types are rejected by :func:`from_dict`.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass
class StdpConfig:
    kappa: float = 10.0
    theta_u: float = 0.0
    theta_s: float = 0.0
    beta: float = 0.5
    rho: float = 0.5
    enabled: bool = True

    def validate(self) -> None:
        if self.kappa <= 0:
            raise ConfigError("stdp.kappa must be > 0")
        if not 0.0 < self.beta <= 1.0:
            raise ConfigError("stdp.beta must lie in (0, 1]")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError("stdp.rho must lie in [0, 1]")


@dataclass
class LossWeights:
    main: float = 1.0
    aux: float = 0.4
    complexity: float = 0.1
    diversity: float = 0.05
    flow: float = 0.1
    stdp: float = 0.01


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch: int = 8
    T0: int = 10
    Tmult: int = 2
    patience: int = 200
    seed: int = 42
    accum_steps: int = 1
    max_epochs: int = 1000
    augment: bool = True

    def validate(self) -> None:
        if self.batch < 1 or self.accum_steps < 1:
            raise ConfigError("train.batch and train.accum_steps must be >= 1")
        if self.T0 < 1 or self.Tmult < 1:
            raise ConfigError("train.T0 and train.Tmult must be >= 1")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("train.lr and train.weight_decay must be >= 0")


@dataclass
class ModelConfig:
    base_channel: int = 32
    max_groups: int = 5
    hidden_channels: int = 64
    group_embed_dim: int = 16
    pos_kernel: int = 3
    max_flow_steps: int = 3
    reward_scale: float = 0.1
    qk_dim: int = 7
    dt: float = 1.0
    tau_min: float = 1e-2
    tau_max: float = 1e3
    T: int = 2
    input_size: int = 224
    # ablation switch: pin the active group count instead of using the complexity head
    force_groups: int | None = None
    stdp: StdpConfig = field(default_factory=StdpConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def grid(self) -> int:
        """Spatial extent of the deepest feature map (56 at 224 input)."""
        return self.input_size // 4

    def validate(self) -> None:
        if self.input_size % 4 or self.input_size < 8:
            raise ConfigError("input_size must be a multiple of 4 and >= 8")
        if self.base_channel < 1 or self.hidden_channels < 1 or self.group_embed_dim < 1:
            raise ConfigError("channel counts must be positive")
        if self.max_groups < 1:
            raise ConfigError("max_groups must be >= 1")
        if self.force_groups is not None and not 1 <= self.force_groups <= self.max_groups:
            raise ConfigError("force_groups must lie in 1..max_groups")
        if self.dt <= 0:
            raise ConfigError("dt must be > 0")
        if not 0 < self.tau_min < self.tau_max:
            raise ConfigError("need 0 < tau_min < tau_max")
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if self.stdp.enabled and self.T < 2:
            raise ConfigError("STDP needs T >= 2 (one t -> t+1 transition)")
        if self.pos_kernel % 2 == 0:
            raise ConfigError("pos_kernel must be odd")
        self.stdp.validate()
        self.train.validate()

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _build(cls, data: dict[str, Any], where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = {"stdp": StdpConfig, "loss": LossWeights, "train": TrainConfig}.get(name)
        if cls is ModelConfig and sub is not None:
            kwargs[name] = _build(sub, value, f"{where}.{name}")
            continue
        default = getattr(cls(), name)
        if isinstance(default, bool):
            ok = isinstance(value, bool)
        elif isinstance(default, int) and not isinstance(default, bool):
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif isinstance(default, float):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
            value = float(value) if ok else value
        else:  # force_groups: int | None
            ok = value is None or (isinstance(value, int) and not isinstance(value, bool))
        if not ok:
            raise ConfigError(f"{where}.{name}: bad value {value!r}")
        kwargs[name] = value
    return cls(**kwargs)


def from_dict(data: dict[str, Any]) -> ModelConfig:
    cfg = _build(ModelConfig, data, "config")
    cfg.validate()
    return cfg


def from_json(text: str) -> ModelConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return from_dict(data)


def load_config(path: str | Path) -> ModelConfig:
    """Load a JSON config; the literal name ``default`` yields the defaults."""
    if str(path) == "default":
        return ModelConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return from_json(p.read_text())


def reduced(base_channel: int = 16, input_size: int = 64, **overrides) -> ModelConfig:
    """Small configuration used by fast tests and desk-scale runs."""
    cfg = ModelConfig(base_channel=base_channel, input_size=input_size, **overrides)
    cfg.validate()
    return cfg
