"""
Configuration objects for splat-align.

Every config is a frozen dataclass with `to_dict` / `from_dict` helpers so it
round-trips through the JSON files read by the CLI and stored in checkpoints.
"""
import json
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Optional

from lib.errors import ConfigError


class Branch(Enum):
    FUNDAMENTAL = "fundamental"
    ADVANCED = "advanced"


class CrossAttentionDirection(Enum):
    """Which branch supplies the queries of the guidance cross-attention."""
    FUN_QUERIES = "fun_queries"
    ADV_QUERIES = "adv_queries"


class FundamentalInit(Enum):
    RANDOM = "random"
    FROM_CHECKPOINT = "from-checkpoint"


class OptimizerName(Enum):
    SGD = "sgd"
    ADAM = "adam"


class Preset(Enum):
    T = "T"
    S = "S"
    L = "L"


# token dim, depth, heads
PRESET_SIZES = {
    Preset.T: (64, 2, 4),
    Preset.S: (128, 4, 8),
    Preset.L: (256, 6, 8),
}
DESK_EMBED_DIM = 64


def _enum(enum_cls, value, name):
    try:
        return value if isinstance(value, enum_cls) else enum_cls(value)
    except ValueError:
        choices = ", ".join(e.value for e in enum_cls)
        raise ConfigError(f"Invalid {name} '{value}' (expected one of: {choices})")


def _check_keys(cls, data: Dict[str, Any], section: str):
    if not isinstance(data, dict):
        raise ConfigError(f"Section '{section}' must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"Unknown key(s) in '{section}': {', '.join(unknown)}")


def _plain(value):
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


@dataclass(frozen=True)
class GroupingConfig:
    """Group divider settings plus the opacity-ranked cap applied before grouping."""
    num_groups: int = 16
    group_size: int = 16
    max_gaussians: int = 1024

    def __post_init__(self):
        if self.num_groups < 1:
            raise ConfigError(f"num_groups must be >= 1, got {self.num_groups}")
        if self.group_size < 1:
            raise ConfigError(f"group_size must be >= 1, got {self.group_size}")
        if self.max_gaussians < 1:
            raise ConfigError(f"max_gaussians must be >= 1, got {self.max_gaussians}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        _check_keys(cls, data, "grouping")
        return cls(**data)


@dataclass(frozen=True)
class EncoderConfig:
    token_dim: int = 64
    depth: int = 2
    heads: int = 4
    embed_dim: int = DESK_EMBED_DIM
    mlp_ratio: int = 4
    use_advanced_branch: bool = True
    use_cross_attention: bool = True
    freeze_fundamental: bool = False
    fundamental_init: FundamentalInit = FundamentalInit.RANDOM
    cross_attention_direction: CrossAttentionDirection = CrossAttentionDirection.FUN_QUERIES
    preset: Optional[Preset] = Preset.T
    grouping: GroupingConfig = field(default_factory=GroupingConfig)

    def __post_init__(self):
        object.__setattr__(self, "fundamental_init",
                           _enum(FundamentalInit, self.fundamental_init, "fundamental_init"))
        object.__setattr__(self, "cross_attention_direction",
                           _enum(CrossAttentionDirection, self.cross_attention_direction, "cross_attention_direction"))
        if self.preset is not None:
            object.__setattr__(self, "preset", _enum(Preset, self.preset, "preset"))
            # a preset only names its exact sizes
            if (self.token_dim, self.depth, self.heads) != PRESET_SIZES[self.preset]:
                object.__setattr__(self, "preset", None)
        if isinstance(self.grouping, dict):
            object.__setattr__(self, "grouping", GroupingConfig.from_dict(self.grouping))
        for name in ("token_dim", "heads", "embed_dim", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.depth < 0:
            raise ConfigError(f"depth must be >= 0, got {self.depth}")
        if self.token_dim % self.heads:
            raise ConfigError(f"token_dim {self.token_dim} is not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.token_dim // self.heads

    def to_dict(self):
        data = {f.name: _plain(getattr(self, f.name)) for f in fields(self)}
        data["grouping"] = self.grouping.to_dict()
        return data

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        _check_keys(cls, data, "encoder")
        preset = data.get("preset")
        if preset is None:
            data["preset"] = None
            return cls(**data)
        base = scaling_preset(preset, embed_dim=data.get("embed_dim", DESK_EMBED_DIM))
        return replace(base, **data)

    def with_flags(self, **flags) -> "EncoderConfig":
        return replace(self, **flags)


def scaling_preset(name, embed_dim: int = DESK_EMBED_DIM) -> EncoderConfig:
    """Encoder sizes for the T / S / L scaling presets."""
    preset = _enum(Preset, name, "preset")
    token_dim, depth, heads = PRESET_SIZES[preset]
    return EncoderConfig(token_dim=token_dim, depth=depth, heads=heads, embed_dim=embed_dim, preset=preset)


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.07
    lambda1: float = 0.5
    lambda2: float = 0.5
    symmetric: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError(f"lambda weights must be >= 0, got {self.lambda1}, {self.lambda2}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        _check_keys(cls, data, "loss")
        return cls(**data)


@dataclass(frozen=True)
class DatasetPaths:
    train_manifest: str = ""
    test_manifest: Optional[str] = None
    text_table: str = ""
    image_table: str = ""
    prompts_table: Optional[str] = None

    def resolved(self, base: Path) -> "DatasetPaths":
        def fix(p):
            if p is None or p == "":
                return p
            path = Path(p)
            return str(path if path.is_absolute() else (base / path))
        return DatasetPaths(**{f.name: fix(getattr(self, f.name)) for f in fields(self)})

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        _check_keys(cls, data, "dataset")
        return cls(**data)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 15
    batch_size: int = 24
    eval_batch_size: int = 80
    seed: int = 42
    optimizer: OptimizerName = OptimizerName.ADAM
    encoder: EncoderConfig = field(default_factory=lambda: scaling_preset(Preset.T))
    loss: LossConfig = field(default_factory=LossConfig)
    dataset: DatasetPaths = field(default_factory=DatasetPaths)
    output_dir: str = "runs/latest"
    fundamental_checkpoint: Optional[str] = None
    point_cloud_fraction: float = 0.0
    point_cloud_opacity: float = 0.4
    point_cloud_scale: float = 0.4

    def __post_init__(self):
        object.__setattr__(self, "optimizer", _enum(OptimizerName, self.optimizer, "optimizer"))
        for name, cls in (("encoder", EncoderConfig), ("loss", LossConfig), ("dataset", DatasetPaths)):
            if isinstance(getattr(self, name), dict):
                object.__setattr__(self, name, cls.from_dict(getattr(self, name)))
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError(f"batch sizes must be >= 1, got {self.batch_size}, {self.eval_batch_size}")
        if not 0.0 <= self.point_cloud_fraction <= 1.0:
            raise ConfigError(f"point_cloud_fraction must be in [0, 1], got {self.point_cloud_fraction}")

    def to_dict(self) -> Dict[str, Any]:
        data = {f.name: _plain(getattr(self, f.name)) for f in fields(self)}
        data["encoder"] = self.encoder.to_dict()
        data["loss"] = self.loss.to_dict()
        data["dataset"] = self.dataset.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        _check_keys(cls, data, "train")
        return cls(**data)

    @classmethod
    def from_json_file(cls, path) -> "TrainConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
        config = cls.from_dict(data)
        changes = {"dataset": config.dataset.resolved(path.parent)}
        if config.fundamental_checkpoint and not Path(config.fundamental_checkpoint).is_absolute():
            changes["fundamental_checkpoint"] = str(path.parent / config.fundamental_checkpoint)
        return replace(config, **changes)

    def with_overrides(self, **changes) -> "TrainConfig":
        return replace(self, **changes)
