"""Run configuration shared by the pyramid, model, trainer and CLI."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    levels: int = 4
    k: list[int] = field(default_factory=lambda: [8, 8, 8, 8])
    channels: int = 32
    backbone_channels: int = 32
    num_classes: int = 5
    loss_weights: list[float] = field(default_factory=lambda: [1.0, 1.0, 1.0, 1.0])
    base_cell: float = 0.2
    # per-level cap applied by random sampling after grid downsampling; 0 = uncapped
    max_points: list[int] = field(default_factory=lambda: [0, 1024, 256, 64])
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    betas: list[float] = field(default_factory=lambda: [0.9, 0.999])
    eps: float = 1e-8
    weight_decay: float = 0.0
    epochs: int = 40
    batch_scenes: int = 1
    seed: int = 0
    # ablation toggles
    hs: bool = True
    cross_att: bool = True
    pos_emb: bool = True
    sem_gate: bool = True

    def __post_init__(self):
        self.normalize()

    def normalize(self) -> "RunConfig":
        """Broadcast per-level scalars to length ``levels`` and validate."""
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        self.k = _per_level(self.k, self.levels, "k", int)
        self.loss_weights = _per_level(self.loss_weights, self.levels, "loss_weights", float)
        self.max_points = _per_level(self.max_points, self.levels, "max_points", int)
        self.betas = [float(b) for b in self.betas]
        if any(k < 1 for k in self.k):
            raise ConfigError(f"every K must be >= 1, got {self.k}")
        if any(w < 0 for w in self.loss_weights):
            raise ConfigError(f"loss weights must be >= 0, got {self.loss_weights}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not self.base_cell > 0:
            raise ConfigError(f"base_cell must be positive, got {self.base_cell}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.channels < 1 or self.backbone_channels < 1 or self.num_classes < 2:
            raise ConfigError("channels must be positive and num_classes >= 2")
        if self.batch_scenes < 1 or self.epochs < 0:
            raise ConfigError("batch_scenes must be >= 1 and epochs >= 0")
        return self

    def effective_loss_weights(self) -> list[float]:
        """Loss weights after the hierarchical-supervision toggle (level 1 always kept)."""
        if self.hs:
            return list(self.loss_weights)
        return [self.loss_weights[0]] + [0.0] * (self.levels - 1)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def replace(self, **changes) -> "RunConfig":
        data = self.to_dict()
        data.update(changes)
        return RunConfig.from_dict(data)


def _per_level(value, levels: int, name: str, cast):
    if isinstance(value, (int, float)):
        return [cast(value)] * levels
    value = [cast(v) for v in value]
    if len(value) == levels:
        return value
    if len(value) > levels:
        return value[:levels]
    if value:
        return value + [value[-1]] * (levels - len(value))
    raise ConfigError(f"{name} must not be empty")
