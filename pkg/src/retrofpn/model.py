"""Backbone + per-level retro-transformers, and per-scene sample preparation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import Backbone
from .config import RunConfig
from .geometry import PointCloud
from .nn import Module
from .pyramid import PyramidLevel, build_pyramid
from .retro import Ablation, RetroParams, retro_forward
from .tensor import Tensor

INPUT_DIM = 3


def input_features(cloud: PointCloud) -> np.ndarray:
    """Coordinates relative to the cloud's min corner."""
    if cloud.features is not None:
        return cloud.features
    if cloud.n == 0:
        return np.zeros((0, INPUT_DIM))
    return cloud.coords - cloud.coords.min(axis=0)


@dataclass
class Sample:
    name: str
    pyramid: list[PyramidLevel]
    features: np.ndarray

    @property
    def labels(self) -> list[np.ndarray]:
        return [lv.labels for lv in self.pyramid]


def prepare_sample(cloud: PointCloud, cfg: RunConfig, seed: int = 0, name: str = "") -> Sample:
    return Sample(name, build_pyramid(cloud, cfg, seed), input_features(cloud))


class RetroFPN(Module):
    def __init__(self, cfg: RunConfig, in_dim: int = INPUT_DIM, seed: int | None = None):
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        self.cfg = cfg
        self.backbone = Backbone(in_dim, cfg.backbone_channels, cfg.levels, rng)
        cl = cfg.backbone_channels
        self.retro = [
            RetroParams(cl, cfg.channels, cfg.num_classes, rng, kv_dim=cl if lvl == cfg.levels else None)
            for lvl in range(1, cfg.levels + 1)
        ]

    @property
    def ablation(self) -> Ablation:
        return Ablation(self.cfg.cross_att, self.cfg.pos_emb, self.cfg.sem_gate)

    def named_parameters(self, prefix: str = ""):
        yield from self.backbone.named_parameters(f"{prefix}backbone/")
        for lvl, params in enumerate(self.retro, start=1):
            yield from params.named_parameters(f"{prefix}retro/level_{lvl}/")

    def forward(self, sample: Sample) -> list[Tensor]:
        """Per-level logits, entry 0 = level 1 (None where a level is skipped)."""
        feats = self.backbone(sample.pyramid, Tensor(sample.features))
        weights = self.cfg.effective_loss_weights()
        needed = max(i + 1 for i, w in enumerate(weights) if w > 0) if any(weights) else 1
        outs = retro_forward(sample.pyramid, feats, self.retro, self.ablation, levels_needed=needed)
        return [None if o is None else o[1] for o in outs]

    __call__ = forward

    def predict(self, sample: Sample) -> list[np.ndarray]:
        """Arg-max labels per level (entry 0 = level 1)."""
        feats = self.backbone(sample.pyramid, Tensor(sample.features))
        outs = retro_forward(sample.pyramid, feats, self.retro, self.ablation)
        return [np.argmax(o[1].data, axis=1) for o in outs]
