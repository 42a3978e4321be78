"""Full tracker network: backbone -> HFC -> LGCH."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .backbone import VARIANTS, Backbone, BackboneConfig, CorrelationPyramid
from .hfc import HFC, SE_REDUCTION
from .lgch import EG_BLOCKS, EG_RATIO, HEAD_WIDTH, LGCH, HeadOutputs
from .ndcore import NDArray
from .nn import Module


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig
    se_reduction: int = SE_REDUCTION
    head_width: int = HEAD_WIDTH
    eg_ratio: int = EG_RATIO
    eg_blocks: int = EG_BLOCKS


def variant_config(name: str, **overrides) -> ModelConfig:
    try:
        bb = VARIANTS[name.upper()]
    except KeyError:
        raise ValueError(f"unknown variant {name!r}; expected one of {sorted(VARIANTS)}") from None
    bb_fields = {k: overrides.pop(k) for k in list(overrides) if k in BackboneConfig.__dataclass_fields__}
    return ModelConfig(replace(bb, **bb_fields), **overrides)


class CGTrack(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.backbone = Backbone(cfg.backbone, rng=rng)
        self.hfc = HFC(cfg.backbone.stage_dims, cfg.se_reduction, rng=rng)
        self.head = LGCH(self.hfc.out_channels, cfg.head_width, cfg.eg_ratio, cfg.eg_blocks, rng=rng)

    def forward(self, template: NDArray, search: NDArray) -> HeadOutputs:
        return self.forward_embedded(self.backbone.embed(template), self.backbone.embed(search))

    def forward_embedded(self, z: NDArray, x: NDArray) -> HeadOutputs:
        """Forward with an already patch-embedded template/search pair."""
        return self.head(self.hfc(self.backbone.forward_embedded(z, x)))

    def pyramid(self, template: NDArray, search: NDArray) -> CorrelationPyramid:
        return self.backbone(template, search)

    def cost(self, shape=None, prefix=""):
        bb = self.cfg.backbone
        if shape is None:
            shape = ((1, 3, bb.template_size, bb.template_size), (1, 3, bb.search_size, bb.search_size))
        maps, rows = self.backbone.cost(shape, "backbone")
        fused, r = self.hfc.cost(maps, "hfc")
        rows += r
        out, r = self.head.cost(fused, "head")
        return out, rows + r


def build_model(variant: str = "B", seed: int = 0, dtype=None, **overrides) -> CGTrack:
    model = CGTrack(variant_config(variant, **overrides), seed=seed)
    if dtype is not None:
        model.to(dtype)
    return model
