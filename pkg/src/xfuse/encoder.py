"""Per-modality feature extractor: a 3x3 stem then three (max-pool, dense block) stages."""
from __future__ import annotations

import numpy as np

from . import functional as F
from .autograd import Tensor
from .config import FuseConfig
from .core import ShapeError
from .nn import Conv2d, DenseBlock, Module


class Encoder(Module):
    """Returns ``(shallow, deep)``: the stem output at full resolution and the
    last dense block's output at 1/8 resolution."""

    def __init__(self, cfg: FuseConfig, rng: np.random.Generator, modality: str = "ir"):
        if modality not in ("ir", "vi"):
            raise ValueError(f"modality must be 'ir' or 'vi', got {modality!r}")
        self.modality = modality
        self.stem = Conv2d(1, cfg.stem_channels, 3, rng)
        stages = []
        cin = cfg.stem_channels
        for cout in cfg.stage_channels:
            stages.append(DenseBlock(cin, cout, cfg.growth, rng, cfg.dense_layers))
            cin = cout
        self.stages = stages
        self.factor = 2 ** len(stages)

    def forward(self, image) -> tuple[Tensor, Tensor]:
        x = F.tensor(image)
        if x.ndim == 2:
            x = F.reshape(x, (1, 1) + x.shape)
        elif x.ndim == 3:
            x = F.reshape(x, (x.shape[0], 1) + x.shape[1:])
        H, W = x.shape[-2:]
        if H % self.factor or W % self.factor:
            raise ShapeError(f"image {H}x{W} is not divisible by {self.factor}")
        shallow = F.relu(self.stem(x))
        deep = shallow
        for block in self.stages:
            deep = block(F.maxpool2(deep))
        return shallow, deep


def encode(image, encoder: Encoder) -> tuple[Tensor, Tensor]:
    return encoder(image)
