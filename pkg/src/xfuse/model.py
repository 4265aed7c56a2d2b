"""The stage-1 autoencoder and the full two-encoder fusion network."""
from __future__ import annotations

import numpy as np

from .autograd import Tensor
from .cam import build_fusion
from .config import FuseConfig
from .decoder import Decoder, SkipBundle
from .encoder import Encoder
from .nn import Module


class AutoEncoder(Module):
    """Encoder + decoder for one modality.  Both skip slots carry the same
    encoder's features and the deep stream is the encoder's deep map."""

    def __init__(self, cfg: FuseConfig, rng: np.random.Generator, modality: str = "ir"):
        self.encoder = Encoder(cfg, rng, modality)
        self.decoder = Decoder(cfg, rng)
        self.modality = modality

    def forward(self, image) -> Tensor:
        shallow, deep = self.encoder(image)
        return self.decoder(deep, SkipBundle("deep", deep, deep), SkipBundle("shallow", shallow, shallow))


class FusionNet(Module):
    def __init__(self, cfg: FuseConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.enc_ir = Encoder(cfg, rng, "ir")
        self.enc_vi = Encoder(cfg, rng, "vi")
        self.fusion = build_fusion(cfg, rng)
        self.decoder = Decoder(cfg, rng)

    def forward(self, ir, vi) -> Tensor:
        sh_ir, deep_ir = self.enc_ir(ir)
        sh_vi, deep_vi = self.enc_vi(vi)
        fused = self.fusion(deep_ir, deep_vi)
        return self.decoder(fused, SkipBundle("deep", deep_ir, deep_vi),
                            SkipBundle("shallow", sh_ir, sh_vi))

