"""Image reconstruction with intensity-aware skip fusion at the deep and shallow levels."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .autograd import Tensor
from .config import FuseConfig
from .core import K_NABLA, ShapeError
from .nn import Conv2d, Module

ZERO_DENOM = 1e-12


@dataclass
class SkipBundle:
    level: str  # "deep" or "shallow"
    ir: Tensor
    vi: Tensor

    def __post_init__(self):
        if self.level not in ("deep", "shallow"):
            raise ValueError(f"level must be 'deep' or 'shallow', got {self.level!r}")
        self.ir, self.vi = F.tensor(self.ir), F.tensor(self.vi)
        if self.ir.shape != self.vi.shape:
            raise ShapeError(f"{self.level} skip maps differ: {self.ir.shape} vs {self.vi.shape}")


def nabla(level: str, fmap) -> Tensor:
    """Saliency strength: local 3x3 mean (deep) or its distance from 1 (shallow)."""
    base = F.filter2d(fmap, K_NABLA, "reflect")
    if level == "deep":
        return base
    if level == "shallow":
        # sqrt((1 - x)^2) == |1 - x|
        return F.absolute(F.sub(1.0, base))
    raise ValueError(f"unknown level {level!r}")


def skip_weights(bundle: SkipBundle) -> tuple[Tensor, Tensor]:
    n_ir, n_vi = nabla(bundle.level, bundle.ir), nabla(bundle.level, bundle.vi)
    denom = F.add(n_ir, n_vi)
    flat = np.abs(denom.data) < ZERO_DENOM
    safe = F.where(flat, 1.0, denom)
    w_ir = F.where(flat, 0.5, F.div(n_ir, safe))
    w_vi = F.where(flat, 0.5, F.div(n_vi, safe))
    return w_ir, w_vi


def skip_fuse(phi_c, bundle: SkipBundle) -> Tensor:
    phi_c = F.tensor(phi_c)
    if phi_c.shape != bundle.ir.shape:
        raise ShapeError(f"stream {phi_c.shape} does not match {bundle.level} skip {bundle.ir.shape}")
    w_ir, w_vi = skip_weights(bundle)
    return F.add(phi_c, F.add(F.mul(w_ir, bundle.ir), F.mul(w_vi, bundle.vi)))


class Decoder(Module):
    """Three (upsample, 3x3 conv, ReLU) stages, then a 3x3 conv to one channel and a sigmoid."""

    def __init__(self, cfg: FuseConfig, rng: np.random.Generator):
        chans = [cfg.deep_channels] + list(reversed(cfg.stage_channels[:-1])) + [cfg.stem_channels]
        self.ups = [Conv2d(a, b, 3, rng) for a, b in zip(chans[:-1], chans[1:])]
        self.out = Conv2d(cfg.stem_channels, 1, 3, rng)

    def forward(self, fused_deep, deep: SkipBundle, shallow: SkipBundle) -> Tensor:
        x = skip_fuse(fused_deep, deep)
        for conv in self.ups:
            x = F.relu(conv(F.upsample2(x)))
        x = skip_fuse(x, shallow)
        y = F.sigmoid(self.out(x))
        return F.reshape(y, y.shape[:-3] + y.shape[-2:])


def decode(fused_deep, deep: SkipBundle, shallow: SkipBundle, decoder: Decoder) -> Tensor:
    return decoder(fused_deep, deep, shallow)
