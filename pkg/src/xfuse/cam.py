"""Cross-attention fusion of the two deep feature maps.

Each modality branch runs self-attention, a cyclic shift, self-attention
again and the inverse shift.  Cross-attention then takes queries from the
other branch and keys/values from its own, weighting with the reversed
softmax so that the *least* similar keys dominate.  The two branch outputs
are summed.
"""
from __future__ import annotations

import math

import numpy as np

from . import functional as F
from .autograd import Parameter, Tensor
from .config import FuseConfig
from .core import ShapeError
from .nn import Conv2d, DenseBlock, LayerNorm, MLP, Module


def attention(q: Tensor, k: Tensor, v: Tensor, activation: str = "softmax") -> tuple[Tensor, Tensor]:
    """Single-head scaled dot-product attention; returns ``(output, weights)``."""
    d = q.shape[-1]
    scores = F.mul(F.matmul(q, F.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(d))
    if activation == "re_softmax":
        weights = F.re_softmax(scores)
    elif activation == "softmax":
        weights = F.softmax(scores)
    else:
        raise ValueError(f"unknown attention activation {activation!r}")
    return F.matmul(weights, v), weights


class SABlock(Module):
    def __init__(self, d: int, rng: np.random.Generator, mlp_ratio: int = 4, eps: float = 1e-6):
        self.qkv = Parameter(rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, 3 * d)))
        self.norm1 = LayerNorm(d, eps)
        self.norm2 = LayerNorm(d, eps)
        self.mlp = MLP(d, mlp_ratio * d, rng)
        self.d = d
        self.last_weights: Tensor | None = None

    def forward(self, x: Tensor) -> Tensor:
        x = F.tensor(x)
        if x.shape[-1] != self.d:
            raise ShapeError(f"tokens have dim {x.shape[-1]}, block expects {self.d}")
        d = self.d
        qkv = F.matmul(x, self.qkv)
        q = F.take_slice(qkv, (..., slice(0, d)))
        k = F.take_slice(qkv, (..., slice(d, 2 * d)))
        v = F.take_slice(qkv, (..., slice(2 * d, 3 * d)))
        att, self.last_weights = attention(q, k, v, "softmax")
        x = F.add(x, self.norm1(att))
        return F.add(x, self.mlp(self.norm2(x)))


class CABlock(Module):
    """Queries from the other modality, keys and values from this one.

    ``qkv="split"`` uses three independent d x d projections; ``qkv="dense"``
    applies one 3d x 3d map to ``[x_other, x_own, x_own]`` concatenated on the
    feature axis, which also lets the query see the own-modality tokens.
    """

    def __init__(self, d: int, rng: np.random.Generator, mlp_ratio: int = 4, eps: float = 1e-6,
                 activation: str = "re_softmax", qkv: str = "split"):
        std = 1.0 / math.sqrt(d)
        self.layout = qkv
        if qkv == "split":
            self.wq = Parameter(rng.normal(0.0, std, size=(d, d)))
            self.wk = Parameter(rng.normal(0.0, std, size=(d, d)))
            self.wv = Parameter(rng.normal(0.0, std, size=(d, d)))
        else:
            self.qkv = Parameter(rng.normal(0.0, std / math.sqrt(3), size=(3 * d, 3 * d)))
        self.norm1 = LayerNorm(d, eps)
        self.norm2 = LayerNorm(d, eps)
        self.mlp = MLP(d, mlp_ratio * d, rng)
        self.activation = activation
        self.d = d
        self.last_weights: Tensor | None = None
        self.last_scores: np.ndarray | None = None

    def project(self, x_own: Tensor, x_other: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        d = self.d
        if self.layout == "split":
            return F.matmul(x_other, self.wq), F.matmul(x_own, self.wk), F.matmul(x_own, self.wv)
        qkv = F.matmul(F.concat([x_other, x_own, x_own], axis=-1), self.qkv)
        return (F.take_slice(qkv, (..., slice(0, d))),
                F.take_slice(qkv, (..., slice(d, 2 * d))),
                F.take_slice(qkv, (..., slice(2 * d, 3 * d))))

    def forward(self, x_own: Tensor, x_other: Tensor) -> Tensor:
        x_own, x_other = F.tensor(x_own), F.tensor(x_other)
        if x_own.shape != x_other.shape:
            raise ShapeError(f"modality token shapes differ: {x_own.shape} vs {x_other.shape}")
        if x_own.shape[-1] != self.d:
            raise ShapeError(f"tokens have dim {x_own.shape[-1]}, block expects {self.d}")
        q, k, v = self.project(x_own, x_other)
        self.last_scores = (q.data @ np.swapaxes(k.data, -1, -2)) / math.sqrt(self.d)
        att, self.last_weights = attention(q, k, v, self.activation)
        x = F.add(x_own, self.norm1(att))
        return F.add(x, self.mlp(self.norm2(x)))


def sa_block(x, block: SABlock) -> Tensor:
    return block(x)


def ca_block(x_own, x_other, block: CABlock) -> Tensor:
    return block(x_own, x_other)


class CAMBranch(Module):
    def __init__(self, cfg: FuseConfig, rng: np.random.Generator):
        d = cfg.deep_channels
        self.sa_pre = [SABlock(d, rng, cfg.mlp_ratio, cfg.ln_eps) for _ in range(cfg.n_sa)]
        self.sa_post = [SABlock(d, rng, cfg.mlp_ratio, cfg.ln_eps) for _ in range(cfg.n_sa)]
        self.ca = [CABlock(d, rng, cfg.mlp_ratio, cfg.ln_eps, cfg.attention, cfg.ca_qkv)
                   for _ in range(cfg.n_ca)]


class CAM(Module):
    def __init__(self, cfg: FuseConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.ir = CAMBranch(cfg, rng)
        self.vi = CAMBranch(cfg, rng)
        self.trace: dict[str, Tensor] = {}

    def offsets(self, H: int, W: int) -> tuple[int, int]:
        if not self.cfg.shift:
            return 0, 0
        if self.cfg.shift_offsets is not None:
            return self.cfg.shift_offsets
        return H // 2, W // 2

    def intra(self, branch: CAMBranch, tokens: Tensor, H: int, W: int, tag: str) -> Tensor:
        """SA blocks, shift, SA blocks, unshift."""
        dy, dx = self.offsets(H, W)
        x = tokens
        for blk in branch.sa_pre:
            x = blk(x)
        self.trace[f"{tag}_sa1"] = x
        x = F.to_tokens(F.cyclic_shift(F.from_tokens(x, H, W), dy, dx))
        for blk in branch.sa_post:
            x = blk(x)
        x = F.to_tokens(F.cyclic_shift(F.from_tokens(x, H, W), -dy, -dx))
        self.trace[f"{tag}_sa2"] = x
        return x

    def forward(self, deep_ir, deep_vi) -> Tensor:
        deep_ir, deep_vi = F.tensor(deep_ir), F.tensor(deep_vi)
        if deep_ir.shape != deep_vi.shape:
            raise ShapeError(f"deep maps differ: {deep_ir.shape} vs {deep_vi.shape}")
        squeeze = deep_ir.ndim == 3
        if squeeze:
            deep_ir = F.reshape(deep_ir, (1,) + deep_ir.shape)
            deep_vi = F.reshape(deep_vi, (1,) + deep_vi.shape)
        H, W = deep_ir.shape[-2:]
        x_ir = self.intra(self.ir, F.to_tokens(deep_ir), H, W, "ir")
        x_vi = self.intra(self.vi, F.to_tokens(deep_vi), H, W, "vi")
        for ca_ir, ca_vi in zip(self.ir.ca, self.vi.ca):
            x_ir, x_vi = ca_ir(x_ir, x_vi), ca_vi(x_vi, x_ir)
        self.trace["ir_ca"], self.trace["vi_ca"] = x_ir, x_vi
        fused = F.from_tokens(F.add(x_ir, x_vi), H, W)
        return F.reshape(fused, fused.shape[1:]) if squeeze else fused


class CNNFusion(Module):
    """Ablation stand-in: four 3x3 convs over the concatenated deep maps."""

    def __init__(self, cfg: FuseConfig, rng: np.random.Generator):
        d = cfg.deep_channels
        self.convs = [Conv2d(2 * d, d, 3, rng)] + [Conv2d(d, d, 3, rng) for _ in range(3)]

    def forward(self, deep_ir, deep_vi) -> Tensor:
        x = F.concat([F.tensor(deep_ir), F.tensor(deep_vi)], axis=-3)
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = F.relu(x)
        return x


class DenseFusion(Module):
    """Ablation stand-in: one dense block and one 3x3 conv over the concatenated deep maps."""

    def __init__(self, cfg: FuseConfig, rng: np.random.Generator):
        d = cfg.deep_channels
        self.block = DenseBlock(2 * d, d, cfg.growth, rng, cfg.dense_layers)
        self.conv = Conv2d(d, d, 3, rng)

    def forward(self, deep_ir, deep_vi) -> Tensor:
        return self.conv(self.block(F.concat([F.tensor(deep_ir), F.tensor(deep_vi)], axis=-3)))


def build_fusion(cfg: FuseConfig, rng: np.random.Generator) -> Module:
    return {"cam": CAM, "cnn": CNNFusion, "dense": DenseFusion}[cfg.fusion](cfg, rng)


def cam_forward(deep_ir, deep_vi, cam: CAM) -> Tensor:
    return cam(deep_ir, deep_vi)
