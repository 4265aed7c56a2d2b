"""Training objectives.

The autoencoder objective is ``MSE + w_s * (1 - SSIM)``.  The fusion
objective pulls the fused image toward a mask-composited intensity target
and toward the pixelwise max of the 3x3-smoothed sources.  Targets depend
only on the source images, so they are computed as plain arrays.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import core
from . import functional as F
from .autograd import Tensor
from .core import ShapeError

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
MASK_KERNEL = 11
GRAD_KERNEL = 3


@dataclass(frozen=True)
class LossWeights:
    w_s: float = 1e4
    w_g: float = 10.0

    def __post_init__(self):
        if self.w_s <= 0 or self.w_g < 0:
            raise ValueError("loss weights must be positive")


@dataclass
class IntensityMasks:
    ir: np.ndarray
    vi: np.ndarray


def _check_same(*arrays) -> None:
    shapes = {tuple(np.shape(a.data if isinstance(a, Tensor) else a)) for a in arrays}
    if len(shapes) != 1:
        raise ShapeError(f"image shapes differ: {sorted(shapes)}")


def _window(shape, size: int = 11) -> int:
    # shrink the window on images smaller than 11 px, keeping it odd
    size = min(size, *shape[-2:])
    return size if size % 2 else size - 1


def ssim(a, b, window: int = 11, sigma: float = 1.5) -> Tensor:
    """Mean single-scale SSIM over all 'valid' Gaussian windows (dynamic range 1)."""
    a, b = F.tensor(a), F.tensor(b)
    _check_same(a, b)
    kernel = core.gaussian_kernel(_window(a.shape, window), sigma)

    def blur(x):
        return F.filter2d(x, kernel, "valid")

    mu_a, mu_b = blur(a), blur(b)
    mu_aa, mu_bb, mu_ab = F.mul(mu_a, mu_a), F.mul(mu_b, mu_b), F.mul(mu_a, mu_b)
    s_aa = F.sub(blur(F.mul(a, a)), mu_aa)
    s_bb = F.sub(blur(F.mul(b, b)), mu_bb)
    s_ab = F.sub(blur(F.mul(a, b)), mu_ab)
    num = F.mul(F.add(F.mul(2.0, mu_ab), SSIM_C1), F.add(F.mul(2.0, s_ab), SSIM_C2))
    den = F.mul(F.add(F.add(mu_aa, mu_bb), SSIM_C1), F.add(F.add(s_aa, s_bb), SSIM_C2))
    return F.mean(F.div(num, den))


def auto_terms(image, recon, w: LossWeights = LossWeights()) -> dict[str, Tensor]:
    _check_same(image, recon)
    mse = F.mse(recon, image)
    ssim_term = F.mul(w.w_s, F.sub(1.0, ssim(image, recon)))
    return {"total": F.add(mse, ssim_term), "mse": mse, "ssim": ssim_term}


def loss_auto(image, recon, w: LossWeights = LossWeights()) -> Tensor:
    return auto_terms(image, recon, w)["total"]


def intensity_masks(ir, vi, k: int = MASK_KERNEL) -> IntensityMasks:
    ir, vi = core.as_array(ir), core.as_array(vi)
    _check_same(ir, vi)
    avg_ir = core.mean_filter(ir, k)
    avg_vi = core.mean_filter(vi, k)
    total = avg_ir + avg_vi
    flat = total < 1e-12
    safe = np.where(flat, 1.0, total)
    loc_ir = np.where(flat, 0.5, avg_ir / safe)
    loc_vi = np.where(flat, 0.5, avg_vi / safe)
    m_ir = (loc_ir >= loc_vi).astype(np.float64)
    return IntensityMasks(m_ir, 1.0 - m_ir)


def intensity_target(ir, vi) -> np.ndarray:
    m = intensity_masks(ir, vi)
    return m.ir * core.as_array(ir) + m.vi * core.as_array(vi)


def gradient_target(ir, vi, k: int = GRAD_KERNEL) -> np.ndarray:
    ir, vi = core.as_array(ir), core.as_array(vi)
    _check_same(ir, vi)
    return np.maximum(np.maximum(core.mean_filter(ir, k), 0.0),
                      np.maximum(core.mean_filter(vi, k), 0.0))


def loss_int(fused, ir, vi) -> Tensor:
    _check_same(fused, ir, vi)
    return F.mse(fused, intensity_target(ir, vi))


def loss_gra(fused, ir, vi) -> Tensor:
    _check_same(fused, ir, vi)
    return F.mse(fused, gradient_target(ir, vi))


def cam_terms(fused, ir, vi, w: LossWeights = LossWeights()) -> dict[str, Tensor]:
    li = loss_int(fused, ir, vi)
    lg = loss_gra(fused, ir, vi)
    return {"total": F.add(li, F.mul(w.w_g, lg)), "int": li, "gra": lg}


def loss_cam(fused, ir, vi, w: LossWeights = LossWeights()) -> Tensor:
    return cam_terms(fused, ir, vi, w)["total"]
