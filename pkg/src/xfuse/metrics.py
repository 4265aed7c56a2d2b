"""Objective fusion-quality metrics: EN, SD, MI, FMI (dct / pixel) and SCD.

Images are floats in [0, 1]; histogram-based metrics first quantise to
8-bit levels with ``round(x * 255)``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dctn

from .core import ShapeError

LEVELS = 256
DCT_BLOCK = 8


def levels(img) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.int64)


def _same_shape(*imgs) -> None:
    shapes = {np.shape(i) for i in imgs}
    if len(shapes) != 1:
        raise ShapeError(f"image shapes differ: {sorted(shapes)}")


def _entropy_of_counts(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log2(p)).sum()) + 0.0  # no negative zero


def entropy(img) -> float:
    """Shannon entropy (bits) of the 256-bin grey-level histogram."""
    return _entropy_of_counts(np.bincount(levels(img).ravel(), minlength=LEVELS))


def std_dev(img) -> float:
    """Population standard deviation of the 8-bit grey levels."""
    return float(np.std(levels(img).astype(np.float64)))


def _mutual_information(x: np.ndarray, y: np.ndarray, bins: int = LEVELS) -> tuple[float, float]:
    """(MI, joint entropy) in bits for two integer label arrays in [0, bins)."""
    joint = np.bincount((x.ravel() * bins + y.ravel()), minlength=bins * bins).reshape(bins, bins)
    h_joint = _entropy_of_counts(joint.ravel())
    h_x = _entropy_of_counts(joint.sum(axis=1))
    h_y = _entropy_of_counts(joint.sum(axis=0))
    return h_x + h_y - h_joint, h_joint


def mutual_info(fused, a, b) -> float:
    """MI(F, A) + MI(F, B) from joint 256x256 histograms, in bits."""
    _same_shape(fused, a, b)
    lf = levels(fused)
    return _mutual_information(lf, levels(a))[0] + _mutual_information(lf, levels(b))[0]


# ----------------------------------------------------------------------------
# feature mutual information


def dct_features(img) -> np.ndarray:
    """Magnitudes of the orthonormal DCT-II of each 8x8 block, quantised to 256 levels.

    For inputs in [0, 1] every coefficient magnitude is at most 8 (the DC term
    of an all-ones block), which fixes the quantisation range.
    """
    img = np.asarray(img, dtype=np.float64)
    H, W = img.shape
    if H % DCT_BLOCK or W % DCT_BLOCK:
        raise ShapeError(f"dct features need dims divisible by {DCT_BLOCK}, got {H}x{W}")
    blocks = img.reshape(H // DCT_BLOCK, DCT_BLOCK, W // DCT_BLOCK, DCT_BLOCK).transpose(0, 2, 1, 3)
    coef = np.abs(dctn(blocks, axes=(2, 3), norm="ortho"))
    coef = coef.transpose(0, 2, 1, 3).reshape(H, W)
    return levels(coef / float(DCT_BLOCK))


def normalized_mi(x: np.ndarray, y: np.ndarray) -> float:
    """MI / joint entropy; two constant (zero-entropy) inputs count as fully shared."""
    mi, h = _mutual_information(x, y)
    if h <= 0.0:
        return 1.0
    return float(min(max(mi / h, 0.0), 1.0))


def _regional_nmi(x: np.ndarray, y: np.ndarray, window: int | None) -> float:
    if window is None:
        return normalized_mi(x, y)
    H, W = x.shape
    vals = [normalized_mi(x[i:i + window, j:j + window], y[i:i + window, j:j + window])
            for i in range(0, H - window + 1, window)
            for j in range(0, W - window + 1, window)]
    if not vals:
        raise ShapeError(f"window {window} larger than image {H}x{W}")
    return float(np.mean(vals))


def fmi(fused, a, b, feature: str = "pixel", window: int | None = None) -> float:
    """Feature mutual information in [0, 1].

    Features are raw grey levels (``"pixel"``) or block-DCT magnitudes
    (``"dct"``).  The score is the mean of NMI(F, A) and NMI(F, B), computed
    over the whole image or averaged over non-overlapping ``window`` regions.
    """
    _same_shape(fused, a, b)
    if feature == "pixel":
        extract = levels
    elif feature == "dct":
        extract = dct_features
    else:
        raise ValueError(f"unknown FMI feature {feature!r}")
    ff, fa, fb = extract(fused), extract(a), extract(b)
    return 0.5 * (_regional_nmi(ff, fa, window) + _regional_nmi(ff, fb, window))


# ----------------------------------------------------------------------------
# SCD


def _corr(x: np.ndarray, y: np.ndarray) -> float:
    xc, yc = x - x.mean(), y - y.mean()
    den = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    if den <= 1e-12 * max(1.0, x.size):
        return 0.0
    return float((xc * yc).sum() / den)


def scd(fused, a, b) -> float:
    """corr(F - B, A) + corr(F - A, B)."""
    _same_shape(fused, a, b)
    f, a, b = (np.asarray(v, dtype=np.float64) for v in (fused, a, b))
    return _corr(f - b, a) + _corr(f - a, b)


# ----------------------------------------------------------------------------
# reports


@dataclass
class MetricRow:
    name: str
    EN: float
    SD: float
    MI: float
    FMI_dct: float
    FMI_pixel: float
    SCD: float


METRIC_NAMES = ("EN", "SD", "MI", "FMI_dct", "FMI_pixel", "SCD")


def evaluate_pair(name: str, fused, ir, vi) -> MetricRow:
    return MetricRow(
        name=name,
        EN=entropy(fused),
        SD=std_dev(fused),
        MI=mutual_info(fused, ir, vi),
        FMI_dct=fmi(fused, ir, vi, "dct"),
        FMI_pixel=fmi(fused, ir, vi, "pixel"),
        SCD=scd(fused, ir, vi),
    )


@dataclass
class MetricReport:
    rows: list[MetricRow]

    def mean(self, name: str = "mean") -> MetricRow:
        if not self.rows:
            raise ValueError("empty report")
        vals = {m: float(np.mean([getattr(r, m) for r in self.rows])) for m in METRIC_NAMES}
        return MetricRow(name=name, **vals)

    def write_csv(self, path, method: str = "mean") -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method"] + list(METRIC_NAMES))
            for row in self.rows + [self.mean(method)]:
                w.writerow([row.name] + [repr(getattr(row, m)) for m in METRIC_NAMES])


def read_report(path) -> list[dict]:
    with open(Path(path), newline="") as fh:
        return [{k: (v if k == "method" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]

