"""Dense array primitives shared by the network, the losses and the metrics.

Everything here works on plain float64 ``numpy`` arrays laid out as
``(C, H, W)`` or ``(N, C, H, W)``.  The differentiable wrappers live in
:mod:`xfuse.functional`; they call the forward functions below and the
matching ``*_backward`` adjoints.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PAD_MODES = ("valid", "zero", "reflect", "wrap", "edge")

# the 3x3 averaging kernel used by the deep-level saliency extractor
K_NABLA = np.full((3, 3), 1.0 / 9.0)


class ShapeError(ValueError):
    """Raised when array shapes are incompatible with an operation."""


def as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected a (C,H,W) or (N,C,H,W) array, got shape {x.shape}")


# ----------------------------------------------------------------------------
# padding as an index gather; the adjoint is the transposed 0/1 gather matrix


@lru_cache(maxsize=None)
def pad_index(n: int, before: int, after: int, mode: str) -> np.ndarray:
    """Source index for every padded position along one axis (-1 = zero fill)."""
    idx = _pad_index(n, before, after, mode)
    idx.flags.writeable = False
    return idx


def _pad_index(n: int, before: int, after: int, mode: str) -> np.ndarray:
    if mode == "zero":
        idx = np.arange(-before, n + after)
        idx[(idx < 0) | (idx >= n)] = -1
        return idx
    if mode == "reflect" and max(before, after) > n - 1:
        raise ShapeError(f"reflect padding of {max(before, after)} needs an axis longer than {n}")
    np_mode = {"reflect": "reflect", "wrap": "wrap", "edge": "edge"}[mode]
    return np.pad(np.arange(n), (before, after), mode=np_mode)


def pad2d(x: np.ndarray, ph: int, pw: int, mode: str) -> np.ndarray:
    if mode == "valid" or (ph == 0 and pw == 0):
        return x
    H, W = x.shape[-2:]
    ih = pad_index(H, ph, ph, mode)
    iw = pad_index(W, pw, pw, mode)
    out = x.take(np.maximum(ih, 0), axis=-2).take(np.maximum(iw, 0), axis=-1)
    if mode == "zero":
        out[..., ih < 0, :] = 0.0
        out[..., :, iw < 0] = 0.0
    return out


@lru_cache(maxsize=None)
def _gather_matrix(n: int, before: int, after: int, mode: str) -> np.ndarray:
    idx = pad_index(n, before, after, mode)
    m = np.zeros((len(idx), n))
    keep = idx >= 0
    m[np.nonzero(keep)[0], idx[keep]] = 1.0
    m.flags.writeable = False
    return m


def pad2d_backward(g: np.ndarray, H: int, W: int, ph: int, pw: int, mode: str) -> np.ndarray:
    if mode == "valid" or (ph == 0 and pw == 0):
        return g
    gh = _gather_matrix(H, ph, ph, mode)
    gw = _gather_matrix(W, pw, pw, mode)
    return gh.T @ g @ gw


# ----------------------------------------------------------------------------
# convolution


def _conv_pad(kh: int, kw: int, padding) -> tuple[int, int, str]:
    if padding == "valid":
        return 0, 0, "valid"
    if isinstance(padding, str):
        if padding not in PAD_MODES:
            raise ValueError(f"unknown padding mode {padding!r}")
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError("same-size padding needs odd kernel sizes")
        return kh // 2, kw // 2, padding
    p = int(padding)
    return p, p, "zero"


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(N,C,Hp,Wp) padded input -> (N,Ho,Wo,C,kh,kw) patch array."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.transpose(0, 2, 3, 1, 4, 5)


@lru_cache(maxsize=256)
def _patch_index(H: int, W: int, kh: int, kw: int, stride: int, ph: int, pw: int, mode: str):
    """Flat source index of every (output pixel, kernel tap), padding folded in.

    Zero-padded taps point at index ``H*W``, which the caller fills with 0.
    """
    ih = pad_index(H, ph, ph, mode) if mode != "valid" else np.arange(H)
    iw = pad_index(W, pw, pw, mode) if mode != "valid" else np.arange(W)
    Ho = (len(ih) - kh) // stride + 1
    Wo = (len(iw) - kw) // stride + 1
    rows = ih[np.arange(Ho)[:, None] * stride + np.arange(kh)[None, :]]  # (Ho,kh)
    cols = iw[np.arange(Wo)[:, None] * stride + np.arange(kw)[None, :]]  # (Wo,kw)
    r = rows[:, None, :, None]
    c = cols[None, :, None, :]
    idx = np.where((r < 0) | (c < 0), H * W, r * W + c).reshape(Ho * Wo, kh * kw)
    idx.flags.writeable = False
    return idx, Ho, Wo


def conv2d(x, weight, bias=None, stride: int = 1, padding="reflect", keep_cols: bool = False):
    """2-D cross-correlation.

    ``padding`` is ``"valid"``, a same-size mode (``"reflect"``, ``"zero"``,
    ``"wrap"``, ``"edge"``) or an explicit integer of zero padding.  With
    ``keep_cols`` the patch matrix is returned too, for reuse in backward.
    """
    x, squeeze = _batched(as_array(x))
    weight = as_array(weight)
    if weight.ndim != 4:
        raise ShapeError(f"kernel must be (out,in,kh,kw), got {weight.shape}")
    O, C, kh, kw = weight.shape
    N, Cx, H, W = x.shape
    if Cx != C:
        raise ShapeError(f"input has {Cx} channels, kernel expects {C}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    ph, pw, mode = _conv_pad(kh, kw, padding)
    if H + 2 * ph < kh or W + 2 * pw < kw:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {H + 2 * ph}x{W + 2 * pw}")
    cols = None
    if kh == 1 and kw == 1 and stride == 1 and ph == 0 and pw == 0:
        out = np.matmul(weight[:, :, 0, 0], x.reshape(N, C, H * W)).reshape(N, O, H, W)
    else:
        idx, Ho, Wo = _patch_index(H, W, kh, kw, stride, ph, pw, mode)
        flat = x.reshape(N, C, H * W)
        if mode == "zero":
            flat = np.concatenate([flat, np.zeros((N, C, 1))], axis=2)
        cols = flat[:, :, idx].transpose(0, 2, 1, 3).reshape(N * Ho * Wo, C * kh * kw)
        out = (cols @ weight.reshape(O, -1).T).reshape(N, Ho * Wo, O).transpose(0, 2, 1)
        out = out.reshape(N, O, Ho, Wo)
    if bias is not None:
        out = out + as_array(bias)[None, :, None, None]
    out = out[0] if squeeze else out
    return (out, cols) if keep_cols else out


def conv2d_backward(g, x, weight, stride: int = 1, padding="reflect", need_input: bool = True,
                    cols=None):
    """Adjoint of :func:`conv2d`: returns ``(d_input, d_weight, d_bias)``.

    ``cols`` is the patch matrix from ``conv2d(..., keep_cols=True)``.
    """
    x, squeeze = _batched(as_array(x))
    g = g[None] if squeeze else g
    O, C, kh, kw = weight.shape
    ph, pw, mode = _conv_pad(kh, kw, padding)
    xp = pad2d(x, ph, pw, mode)
    N = x.shape[0]
    Ho, Wo = g.shape[2:]
    if cols is None:
        cols = _im2col(xp, kh, kw, stride).reshape(N * Ho * Wo, -1)
    d_w = (g.transpose(1, 0, 2, 3).reshape(O, -1) @ cols).reshape(O, C, kh, kw)
    d_b = g.sum(axis=(0, 2, 3))
    d_x = None
    if need_input:
        gflat = g.transpose(0, 2, 3, 1).reshape(N * Ho * Wo, O)
        dcols = (gflat @ weight.reshape(O, -1)).reshape(N, Ho, Wo, C, kh, kw)
        d_xp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                d_xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                    dcols[..., i, j].transpose(0, 3, 1, 2)
        d_x = pad2d_backward(d_xp, x.shape[2], x.shape[3], ph, pw, mode)
        if squeeze:
            d_x = d_x[0]
    return d_x, d_w, d_b


def _rank_one(kernel: np.ndarray):
    """``(u, v)`` with ``outer(u, v) == kernel`` when the kernel is separable, else None."""
    u, s, vt = np.linalg.svd(kernel)
    if len(s) > 1 and s[1] > 1e-12 * s[0]:
        return None
    return u[:, 0] * s[0], vt[0]


def filter2d(x, kernel, padding="reflect") -> np.ndarray:
    """Apply one fixed 2-D kernel to every channel independently."""
    x = as_array(x)
    kernel = as_array(kernel)
    kh, kw = kernel.shape
    ph, pw, mode = _conv_pad(kh, kw, padding)
    H, W = x.shape[-2:]
    if H + 2 * ph < kh or W + 2 * pw < kw:
        raise ShapeError(f"kernel {kh}x{kw} larger than input {H}x{W}")
    sep = _rank_one(kernel)
    if sep is not None:
        xp = pad2d(x, ph, pw, mode)
        t = sliding_window_view(xp, kh, axis=-2) @ sep[0]
        return sliding_window_view(t, kw, axis=-1) @ sep[1]
    idx, Ho, Wo = _patch_index(H, W, kh, kw, 1, ph, pw, mode)
    flat = x.reshape(x.shape[:-2] + (H * W,))
    if mode == "zero":
        flat = np.concatenate([flat, np.zeros(flat.shape[:-1] + (1,))], axis=-1)
    return (flat[..., idx] @ kernel.reshape(-1)).reshape(x.shape[:-2] + (Ho, Wo))


def filter2d_backward(g, shape, kernel, padding="reflect") -> np.ndarray:
    kh, kw = kernel.shape
    ph, pw, mode = _conv_pad(kh, kw, padding)
    H, W = shape[-2:]
    Hp, Wp = H + 2 * ph, W + 2 * pw
    Ho, Wo = g.shape[-2:]
    d_xp = np.zeros(tuple(shape[:-2]) + (Hp, Wp))
    sep = _rank_one(kernel)
    if sep is not None:
        u, v = sep
        d_t = np.zeros(tuple(shape[:-2]) + (Ho, Wp))
        for j in range(kw):
            d_t[..., j:j + Wo] += v[j] * g
        for i in range(kh):
            d_xp[..., i:i + Ho, :] += u[i] * d_t
    else:
        for i in range(kh):
            for j in range(kw):
                d_xp[..., i:i + Ho, j:j + Wo] += kernel[i, j] * g
    return pad2d_backward(d_xp, H, W, ph, pw, mode)


def mean_filter(image, k: int, padding: str = "reflect") -> np.ndarray:
    """k x k box average, same-size output."""
    if k < 1 or k % 2 == 0:
        raise ValueError(f"mean filter size must be a positive odd integer, got {k}")
    return filter2d(image, np.full((k, k), 1.0 / (k * k)), padding)


def gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


# ----------------------------------------------------------------------------
# resampling and shifting


def maxpool2(x) -> np.ndarray:
    x = as_array(x)
    H, W = x.shape[-2:]
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {H}x{W}")
    blocks = x.reshape(x.shape[:-2] + (H // 2, 2, W // 2, 2))
    return blocks.max(axis=(-3, -1))


def maxpool2_backward(g, x) -> np.ndarray:
    """Route each output gradient to the first maximal element of its window."""
    H, W = x.shape[-2:]
    lead = x.shape[:-2]
    blocks = x.reshape(lead + (H // 2, 2, W // 2, 2))
    blocks = np.moveaxis(blocks, -3, -2).reshape(lead + (H // 2, W // 2, 4))
    arg = blocks.argmax(axis=-1)
    onehot = (np.arange(4) == arg[..., None]) * g[..., None]
    out = onehot.reshape(lead + (H // 2, W // 2, 2, 2))
    return np.moveaxis(out, -2, -3).reshape(x.shape)


def upsample2(x) -> np.ndarray:
    x = as_array(x)
    return x.repeat(2, axis=-2).repeat(2, axis=-1)


def upsample2_backward(g) -> np.ndarray:
    H, W = g.shape[-2:]
    return g.reshape(g.shape[:-2] + (H // 2, 2, W // 2, 2)).sum(axis=(-3, -1))


def cyclic_shift(x, dy: int, dx: int) -> np.ndarray:
    """Translate the spatial grid on a torus: ``out[i, j] = x[i - dy, j - dx]``."""
    return np.roll(as_array(x), (dy, dx), axis=(-2, -1))


# ----------------------------------------------------------------------------
# dense-layer primitives


def matmul(a, b) -> np.ndarray:
    a, b = as_array(a), as_array(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax(x, axis: int = -1) -> np.ndarray:
    x = as_array(x)
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def re_softmax(x, axis: int = -1) -> np.ndarray:
    """Softmax of the negated scores: the least similar entry gets the most weight."""
    return softmax(-as_array(x), axis=axis)


def layer_norm(x, gamma=None, beta=None, eps: float = 1e-6) -> np.ndarray:
    x = as_array(x)
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    y = (x - mu) / np.sqrt(var + eps)
    if gamma is not None:
        y = y * gamma
    if beta is not None:
        y = y + beta
    return y


def relu(x) -> np.ndarray:
    return np.maximum(as_array(x), 0.0)


def sigmoid(x) -> np.ndarray:
    x = as_array(x)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x) -> np.ndarray:
    x = as_array(x)
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))


def gelu_grad(x) -> np.ndarray:
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * du


# ----------------------------------------------------------------------------
# token <-> feature map


def to_tokens(fmap) -> np.ndarray:
    """(N,C,H,W) -> (N,H*W,C), row-major over the grid."""
    fmap = as_array(fmap)
    N, C, H, W = fmap.shape
    return fmap.reshape(N, C, H * W).transpose(0, 2, 1)


def from_tokens(tokens, H: int, W: int) -> np.ndarray:
    N, n, C = tokens.shape
    if n != H * W:
        raise ShapeError(f"{n} tokens cannot fill a {H}x{W} grid")
    return tokens.transpose(0, 2, 1).reshape(N, C, H, W)
