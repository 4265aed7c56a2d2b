"""Image files and colour conversion.

Binary PGM (P5) and PPM (P6) are read and written directly; PNG goes
through Pillow.  Pixel values are exchanged as float64 in [0, 1], shaped
``(H, W)`` for grey and ``(H, W, 3)`` for RGB.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

# BT.601 full-range (JPEG) luma weights
KR, KG, KB = 0.299, 0.587, 0.114
CR_SCALE = 2.0 * (1.0 - KR)  # 1.402
CB_SCALE = 2.0 * (1.0 - KB)  # 1.772


class ImageReadError(OSError):
    pass


def _tokens(buf: bytes, count: int, pos: int) -> tuple[list[bytes], int]:
    out = []
    n = len(buf)
    while len(out) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageReadError("truncated PNM header")
        out.append(buf[start:pos])
    return out, pos + 1  # exactly one whitespace byte ends the header


def read_pnm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:2] not in (b"P5", b"P6"):
        raise ImageReadError(f"{path}: not a binary PGM/PPM file")
    channels = 1 if buf[:2] == b"P5" else 3
    try:
        (w, h, maxval), pos = _tokens(buf, 3, 2)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise ImageReadError(f"{path}: bad PNM header") from exc
    if not (0 < maxval < 65536) or w <= 0 or h <= 0:
        raise ImageReadError(f"{path}: bad PNM header values")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = w * h * channels
    data = buf[pos:pos + count * dtype.itemsize]
    if len(data) < count * dtype.itemsize:
        raise ImageReadError(f"{path}: truncated pixel data")
    arr = np.frombuffer(data, dtype=dtype).astype(np.float64) / maxval
    return arr.reshape(h, w) if channels == 1 else arr.reshape(h, w, 3)


def to_uint8(img) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_pnm(path, img) -> None:
    px = to_uint8(img)
    if px.ndim == 2:
        magic = b"P5"
    elif px.ndim == 3 and px.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot write array of shape {px.shape} as PNM")
    h, w = px.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode("ascii"))
        fh.write(px.tobytes())


def read_image(path) -> np.ndarray:
    path = Path(path)
    try:
        if path.suffix.lower() in (".pgm", ".ppm", ".pnm"):
            return read_pnm(path)
        from PIL import Image

        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB" if "A" in im.mode or im.mode in ("P", "CMYK") else "L")
            arr = np.asarray(im, dtype=np.float64) / 255.0
        return arr
    except ImageReadError:
        raise
    except (OSError, ValueError) as exc:
        raise ImageReadError(f"{path}: {exc}") from exc


def write_image(path, img) -> None:
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".ppm", ".pnm"):
        write_pnm(path, img)
        return
    from PIL import Image

    Image.fromarray(to_uint8(img)).save(path)


# ----------------------------------------------------------------------------
# colour


def rgb_to_gray(rgb) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    return KR * rgb[..., 0] + KG * rgb[..., 1] + KB * rgb[..., 2]


def as_gray(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return rgb_to_gray(img) if img.ndim == 3 else img


def rgb_to_ycrcb(rgb) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rgb = np.asarray(rgb, dtype=np.float64)
    y = rgb_to_gray(rgb)
    cr = (rgb[..., 0] - y) / CR_SCALE + 0.5
    cb = (rgb[..., 2] - y) / CB_SCALE + 0.5
    return y, cr, cb


def ycrcb_to_rgb(y, cr, cb) -> np.ndarray:
    r = y + CR_SCALE * (cr - 0.5)
    b = y + CB_SCALE * (cb - 0.5)
    g = (y - KR * r - KB * b) / KG
    return np.stack([r, g, b], axis=-1)
